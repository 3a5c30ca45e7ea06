"""Corpus ingestion, tokenization, splits, batching, and duration-target files.

Metadata follows the LJSpeech convention: one utterance per line,
``id|raw_text|normalized_text``, with audio at ``wav_dir/<id>.wav``.
Target durations (frames per token, produced by an external aligner) are
ingested from a whitespace-separated file: ``id<TAB>d1 d2 ... dN``.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

PAD_ID = 0

# Fixed base alphabet for the character tokenizer; extra symbols found in the
# training texts are appended after it, so the base ids are stable across runs.
BASE_SYMBOLS = tuple(string.ascii_lowercase) + tuple(string.digits) + (" ", "'")

_PUNCTUATION = set(string.punctuation) - {"'"}


class CorpusFormatError(ValueError):
    """Malformed metadata line."""


class MissingAudioError(FileNotFoundError):
    """Metadata references a wav file that does not exist."""


class EmptyTextError(ValueError):
    """Text is empty after normalization."""


class UnknownSymbolError(KeyError):
    """Text contains a symbol outside the tokenizer vocabulary."""


class DurationTargetError(ValueError):
    """Malformed or inconsistent duration-target file."""


class SplitSizeError(ValueError):
    """Corpus smaller than the requested validation + test sizes."""


@dataclass
class PhonemeSequence:
    """Integer token ids for one utterance."""

    ids: np.ndarray
    utterance_id: str = ""

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class CorpusEntry:
    utterance_id: str
    phonemes: PhonemeSequence
    audio_path: Path


@dataclass
class DurationTargets:
    utterance_id: str
    durations: np.ndarray


@dataclass
class MetadataLine:
    utterance_id: str
    raw_text: str
    normalized_text: str


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation (apostrophes kept), collapse whitespace."""
    lowered = text.lower()
    kept = "".join(c if c not in _PUNCTUATION else " " for c in lowered)
    return " ".join(kept.split())


class CharTokenizer:
    """Character-level tokenizer over normalized text.

    Ids start at 1; 0 is reserved for padding. The vocabulary is the fixed
    base alphabet plus any extra symbols discovered in the texts it was built
    from (normally the training split).
    """

    kind = "char"

    def __init__(self, symbols: tuple[str, ...] = BASE_SYMBOLS):
        self.symbols = tuple(symbols)
        self._index = {s: i + 1 for i, s in enumerate(self.symbols)}

    @classmethod
    def from_texts(cls, texts: list[str]) -> "CharTokenizer":
        extra = sorted({c for t in texts for c in normalize_text(t)} - set(BASE_SYMBOLS))
        return cls(BASE_SYMBOLS + tuple(extra))

    @property
    def vocab_size(self) -> int:
        # +1 for PAD
        return len(self.symbols) + 1

    def __call__(self, text: str, utterance_id: str = "") -> PhonemeSequence:
        normalized = normalize_text(text)
        if not normalized:
            raise EmptyTextError(f"text is empty after normalization: {text!r}")
        try:
            ids = np.array([self._index[c] for c in normalized], dtype=np.int64)
        except KeyError as exc:
            raise UnknownSymbolError(
                f"symbol {exc.args[0]!r} not in vocabulary (utterance {utterance_id or '?'})"
            ) from None
        return PhonemeSequence(ids=ids, utterance_id=utterance_id)

    def to_json(self) -> dict:
        return {"type": self.kind, "symbols": list(self.symbols)}


class PhonemeIdTokenizer:
    """Passthrough for pre-phonemized input: whitespace-separated integer ids."""

    kind = "phoneme_ids"

    def __init__(self, vocab_size: int):
        if vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 (PAD + one symbol)")
        self._vocab_size = vocab_size

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def __call__(self, text: str, utterance_id: str = "") -> PhonemeSequence:
        parts = text.split()
        if not parts:
            raise EmptyTextError(f"no phoneme ids in: {text!r}")
        try:
            ids = np.array([int(p) for p in parts], dtype=np.int64)
        except ValueError:
            raise DurationTargetError(f"non-integer phoneme id in: {text!r}") from None
        if ids.min() < 1 or ids.max() >= self._vocab_size:
            raise UnknownSymbolError(
                f"phoneme id out of range [1, {self._vocab_size}) in utterance {utterance_id or '?'}"
            )
        return PhonemeSequence(ids=ids, utterance_id=utterance_id)

    def to_json(self) -> dict:
        return {"type": self.kind, "vocab_size": self._vocab_size}


def tokenizer_from_json(payload: dict):
    if payload.get("type") == CharTokenizer.kind:
        return CharTokenizer(tuple(payload["symbols"]))
    if payload.get("type") == PhonemeIdTokenizer.kind:
        return PhonemeIdTokenizer(int(payload["vocab_size"]))
    raise ValueError(f"unknown tokenizer type: {payload.get('type')!r}")


def save_vocabulary(path: str | Path, tokenizer) -> None:
    Path(path).write_text(json.dumps(tokenizer.to_json(), indent=2))


def load_vocabulary(path: str | Path):
    return tokenizer_from_json(json.loads(Path(path).read_text()))


def read_metadata(metadata_path: str | Path) -> list[MetadataLine]:
    """Parse an LJSpeech-format metadata file, keeping file order."""
    lines = []
    with open(metadata_path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 3 or not parts[0]:
                raise CorpusFormatError(
                    f"{metadata_path}:{lineno}: expected 'id|raw|normalized', got {line!r}"
                )
            lines.append(MetadataLine(parts[0], parts[1], parts[2]))
    return lines


def build_entries(
    lines: list[MetadataLine], wav_dir: str | Path, tokenizer
) -> list[CorpusEntry]:
    wav_dir = Path(wav_dir)
    entries = []
    for line in lines:
        audio_path = wav_dir / f"{line.utterance_id}.wav"
        if not audio_path.exists():
            raise MissingAudioError(
                f"missing audio for utterance '{line.utterance_id}': {audio_path}"
            )
        phonemes = tokenizer(line.normalized_text, utterance_id=line.utterance_id)
        entries.append(CorpusEntry(line.utterance_id, phonemes, audio_path))
    return entries


def load_corpus(metadata_path: str | Path, wav_dir: str | Path, tokenizer) -> list[CorpusEntry]:
    """Load and tokenize a corpus; order matches the metadata file."""
    return build_entries(read_metadata(metadata_path), wav_dir, tokenizer)


def make_splits(items: list, seed: int, val_size: int = 300, test_size: int = 300):
    """Disjoint (train, val, test) partition, reproducible under the seed."""
    if val_size + test_size > len(items):
        raise SplitSizeError(
            f"corpus has {len(items)} entries; cannot take val={val_size} + test={test_size}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    val = [items[i] for i in order[:val_size]]
    test = [items[i] for i in order[val_size : val_size + test_size]]
    train = [items[i] for i in order[val_size + test_size :]]
    return train, val, test


def load_duration_targets(
    path: str | Path, expected_lengths: dict[str, int] | None = None
) -> dict[str, DurationTargets]:
    """Read target durations; optionally check token counts against the corpus."""
    targets: dict[str, DurationTargets] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            utterance_id = parts[0]
            try:
                durations = np.array([int(p) for p in parts[1:]], dtype=np.int64)
            except ValueError:
                raise DurationTargetError(
                    f"{path}:{lineno}: non-integer duration for '{utterance_id}'"
                ) from None
            if durations.size == 0:
                raise DurationTargetError(f"{path}:{lineno}: no durations for '{utterance_id}'")
            if (durations < 0).any():
                raise DurationTargetError(
                    f"{path}:{lineno}: negative duration for '{utterance_id}'"
                )
            if expected_lengths is not None and utterance_id in expected_lengths:
                expected = expected_lengths[utterance_id]
                if len(durations) != expected:
                    raise DurationTargetError(
                        f"{path}:{lineno}: '{utterance_id}' has {len(durations)} durations, "
                        f"corpus has {expected} tokens"
                    )
            targets[utterance_id] = DurationTargets(utterance_id, durations)
    return targets


@dataclass
class Batch:
    """Padded token batch plus the matching audio and mel tensors."""

    utterance_ids: list[str]
    tokens: torch.Tensor          # [B, N] int64, PAD_ID at padding
    token_mask: torch.Tensor      # [B, N] bool
    audio: torch.Tensor           # [B, L] float32, zero padded
    audio_lengths: torch.Tensor   # [B] int64
    mel: torch.Tensor             # [B, T, n_mels] float32
    mel_lengths: torch.Tensor     # [B] int64, the per-utterance m_length

    def __len__(self) -> int:
        return len(self.utterance_ids)


def collate(
    ids: list[str],
    token_seqs: list[np.ndarray],
    audios: list[np.ndarray],
    mels: list[np.ndarray],
) -> Batch:
    """Pad variable-length utterances into one batch."""
    n_max = max(len(t) for t in token_seqs)
    l_max = max(len(a) for a in audios)
    t_max = max(m.shape[0] for m in mels)
    n_mels = mels[0].shape[1]
    batch = len(ids)

    tokens = torch.full((batch, n_max), PAD_ID, dtype=torch.int64)
    token_mask = torch.zeros((batch, n_max), dtype=torch.bool)
    audio = torch.zeros((batch, l_max), dtype=torch.float32)
    audio_lengths = torch.zeros(batch, dtype=torch.int64)
    mel = torch.zeros((batch, t_max, n_mels), dtype=torch.float32)
    mel_lengths = torch.zeros(batch, dtype=torch.int64)

    for i, (toks, aud, m) in enumerate(zip(token_seqs, audios, mels)):
        tokens[i, : len(toks)] = torch.from_numpy(toks)
        token_mask[i, : len(toks)] = True
        audio[i, : len(aud)] = torch.from_numpy(aud)
        audio_lengths[i] = len(aud)
        mel[i, : m.shape[0]] = torch.from_numpy(m)
        mel_lengths[i] = m.shape[0]

    return Batch(ids, tokens, token_mask, audio, audio_lengths, mel, mel_lengths)
