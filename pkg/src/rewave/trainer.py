"""Training loop, checkpointing, and synthesis.

Each training step runs the full dual-hypothesis protocol: encode, predict
durations, build the shifted alternative, upsample both to frame level, crop
one shared random segment, decode both crops, and compare their mel losses
against the ground-truth segment to produce keep/shift rewards. The shift
branch never carries gradients; it exists only to generate rewards. The
generator then updates on adversarial + reconstruction + duration losses,
followed by the discriminator update on the keep-path audio.
"""

from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import aligner, data, signal
from .aligner import (
    PHONEME_WISE,
    SEGMENT_WISE,
    AlignmentGrid,
    DurationPredictor,
    RewardVector,
    apply_shift,
    compute_reward,
    cumulative_round,
    gaussian_upsample,
    reinforced_duration_loss,
    sample_segment,
    scale_durations,
    segment_token_range,
    slice_frames,
    total_duration_loss,
)
from .config import Config, config_hash, config_to_dict, save_config
from .data import Batch, CorpusEntry, collate
from .encoder import Encoder, EncoderConfig
from .objectives import mel_l1, soft_dtw
from .signal import Waveform, get_mel_extractor
from .vocoder import Decoder, DiscriminatorSet, feature_matching_loss, lsgan_losses

logger = logging.getLogger(__name__)

_AUDIO_CACHE_SIZE = 256


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; the message names the offending utterances."""


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    reward_shift_fraction: float
    lr: float


class Generator(nn.Module):
    """Encoder, duration predictor, and decoder under one parameter tree."""

    def __init__(self, encoder: Encoder, duration_predictor: DurationPredictor, decoder: Decoder):
        super().__init__()
        self.encoder = encoder
        self.duration_predictor = duration_predictor
        self.decoder = decoder


def build_models(cfg: Config, vocab_size: int) -> tuple[Generator, DiscriminatorSet]:
    enc_cfg = EncoderConfig(
        vocab_size=vocab_size,
        hidden_dim=cfg.model.encoder.hidden_dim,
        kernel_sizes=cfg.model.encoder.kernel_sizes,
        dilations=cfg.model.encoder.dilations,
        num_blocks=cfg.model.encoder.num_blocks,
    )
    encoder = Encoder(enc_cfg)
    predictor = DurationPredictor(
        hidden_dim=enc_cfg.hidden_dim,
        filter_dim=cfg.model.duration_predictor.filter_dim,
        kernel_size=cfg.model.duration_predictor.kernel_size,
        dropout=cfg.model.duration_predictor.dropout,
    )
    decoder = Decoder(cfg.model.decoder)
    return Generator(encoder, predictor, decoder), DiscriminatorSet(cfg.model.discriminator)


def synthesize_with_alignment(
    generator: Generator, tokenizer, cfg: Config, text: str
) -> tuple[Waveform, AlignmentGrid, np.ndarray]:
    """Full-utterance inference: predicted durations only, no shift, no cropping.

    Raw durations are converted to integer frame counts by error-diffusing
    cumulative rounding; their sum fixes the output frame count T, and the
    waveform is the decoded T frames (T * hop samples).
    """
    ids = tokenizer(text).ids
    generator.eval()
    with torch.no_grad():
        state = generator.encoder(torch.from_numpy(ids))
        d_pred = generator.duration_predictor(state)
        lengths = cumulative_round(d_pred)
        if int(lengths.sum()) < 1:
            lengths = torch.zeros_like(d_pred)
            lengths[int(d_pred.argmax())] = 1.0
        T = int(lengths.sum())
        centers = torch.cumsum(lengths, dim=-1) - lengths / 2
        frames, grid = gaussian_upsample(state.hidden, centers, cfg.train.sigma2, T)
        audio = generator.decoder(frames)
    wave = Waveform(samples=audio.numpy().astype(np.float32), sample_rate=cfg.audio.sample_rate)
    return wave, grid, d_pred.numpy()


def synthesize(text: str, checkpoint_path: str | Path) -> Waveform:
    """Convenience wrapper: load a checkpoint and synthesize one utterance."""
    loaded = load_checkpoint(checkpoint_path)
    wave, _, _ = synthesize_with_alignment(loaded.generator, loaded.tokenizer, loaded.config, text)
    return wave


@dataclass
class LoadedCheckpoint:
    step: int
    config: Config
    tokenizer: object
    generator: Generator
    discriminators: DiscriminatorSet
    blob: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """Rebuild models from a checkpoint directory ({blob.pt, manifest.json})."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    from .config import config_from_dict  # local import to keep module load light

    cfg = config_from_dict(json.loads((path.parent / "config.json").read_text()))
    tokenizer = data.load_vocabulary(path.parent / manifest["vocabulary"])
    blob = torch.load(path / "blob.pt", weights_only=False)
    if blob["step"] != manifest["step"]:
        raise RuntimeError(
            f"checkpoint mismatch: manifest step {manifest['step']} != blob step {blob['step']}"
        )
    generator, discriminators = build_models(cfg, tokenizer.vocab_size)
    generator.load_state_dict(blob["generator"])
    discriminators.load_state_dict(blob["discriminators"])
    generator.eval()
    discriminators.eval()
    return LoadedCheckpoint(blob["step"], cfg, tokenizer, generator, discriminators, blob)


class Trainer:
    """Owns the models, optimizers, RNG, and the metrics/checkpoint files."""

    def __init__(
        self,
        cfg: Config,
        tokenizer,
        train_entries: list[CorpusEntry],
        val_entries: list[CorpusEntry],
        workdir: str | Path,
    ):
        if cfg.train.reward_scope != "segment":
            raise NotImplementedError(
                "utterance-level reward scope is reserved; only 'segment' is implemented"
            )
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.train_entries = train_entries
        self.val_entries = val_entries
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.checkpoint_dir = self.workdir / "checkpoints"
        self.checkpoint_dir.mkdir(exist_ok=True)
        self.metrics_path = self.workdir / "metrics.jsonl"

        torch.manual_seed(cfg.train.seed)
        self.rng = np.random.default_rng(cfg.train.seed)

        self.generator, self.discriminators = build_models(cfg, tokenizer.vocab_size)
        t = cfg.train
        self.opt_g = torch.optim.AdamW(
            self.generator.parameters(), lr=t.lr, betas=t.betas, weight_decay=t.weight_decay
        )
        self.opt_d = torch.optim.AdamW(
            self.discriminators.parameters(), lr=t.lr, betas=t.betas, weight_decay=t.weight_decay
        )
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(self.opt_g, gamma=t.lr_decay)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(self.opt_d, gamma=t.lr_decay)

        self.mel = get_mel_extractor(cfg.audio)
        self.step = 0
        self.epoch = 0
        self.last_losses: dict[str, float] = {}
        self.last_val: float | None = None
        self._cache: OrderedDict[str, tuple[np.ndarray, np.ndarray]] = OrderedDict()

        save_config(self.workdir / "config.json", cfg)
        data.save_vocabulary(self.checkpoint_dir / "vocab.json", tokenizer)
        save_config(self.checkpoint_dir / "config.json", cfg)

    # ---------------------------------------------------------------- data

    def _load_entry(self, entry: CorpusEntry) -> tuple[np.ndarray, np.ndarray]:
        cached = self._cache.get(entry.utterance_id)
        if cached is not None:
            self._cache.move_to_end(entry.utterance_id)
            return cached
        wave = signal.load_audio(entry.audio_path)
        mel = signal.mel_spectrogram(wave, self.cfg.audio)
        item = (wave.samples, mel.frames)
        self._cache[entry.utterance_id] = item
        if len(self._cache) > _AUDIO_CACHE_SIZE:
            self._cache.popitem(last=False)
        return item

    def make_batch(self, entries: list[CorpusEntry]) -> Batch:
        audios, mels = [], []
        for entry in entries:
            audio, mel = self._load_entry(entry)
            audios.append(audio)
            mels.append(mel)
        return collate(
            [e.utterance_id for e in entries],
            [e.phonemes.ids for e in entries],
            audios,
            mels,
        )

    def _batches(self):
        order = self.rng.permutation(len(self.train_entries))
        bs = self.cfg.train.batch_size
        for lo in range(0, len(order), bs):
            chunk = [self.train_entries[i] for i in order[lo : lo + bs]]
            yield self.make_batch(chunk)

    # ---------------------------------------------------------------- step

    def _check_finite(self, value: torch.Tensor, name: str, batch: Batch) -> None:
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(
                f"non-finite {name} at step {self.step}; "
                f"batch utterances: {batch.utterance_ids}"
            )

    def _ground_truth_segments(self, batch: Batch, specs: list[aligner.SegmentSpec]) -> torch.Tensor:
        hop = self.cfg.audio.hop
        gamma = self.cfg.train.gamma
        segments = []
        for i, spec in enumerate(specs):
            t_u = int(batch.mel_lengths[i])
            lo = spec.offset * hop
            hi = min((spec.offset + gamma) * hop, t_u * hop)
            seg = batch.audio[i, lo:hi]
            if seg.numel() < gamma * hop:
                seg = torch.cat([seg, seg.new_zeros(gamma * hop - seg.numel())])
            segments.append(seg)
        return torch.stack(segments)

    def _rewards(
        self,
        batch: Batch,
        specs: list[aligner.SegmentSpec],
        l_keep: torch.Tensor,
        scalar_keep: torch.Tensor,
        scalar_shift: torch.Tensor,
        frame_keep: torch.Tensor,
        frame_shift: torch.Tensor,
    ) -> RewardVector:
        """Per-token rewards [B, N]; tokens outside the crop default to keep."""
        mode = self.cfg.train.reward_mode
        r_keep = torch.ones_like(batch.tokens, dtype=scalar_keep.dtype)
        r_shift = torch.zeros_like(r_keep)
        for i in range(len(batch)):
            n_real = int(batch.token_mask[i].sum())
            if mode == SEGMENT_WISE:
                rv = compute_reward(scalar_keep[i], scalar_shift[i], mode, n_real)
                r_keep[i, :n_real] = rv.r_keep
                r_shift[i, :n_real] = rv.r_shift
            else:
                lo, hi = segment_token_range(l_keep[i].detach(), specs[i])
                hi = min(hi, n_real)
                if hi > lo:
                    rv = compute_reward(frame_keep[i], frame_shift[i], mode, hi - lo)
                    r_keep[i, lo:hi] = rv.r_keep
                    r_shift[i, lo:hi] = rv.r_shift
        return RewardVector(r_keep=r_keep, r_shift=r_shift)

    def train_step(self, batch: Batch) -> StepReport:
        cfg = self.cfg.train
        gamma = cfg.gamma
        self.generator.train()
        self.discriminators.train()

        state = self.generator.encoder(batch.tokens, batch.token_mask)
        d_pred = self.generator.duration_predictor(state)
        m_lengths = batch.mel_lengths.to(d_pred.dtype)
        t_max = int(batch.mel_lengths.max())

        l_keep, c_keep = scale_durations(d_pred, m_lengths, batch.token_mask)
        frames_keep, _ = gaussian_upsample(
            state.hidden, c_keep, cfg.sigma2, t_max, batch.token_mask
        )

        specs = [
            sample_segment(int(batch.mel_lengths[i]), gamma, self.rng)
            for i in range(len(batch))
        ]
        seg_keep = torch.stack(
            [
                slice_frames(frames_keep[i, : int(batch.mel_lengths[i])], specs[i])
                for i in range(len(batch))
            ]
        )
        audio_keep = self.generator.decoder(seg_keep)
        gt_seg = self._ground_truth_segments(batch, specs)

        mel_gt = self.mel(gt_seg)
        mel_keep = self.mel(audio_keep)
        scalar_keep, frame_keep = mel_l1(mel_gt, mel_keep)

        if cfg.compute_shift_pass:
            with torch.no_grad():
                d_shift = apply_shift(d_pred.detach(), cfg.alpha, batch.token_mask)
                _, c_shift = scale_durations(d_shift, m_lengths, batch.token_mask)
                frames_shift, _ = gaussian_upsample(
                    state.hidden.detach(), c_shift, cfg.sigma2, t_max, batch.token_mask
                )
                seg_shift = torch.stack(
                    [
                        slice_frames(frames_shift[i, : int(batch.mel_lengths[i])], specs[i])
                        for i in range(len(batch))
                    ]
                )
                audio_shift = self.generator.decoder(seg_shift)
                scalar_shift, frame_shift = mel_l1(mel_gt, self.mel(audio_shift))
            reward = self._rewards(
                batch, specs, l_keep, scalar_keep.detach(), scalar_shift,
                frame_keep.detach(), frame_shift,
            )
            l_re = reinforced_duration_loss(d_pred, d_shift, reward).mean()
        else:
            d_shift = d_pred.detach()
            reward = RewardVector(
                r_keep=torch.ones_like(d_pred), r_shift=torch.zeros_like(d_pred)
            )
            l_re = d_pred.new_zeros(())

        if cfg.use_soft_dtw:
            per_utt = [
                soft_dtw(mel_gt[i], mel_keep[i], cfg.soft_dtw) for i in range(len(batch))
            ]
            recon = torch.stack(per_utt).mean() / (gamma * self.cfg.audio.n_mels)
        else:
            recon = scalar_keep.mean()

        l_total = total_duration_loss(d_pred, m_lengths, batch.token_mask).mean()

        fake_outputs = self.discriminators(audio_keep)
        fake_logits = [logits for logits, _ in fake_outputs]
        g_adv = sum(((f - 1.0) ** 2).mean() for f in fake_logits)

        loss_g = (
            cfg.lambda_adv * g_adv
            + cfg.lambda_mel * recon
            + cfg.lambda_dur_total * l_total
            + cfg.lambda_re * l_re
        )
        if cfg.use_feature_matching:
            with torch.no_grad():
                real_outputs_fm = self.discriminators(gt_seg)
            loss_g = loss_g + cfg.lambda_fm * feature_matching_loss(real_outputs_fm, fake_outputs)

        self._check_finite(loss_g, "generator loss", batch)
        self.opt_g.zero_grad()
        loss_g.backward()
        self.opt_g.step()

        real_outputs = self.discriminators(gt_seg)
        fake_outputs_d = self.discriminators(audio_keep.detach())
        loss_d, _ = lsgan_losses(
            [logits for logits, _ in real_outputs], [logits for logits, _ in fake_outputs_d]
        )
        self._check_finite(loss_d, "discriminator loss", batch)
        self.opt_d.zero_grad()
        loss_d.backward()
        self.opt_d.step()

        mask = batch.token_mask
        shift_fraction = float(reward.r_shift[mask].sum().item()) / int(mask.sum())
        self.step += 1
        losses = {
            "g_total": float(loss_g.item()),
            "g_adv": float(g_adv.item()),
            "mel": float(scalar_keep.mean().item()),
            "recon": float(recon.item()),
            "dur_total": float(l_total.item()),
            "re": float(l_re.item()),
            "d": float(loss_d.item()),
        }
        self.last_losses = losses
        return StepReport(
            step=self.step,
            losses=losses,
            reward_shift_fraction=shift_fraction,
            lr=self.opt_g.param_groups[0]["lr"],
        )

    # ----------------------------------------------------------- validation

    def validate(self) -> float:
        """Mean keep-path mel L1 on a leading segment of each validation utterance."""
        if not self.val_entries:
            return float("nan")
        cfg = self.cfg.train
        self.generator.eval()
        totals = []
        with torch.no_grad():
            for entry in self.val_entries:
                batch = self.make_batch([entry])
                state = self.generator.encoder(batch.tokens, batch.token_mask)
                d_pred = self.generator.duration_predictor(state)
                t_u = int(batch.mel_lengths[0])
                _, centers = scale_durations(d_pred, batch.mel_lengths.to(d_pred.dtype),
                                             batch.token_mask)
                frames, _ = gaussian_upsample(
                    state.hidden, centers, cfg.sigma2, t_u, batch.token_mask
                )
                spec = aligner.SegmentSpec(gamma=cfg.gamma, offset=0)
                seg = slice_frames(frames[0], spec)
                audio = self.generator.decoder(seg)
                gt = self._ground_truth_segments(batch, [spec])[0]
                scalar, _ = mel_l1(self.mel(gt), self.mel(audio))
                totals.append(float(scalar.item()))
        self.generator.train()
        return float(np.mean(totals))

    # ---------------------------------------------------------------- loop

    def _log(self, payload: dict) -> None:
        with open(self.metrics_path, "a") as handle:
            handle.write(json.dumps(payload) + "\n")

    def fit(self) -> Path:
        """Train to max_steps; returns the final checkpoint directory."""
        cfg = self.cfg.train
        if not self.train_entries:
            raise ValueError("training split is empty")
        while self.step < cfg.max_steps:
            for batch in self._batches():
                report = self.train_step(batch)
                self._log(
                    {
                        "kind": "train",
                        "step": report.step,
                        "losses": report.losses,
                        "reward_shift_fraction": report.reward_shift_fraction,
                        "lr": report.lr,
                    }
                )
                if self.step % cfg.validation_interval == 0 and self.val_entries:
                    val = self.validate()
                    self.last_val = val
                    self._log({"kind": "val", "step": self.step, "val_mel_l1": val})
                if self.step % cfg.checkpoint_interval == 0:
                    self.save_checkpoint()
                if self.step >= cfg.max_steps:
                    break
            self.epoch += 1
            self.sched_g.step()
            self.sched_d.step()
        return self.save_checkpoint()

    # ------------------------------------------------------------ persist

    def save_checkpoint(self) -> Path:
        """Atomic write: assemble in a temp dir, then rename into place."""
        name = f"step_{self.step:08d}"
        target = self.checkpoint_dir / name
        tmp = self.checkpoint_dir / f".{name}.tmp"
        if tmp.exists():
            for child in tmp.iterdir():
                child.unlink()
            tmp.rmdir()
        tmp.mkdir()
        blob = {
            "step": self.step,
            "epoch": self.epoch,
            "generator": self.generator.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "sched_g": self.sched_g.state_dict(),
            "sched_d": self.sched_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.rng.bit_generator.state,
        }
        torch.save(blob, tmp / "blob.pt")
        manifest = {
            "step": self.step,
            "config_hash": config_hash(self.cfg),
            "vocabulary": "vocab.json",
            "metrics": {"losses": self.last_losses, "val_mel_l1": self.last_val},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if target.exists():
            for child in target.iterdir():
                child.unlink()
            target.rmdir()
        os.replace(tmp, target)
        return target

    def restore(self, checkpoint_path: str | Path) -> None:
        """Resume training state (models, optimizers, schedulers, RNG, step)."""
        path = Path(checkpoint_path)
        blob = torch.load(path / "blob.pt", weights_only=False)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest["config_hash"] != config_hash(self.cfg):
            logger.warning("resuming with a different config than the checkpoint was trained with")
        self.generator.load_state_dict(blob["generator"])
        self.discriminators.load_state_dict(blob["discriminators"])
        self.opt_g.load_state_dict(blob["opt_g"])
        self.opt_d.load_state_dict(blob["opt_d"])
        self.sched_g.load_state_dict(blob["sched_g"])
        self.sched_d.load_state_dict(blob["sched_d"])
        torch.set_rng_state(blob["torch_rng"])
        self.rng.bit_generator.state = blob["numpy_rng"]
        self.step = blob["step"]
        self.epoch = blob["epoch"]


def prepare_data(cfg: Config, workdir: str | Path):
    """Metadata -> splits -> tokenizer (train texts only) -> tokenized entries."""
    workdir = Path(workdir)
    metadata_path = workdir / cfg.data.metadata_path
    wav_dir = workdir / cfg.data.wav_dir
    lines = data.read_metadata(metadata_path)
    train_lines, val_lines, test_lines = data.make_splits(
        lines, cfg.train.seed, cfg.data.val_size, cfg.data.test_size
    )
    if cfg.data.tokenizer == "char":
        tokenizer = data.CharTokenizer.from_texts([l.normalized_text for l in train_lines])
    else:
        tokenizer = data.PhonemeIdTokenizer(cfg.data.phoneme_vocab_size)
    train = data.build_entries(train_lines, wav_dir, tokenizer)
    val = data.build_entries(val_lines, wav_dir, tokenizer)
    test = data.build_entries(test_lines, wav_dir, tokenizer)
    return tokenizer, train, val, test


def fit_from_config(cfg: Config, workdir: str | Path, resume: str | Path | None = None) -> Path:
    """End-to-end: prepare data, build a Trainer, optionally resume, train."""
    tokenizer, train, val, _ = prepare_data(cfg, workdir)
    trainer = Trainer(cfg, tokenizer, train, val, workdir)
    if resume is not None:
        trainer.restore(resume)
    return trainer.fit()
