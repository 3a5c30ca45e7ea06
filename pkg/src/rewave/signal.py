"""Audio I/O and log-mel feature extraction.

All corpus audio is mono float32 in [-1, 1] at 22050 Hz. Mel features are
magnitude STFT -> Slaney-style triangular mel filterbank -> natural log with
a fixed floor. The STFT input is reflect-padded by (n_fft - hop) / 2 with
center=False, so a waveform of length k * hop yields exactly k frames and a
frame index maps back to samples by multiplying with hop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile
from scipy.signal import resample_poly

TARGET_SAMPLE_RATE = 22050


class AudioReadError(RuntimeError):
    """Wav file missing, unreadable, or not decodable."""


class ChannelCountError(RuntimeError):
    """Input audio is not mono."""


@dataclass(frozen=True)
class SpectralConfig:
    """STFT and mel filterbank settings.

    hop must equal the decoder's total upsampling factor (256) so that frame
    indices map to sample indices by a plain multiplication.
    """

    n_fft: int = 1024
    win_size: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    sample_rate: int = TARGET_SAMPLE_RATE
    log_floor: float = 1e-5


@dataclass
class Waveform:
    """Mono audio, samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    @property
    def num_samples(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Log-mel frames, shape [T, n_mels]."""

    frames: np.ndarray
    hop: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


def _hz_to_mel(hz: np.ndarray) -> np.ndarray:
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = math.log(6.4) / 27.0
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / f_sp
    log_region = hz >= min_log_hz
    mel[log_region] = min_log_hz / f_sp + np.log(hz[log_region] / min_log_hz) / logstep
    return mel


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    mel = np.asarray(mel, dtype=np.float64)
    hz = mel * f_sp
    log_region = mel >= min_log_mel
    hz[log_region] = min_log_hz * np.exp(logstep * (mel[log_region] - min_log_mel))
    return hz


def mel_filterbank(
    sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    """Slaney-normalized triangular filterbank, shape [n_mels, n_fft // 2 + 1]."""
    if fmax > sample_rate / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    mel_points = np.linspace(_hz_to_mel(np.array([fmin]))[0], _hz_to_mel(np.array([fmax]))[0], n_mels + 2)
    hz_points = _mel_to_hz(mel_points)

    fdiff = np.diff(hz_points)
    ramps = hz_points[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1][:, None]
    upper = ramps[2:] / fdiff[1:][:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))

    # normalize each filter to unit area in Hz
    enorm = 2.0 / (hz_points[2:] - hz_points[:-2])
    weights *= enorm[:, None]
    return weights


def filterbank_center_frequencies(cfg: SpectralConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    mel_points = np.linspace(
        _hz_to_mel(np.array([cfg.fmin]))[0], _hz_to_mel(np.array([cfg.fmax]))[0], cfg.n_mels + 2
    )
    return _mel_to_hz(mel_points)[1:-1]


class MelExtractor(torch.nn.Module):
    """Differentiable waveform -> log-mel transform.

    Accepts [L] or [B, L] float tensors and returns [T, n_mels] or
    [B, T, n_mels]. Gradients flow through to the waveform, which is what the
    spectral losses and reward computation need.
    """

    def __init__(self, cfg: SpectralConfig):
        super().__init__()
        self.cfg = cfg
        basis = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
        self.register_buffer("mel_basis", torch.from_numpy(basis).float())
        self.register_buffer("window", torch.hann_window(cfg.win_size))

    def forward(self, wav: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        squeeze = wav.dim() == 1
        if squeeze:
            wav = wav.unsqueeze(0)
        if wav.size(-1) < cfg.win_size:
            raise ValueError(
                f"waveform too short for mel extraction: {wav.size(-1)} < win_size {cfg.win_size}"
            )
        if wav.dtype != self.window.dtype:
            wav = wav.to(self.window.dtype)
        pad = (cfg.n_fft - cfg.hop) // 2
        x = F.pad(wav.unsqueeze(1), (pad, pad), mode="reflect").squeeze(1)
        spec = torch.stft(
            x,
            cfg.n_fft,
            hop_length=cfg.hop,
            win_length=cfg.win_size,
            window=self.window,
            center=False,
            onesided=True,
            return_complex=True,
        )
        # epsilon keeps the magnitude gradient finite on silent frames
        mag = torch.sqrt(spec.real**2 + spec.imag**2 + 1e-9)
        mel = torch.matmul(self.mel_basis, mag)
        logmel = torch.log(torch.clamp(mel, min=cfg.log_floor))
        out = logmel.transpose(-2, -1)
        return out.squeeze(0) if squeeze else out


_EXTRACTORS: dict[SpectralConfig, MelExtractor] = {}


def get_mel_extractor(cfg: SpectralConfig) -> MelExtractor:
    """Shared per-config extractor (buffers are read-only, so sharing is safe)."""
    if cfg not in _EXTRACTORS:
        _EXTRACTORS[cfg] = MelExtractor(cfg)
    return _EXTRACTORS[cfg]


def mel_spectrogram(w: Waveform, cfg: SpectralConfig) -> MelSpectrogram:
    """Log-mel features of a waveform, shape [T, n_mels] with T = floor(len / hop)."""
    if w.num_samples < cfg.win_size:
        raise ValueError(
            f"waveform too short for mel extraction: {w.num_samples} < win_size {cfg.win_size}"
        )
    extractor = get_mel_extractor(cfg)
    with torch.no_grad():
        frames = extractor(torch.from_numpy(np.ascontiguousarray(w.samples, dtype=np.float32)))
    return MelSpectrogram(frames=frames.numpy(), hop=cfg.hop)


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float32) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise AudioReadError(f"unsupported wav sample format: {data.dtype}")


def load_audio(path: str | Path) -> Waveform:
    """Read a mono wav file, normalize to [-1, 1], resample to 22050 Hz."""
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise AudioReadError(f"audio file not found: {path}") from exc
    except Exception as exc:
        raise AudioReadError(f"cannot read wav file {path}: {exc}") from exc
    if data.ndim != 1:
        raise ChannelCountError(
            f"expected mono audio, got {data.shape[1]} channels: {path}"
        )
    samples = _to_float(data)
    if not np.all(np.isfinite(samples)):
        raise AudioReadError(f"non-finite samples in {path}")
    if sr != TARGET_SAMPLE_RATE:
        g = math.gcd(TARGET_SAMPLE_RATE, sr)
        samples = resample_poly(samples, TARGET_SAMPLE_RATE // g, sr // g).astype(np.float32)
    return Waveform(samples=samples, sample_rate=TARGET_SAMPLE_RATE)


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(str(path), w.sample_rate, (pcm * 32767.0).astype(np.int16))
