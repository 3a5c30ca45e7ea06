"""Objective metrics: duration error, mel-cepstral distortion, f0 RMSE.

Mel cepstra are the DCT-II of the training log-mel frames; MCD uses 13
coefficients with c0 (overall gain) dropped, paired frame-by-frame through a
hard DTW on cepstral Euclidean distance. f0 comes from a normalized
autocorrelation tracker (25 ms window, 10 ms hop, 50-500 Hz search band,
voicing threshold 0.3, parabolic peak interpolation); the RMSE is taken over
DTW-aligned frame pairs where both sides are voiced. These settings are
fixed so numbers are comparable across runs of this repo; they are not
calibrated against any external toolkit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fftpack import dct

from .aligner import AlignmentGrid
from .signal import SpectralConfig, Waveform, mel_spectrogram

MCD_CONST = 10.0 / math.log(10.0)


class PitchTrackingError(ValueError):
    """No co-voiced frames to compare."""


def duration_error(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute duration difference (frames per token)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"duration length mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def corpus_duration_error(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean of per-utterance duration errors."""
    if not pairs:
        raise ValueError("no utterances to evaluate")
    return float(np.mean([duration_error(p, t) for p, t in pairs]))


def mel_cepstra(w: Waveform, cfg: SpectralConfig, n_coeffs: int = 13) -> np.ndarray:
    """Per-frame cepstra [T, n_coeffs], c0 excluded."""
    logmel = mel_spectrogram(w, cfg).frames
    ceps = dct(logmel, type=2, axis=1, norm="ortho")
    return ceps[:, 1 : n_coeffs + 1]


def dtw_path(x: np.ndarray, y: np.ndarray) -> list[tuple[int, int]]:
    """Hard-DTW frame pairing between [Tx, D] and [Ty, D] on Euclidean cost."""
    tx, ty = len(x), len(y)
    cost = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=2)
    acc = np.full((tx + 1, ty + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, tx + 1):
        jlo, jhi = 1, ty + 1
        for j in range(jlo, jhi):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = []
    i, j = tx, ty
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        move = np.argmin([acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]])
        if move == 0:
            i, j = i - 1, j - 1
        elif move == 1:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return path


def cepstral_distortion(ref_ceps: np.ndarray, syn_ceps: np.ndarray,
                        path: list[tuple[int, int]] | None = None) -> float:
    """Mean (10/ln10) * sqrt(2 * sum_d (c_d - c'_d)^2) over aligned frames, in dB."""
    if path is None:
        path = dtw_path(ref_ceps, syn_ceps)
    dists = [
        MCD_CONST * math.sqrt(2.0 * float(np.sum((ref_ceps[i] - syn_ceps[j]) ** 2)))
        for i, j in path
    ]
    return float(np.mean(dists))


def mcd13(ref: Waveform, syn: Waveform, cfg: SpectralConfig | None = None) -> float:
    """Mel-cepstral distortion over 13 coefficients (c0 dropped), in dB."""
    cfg = cfg or SpectralConfig()
    if ref.num_samples == 0 or syn.num_samples == 0:
        raise ValueError("empty waveform")
    ref_ceps = mel_cepstra(ref, cfg)
    syn_ceps = mel_cepstra(syn, cfg)
    if not np.abs(ref_ceps).any() and not np.abs(syn_ceps).any():
        raise ValueError("degenerate (all-silence) inputs")
    return cepstral_distortion(ref_ceps, syn_ceps)


@dataclass
class PitchTrack:
    f0: np.ndarray        # Hz, 0 where unvoiced
    voiced: np.ndarray    # bool
    hop_samples: int


def track_f0(
    w: Waveform,
    fmin: float = 50.0,
    fmax: float = 500.0,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    voicing_threshold: float = 0.3,
) -> PitchTrack:
    """Normalized-autocorrelation pitch track with parabolic peak refinement."""
    sr = w.sample_rate
    win = int(window_ms * sr / 1000.0)
    hop = int(hop_ms * sr / 1000.0)
    lag_min = max(2, int(sr / fmax))
    lag_max = min(win - 2, int(math.ceil(sr / fmin)))
    samples = np.asarray(w.samples, dtype=np.float64)

    f0s, voiced = [], []
    for start in range(0, max(len(samples) - win + 1, 1), hop):
        frame = samples[start : start + win]
        if len(frame) < win:
            break
        frame = frame - frame.mean()
        energy = float(np.dot(frame, frame))
        if energy < 1e-10:
            f0s.append(0.0)
            voiced.append(False)
            continue
        # normalized cross-correlation: raw autocorrelation divided by the
        # energies of the two overlapping stretches, so the peak height is
        # taper-free and comparable across lags
        raw = np.correlate(frame, frame, mode="full")[win - 1 :]
        cums = np.concatenate([[0.0], np.cumsum(frame**2)])
        lags = np.arange(win)
        denom = np.sqrt((cums[win - lags] - cums[0]) * (cums[win] - cums[lags])) + 1e-12
        ncc = raw / denom
        segment = ncc[lag_min : lag_max + 1]
        peak_rel = int(np.argmax(segment))
        peak = lag_min + peak_rel
        if float(segment[peak_rel]) < voicing_threshold:
            f0s.append(0.0)
            voiced.append(False)
            continue
        # parabolic interpolation for sub-sample lag
        lag = float(peak)
        if 0 < peak < win - 1:
            y0, y1, y2 = float(ncc[peak - 1]), float(ncc[peak]), float(ncc[peak + 1])
            denom3 = y0 - 2.0 * y1 + y2
            if abs(denom3) > 1e-12:
                shift = 0.5 * (y0 - y2) / denom3
                if abs(shift) <= 1.0:
                    lag += shift
        f0s.append(sr / lag)
        voiced.append(True)
    return PitchTrack(np.array(f0s), np.array(voiced, dtype=bool), hop)


def rmse_f0(ref: Waveform, syn: Waveform, cfg: SpectralConfig | None = None) -> float:
    """f0 RMSE (Hz) over DTW-aligned frames voiced in both signals.

    The alignment reuses the cepstral DTW pairing; each cepstral frame is
    mapped to the nearest pitch frame by time.
    """
    cfg = cfg or SpectralConfig()
    if ref.num_samples == 0 or syn.num_samples == 0:
        raise ValueError("empty waveform")
    ref_track = track_f0(ref)
    syn_track = track_f0(syn)
    path = dtw_path(mel_cepstra(ref, cfg), mel_cepstra(syn, cfg))

    def to_pitch_index(frame_idx: int, track: PitchTrack) -> int:
        t = frame_idx * cfg.hop
        return min(int(round(t / track.hop_samples)), len(track.f0) - 1)

    diffs = []
    for i, j in path:
        pi = to_pitch_index(i, ref_track)
        pj = to_pitch_index(j, syn_track)
        if ref_track.voiced[pi] and syn_track.voiced[pj]:
            diffs.append(ref_track.f0[pi] - syn_track.f0[pj])
    if not diffs:
        raise PitchTrackingError("no co-voiced frames between the two signals")
    return float(np.sqrt(np.mean(np.square(diffs))))


def plot_alignment(grid: AlignmentGrid | np.ndarray, out_path: str | Path) -> Path:
    """Grayscale heatmap PNG: rows are token indices, columns frame indices.

    Each frame's column is scaled by its maximum so the per-frame argmax
    survives 8-bit quantization.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    weights = grid.to_numpy() if isinstance(grid, AlignmentGrid) else np.asarray(grid)
    if weights.ndim != 2:
        raise ValueError("expected a [T, N] alignment grid")
    image = weights.T.copy()  # [N, T]
    col_max = image.max(axis=0, keepdims=True)
    col_max[col_max == 0] = 1.0
    image = image / col_max
    out_path = Path(out_path)
    plt.imsave(out_path, image, cmap="gray", origin="lower", vmin=0.0, vmax=1.0)
    return out_path
