"""Spectral reconstruction losses: mel L1 and soft dynamic time warping.

Soft-DTW runs a dynamic program over monotonic alignment paths with three
moves per step: advance both sequences (diagonal, free), advance only the
reference, or advance only the prediction (each costing the warp penalty
omega on top of the frame cost). The hard minimum is replaced by
softmin_tau(a, b, c) = -tau * log(exp(-a/tau) + exp(-b/tau) + exp(-c/tau)),
which makes the total path cost differentiable.

The per-step frame cost is the L1 distance between the aligned frames; the
published running-total formulation would re-add the full spectrogram
distance at every path step, so the per-step form used by the aligner this
loss follows is implemented instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

# Finite stand-in for +inf so that softmin gradients stay NaN-free: cells
# holding this value contribute exp(-1e30/tau) == 0 exactly in either float
# width, while torch.where() on true infinities would leak NaN gradients.
_LARGE = 1e30


@dataclass(frozen=True)
class SoftDTWConfig:
    """Warp penalty, soft-min temperature, optional Sakoe-Chiba band radius."""

    omega: float = 1.0
    tau: float = 0.01
    band_width: int | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")


def mel_l1(mel_gt: torch.Tensor, mel_pred: torch.Tensor):
    """L1 mel loss.

    Returns ``(scalar, per_frame)`` where scalar is the mean absolute
    difference over all frames and bins and per_frame is the mean over bins
    for each frame (used by the phoneme-wise reward). Accepts [T, M] pairs or
    batched [B, T, M] pairs; batched inputs yield a [B] scalar per utterance
    and [B, T] per-frame values.
    """
    if mel_gt.shape != mel_pred.shape:
        raise ValueError(f"mel shape mismatch: {tuple(mel_gt.shape)} vs {tuple(mel_pred.shape)}")
    diff = (mel_gt - mel_pred).abs()
    per_frame = diff.mean(dim=-1)
    if diff.dim() == 3:
        scalar = diff.mean(dim=(-2, -1))
    else:
        scalar = diff.mean()
    return scalar, per_frame


def _softmin3(a: torch.Tensor, b: torch.Tensor, c: torch.Tensor, tau: float) -> torch.Tensor:
    stacked = torch.stack([-a / tau, -b / tau, -c / tau])
    return -tau * torch.logsumexp(stacked, dim=0)


def soft_dtw(mel_gt: torch.Tensor, mel_pred: torch.Tensor, cfg: SoftDTWConfig) -> torch.Tensor:
    """Soft-DTW total path cost between two frame sequences [Tg, M], [Tp, M].

    Differentiable w.r.t. both inputs. With band_width r, cells with
    |i - j| > max(r, |Tg - Tp|) are excluded from the search.
    """
    if mel_gt.dim() != 2 or mel_pred.dim() != 2:
        raise ValueError("soft_dtw expects 2-D [T, n_mels] inputs")
    if mel_gt.size(0) == 0 or mel_pred.size(0) == 0:
        raise ValueError("soft_dtw inputs must be non-empty")
    if mel_gt.size(1) != mel_pred.size(1):
        raise ValueError("soft_dtw inputs must share the mel dimension")

    m, n = mel_gt.size(0), mel_pred.size(0)
    dtype, device = mel_gt.dtype, mel_gt.device
    cost = torch.cdist(mel_gt.unsqueeze(0), mel_pred.unsqueeze(0), p=1).squeeze(0)

    band = None
    if cfg.band_width is not None:
        band = max(cfg.band_width, abs(m - n))

    # R[i, j] over the (m+1) x (n+1) grid, held as anti-diagonals i + j = d.
    # diag d covers rows i in [max(0, d - n), min(m, d)].
    def row_lo(d: int) -> int:
        return max(0, d - n)

    large = torch.tensor(_LARGE, dtype=dtype, device=device)

    def take(diag: torch.Tensor, d_src: int, rows: torch.Tensor) -> torch.Tensor:
        idx = rows - row_lo(d_src)
        valid = (idx >= 0) & (idx < diag.numel())
        return torch.where(valid, diag[idx.clamp(0, diag.numel() - 1)], large)

    prev2 = None
    prev1 = torch.zeros(1, dtype=dtype, device=device)  # diag 0: just R[0, 0] = 0
    for d in range(1, m + n + 1):
        rows = torch.arange(row_lo(d), min(m, d) + 1, device=device)
        cols = d - rows
        interior = (rows >= 1) & (cols >= 1)
        if band is not None:
            interior &= (rows - cols).abs() <= band

        a = take(prev2, d - 2, rows - 1) if prev2 is not None else large.expand(rows.numel())
        b = take(prev1, d - 1, rows - 1) + cfg.omega
        c = take(prev1, d - 1, rows) + cfg.omega
        soft = _softmin3(a, b, c, cfg.tau)

        step_cost = cost[(rows - 1).clamp(min=0), (cols - 1).clamp(min=0)]
        diag = torch.where(interior, step_cost + soft, large.expand(rows.numel()))
        prev2, prev1 = prev1, diag

    return prev1[-1]
