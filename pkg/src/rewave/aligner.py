"""Duration agent and alignment machinery.

The duration predictor is a small convolutional network emitting one
nonnegative scalar per token. Training compares two alignment hypotheses per
step: KEEP (the raw predictions) and SHIFT (predictions perturbed by +/-alpha
in alternating signs, which preserves the total duration). Whichever
hypothesis synthesizes audio closer to the ground truth earns the reward,
and the reinforced duration loss pulls predictions toward the winning
durations.

Token durations are scaled to the target frame count and expanded to frame
level with a Gaussian kernel centered at each token's cumulative midpoint;
frame t draws from token i with weight proportional to
exp(-(t - c_i)^2 / sigma^2), normalized over all tokens, so every row of the
alignment grid is a probability distribution and the expansion is
differentiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderState

logger = logging.getLogger(__name__)

SEGMENT_WISE = "segment_wise"
PHONEME_WISE = "phoneme_wise"
REWARD_MODES = (SEGMENT_WISE, PHONEME_WISE)

DEFAULT_SIGMA2 = 10.0
DEFAULT_GAMMA = 128


class DegenerateDurationError(ValueError):
    """All predicted durations are zero; the alignment is undefined."""


class NonFiniteLossError(FloatingPointError):
    """A reward input was NaN or infinite (training divergence signal)."""


@dataclass
class RewardVector:
    """Per-token one-hot keep/shift rewards; r_keep + r_shift == 1 elementwise."""

    r_keep: torch.Tensor
    r_shift: torch.Tensor

    def shift_fraction(self) -> float:
        total = self.r_shift.numel()
        return float(self.r_shift.sum().item()) / total if total else 0.0


@dataclass
class AlignmentGrid:
    """Frame-to-token weights [T, N] (rows sum to 1) at temperature sigma2."""

    weights: torch.Tensor
    sigma2: float

    def to_numpy(self) -> np.ndarray:
        return self.weights.detach().cpu().numpy()


@dataclass
class SegmentSpec:
    """A gamma-frame training crop starting at frame index ``offset``."""

    gamma: int
    offset: int


class DurationPredictor(nn.Module):
    """Two conv layers (ReLU, layer norm, dropout each) then a linear scalar head.

    A softplus keeps durations nonnegative; padding positions are forced to 0.
    """

    def __init__(self, hidden_dim: int = 256, filter_dim: int = 256,
                 kernel_size: int = 3, dropout: float = 0.1):
        super().__init__()
        pad = (kernel_size - 1) // 2
        self.conv1 = nn.Conv1d(hidden_dim, filter_dim, kernel_size, padding=pad)
        self.norm1 = nn.LayerNorm(filter_dim)
        self.conv2 = nn.Conv1d(filter_dim, filter_dim, kernel_size, padding=pad)
        self.norm2 = nn.LayerNorm(filter_dim)
        self.dropout = nn.Dropout(dropout)
        self.proj = nn.Linear(filter_dim, 1)

    def forward(self, state: EncoderState) -> torch.Tensor:
        """Returns [B, N] durations (or [N] for an unbatched state)."""
        hidden, mask = state.hidden, state.mask
        squeeze = hidden.dim() == 2
        if squeeze:
            hidden, mask = hidden.unsqueeze(0), mask.unsqueeze(0)
        fmask = mask.unsqueeze(1).to(hidden.dtype)  # [B, 1, N]

        x = self.conv1(hidden.transpose(1, 2)) * fmask
        x = self.dropout(self.norm1(F.relu(x).transpose(1, 2)).transpose(1, 2)) * fmask
        x = self.conv2(x) * fmask
        x = self.dropout(self.norm2(F.relu(x).transpose(1, 2)).transpose(1, 2)) * fmask
        d = F.softplus(self.proj(x.transpose(1, 2))).squeeze(-1)
        d = d * mask.to(d.dtype)
        return d.squeeze(0) if squeeze else d


def _as_batch(x: torch.Tensor):
    if x.dim() == 1:
        return x.unsqueeze(0), True
    return x, False


def apply_shift(d_pred: torch.Tensor, alpha: float,
                mask: torch.Tensor | None = None) -> torch.Tensor:
    """Alternating +/-alpha shift over the real tokens of each sequence.

    The sign pattern starts at +alpha and alternates; when the number of real
    tokens is odd the final token is left unshifted so the total duration is
    preserved. Results are clamped at zero; clamped mass is not redistributed
    (logged when it happens). Segment-wise and phoneme-wise training share
    this pattern - the modes differ only in reward granularity.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    d, squeezed = _as_batch(d_pred)
    if mask is None:
        m = torch.ones_like(d, dtype=torch.bool)
    else:
        m, _ = _as_batch(mask)

    position = torch.cumsum(m.to(d.dtype), dim=1) - 1          # index among real tokens
    sign = torch.where(position.long() % 2 == 0, 1.0, -1.0).to(d.dtype)
    n_real = m.sum(dim=1, keepdim=True)
    is_last_of_odd = (position == (n_real - 1)) & (n_real % 2 == 1)
    shift = sign * alpha
    shift = torch.where(is_last_of_odd, torch.zeros_like(shift), shift)
    shift = shift * m.to(d.dtype)

    shifted = d + shift
    clamped = torch.clamp(shifted, min=0.0)
    if (clamped != shifted).any():
        _warn_clamped(int((clamped != shifted).sum().item()))
    return clamped.squeeze(0) if squeezed else clamped


_clamp_warned = False


def _warn_clamped(count: int) -> None:
    # warn loudly once, then keep the signal at debug level
    global _clamp_warned
    level = logging.DEBUG if _clamp_warned else logging.WARNING
    logger.log(level, "shift clamped %d negative duration(s); total duration not preserved", count)
    _clamp_warned = True


def scale_durations(d: torch.Tensor, m_length,
                    mask: torch.Tensor | None = None):
    """Scale durations so they sum to m_length; return (lengths, centers).

    centers[i] = cumsum(lengths)[i] - lengths[i] / 2, in 1-based frame units.
    """
    dd, squeezed = _as_batch(d)
    if mask is not None:
        m, _ = _as_batch(mask)
        dd = dd * m.to(dd.dtype)
    total = dd.sum(dim=1, keepdim=True)
    if (total <= 0).any():
        raise DegenerateDurationError("duration vector sums to zero; cannot scale")
    target = torch.as_tensor(m_length, dtype=dd.dtype, device=dd.device).reshape(-1, 1)
    l_scaled = dd * (target / total)
    centers = torch.cumsum(l_scaled, dim=1) - l_scaled / 2
    if squeezed:
        return l_scaled.squeeze(0), centers.squeeze(0)
    return l_scaled, centers


def gaussian_upsample(hidden: torch.Tensor, centers: torch.Tensor,
                      sigma2: float, T: int,
                      mask: torch.Tensor | None = None):
    """Expand token states [.., N, H] to T frames; returns (frames, AlignmentGrid).

    frames[t] = sum_i w_t^i * hidden[i] with w_t^i a Gaussian in (t - c_i)
    normalized over all real tokens; frame positions are t = 1..T.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    squeezed = hidden.dim() == 2
    h = hidden.unsqueeze(0) if squeezed else hidden
    c, _ = _as_batch(centers)
    t = torch.arange(1, T + 1, dtype=h.dtype, device=h.device)
    logits = -((t[None, :, None] - c[:, None, :]) ** 2) / sigma2  # [B, T, N]
    if mask is not None:
        m, _ = _as_batch(mask)
        logits = logits.masked_fill(~m[:, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    frames = torch.matmul(weights, h)
    if squeezed:
        return frames.squeeze(0), AlignmentGrid(weights.squeeze(0), sigma2)
    return frames, AlignmentGrid(weights, sigma2)


def sample_segment(T: int, gamma: int, rng: np.random.Generator) -> SegmentSpec:
    """Uniform random gamma-frame crop; offset 0 when T <= gamma (pad later)."""
    if T <= gamma:
        return SegmentSpec(gamma=gamma, offset=0)
    return SegmentSpec(gamma=gamma, offset=int(rng.integers(0, T - gamma + 1)))


def slice_frames(frames: torch.Tensor, spec: SegmentSpec) -> torch.Tensor:
    """Crop [T, H] frames to [gamma, H], zero-padding when T < gamma."""
    seg = frames[spec.offset : spec.offset + spec.gamma]
    if seg.size(0) < spec.gamma:
        pad = frames.new_zeros(spec.gamma - seg.size(0), frames.size(1))
        seg = torch.cat([seg, pad], dim=0)
    return seg


def segment_token_range(l_scaled: torch.Tensor, spec: SegmentSpec) -> tuple[int, int]:
    """Half-open token index range whose scaled spans overlap the segment."""
    ends = torch.cumsum(l_scaled, dim=0)
    starts = ends - l_scaled
    lo_t, hi_t = float(spec.offset), float(spec.offset + spec.gamma)
    overlap = (starts < hi_t) & (ends > lo_t)
    idx = torch.nonzero(overlap).flatten()
    if idx.numel() == 0:
        return 0, 0
    return int(idx[0].item()), int(idx[-1].item()) + 1


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteLossError(f"non-finite {name} in reward computation")


def compute_reward(mel_loss_keep, mel_loss_shift, mode: str, n_tokens: int) -> RewardVector:
    """One-hot keep/shift rewards per token.

    segment_wise compares two scalar losses and awards every token the same
    outcome; phoneme_wise average-pools two per-frame loss vectors down to
    n_tokens and compares per token. Ties go to keep.
    """
    if mode not in REWARD_MODES:
        raise ValueError(f"unknown reward mode: {mode!r}")
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    keep = torch.as_tensor(mel_loss_keep).detach()
    shift = torch.as_tensor(mel_loss_shift).detach()
    _check_finite(keep, "keep loss")
    _check_finite(shift, "shift loss")

    if mode == SEGMENT_WISE:
        if keep.dim() != 0 or shift.dim() != 0:
            raise ValueError("segment_wise expects scalar losses")
        keep_wins = bool(keep <= shift)
        r_keep = torch.full((n_tokens,), float(keep_wins), dtype=keep.dtype)
    else:
        if keep.dim() != 1 or shift.dim() != 1 or keep.numel() != shift.numel():
            raise ValueError("phoneme_wise expects two equal-length per-frame loss vectors")
        pooled_keep = F.adaptive_avg_pool1d(keep.view(1, 1, -1), n_tokens).flatten()
        pooled_shift = F.adaptive_avg_pool1d(shift.view(1, 1, -1), n_tokens).flatten()
        r_keep = (pooled_keep <= pooled_shift).to(keep.dtype)
    return RewardVector(r_keep=r_keep, r_shift=1.0 - r_keep)


def reinforced_duration_loss(d_pred: torch.Tensor, d_shift: torch.Tensor,
                             reward: RewardVector) -> torch.Tensor:
    """Sum_j |d_pred[j] - (d_pred[j] * r_keep[j] + d_shift[j] * r_shift[j])|.

    The selected-action target is a constant: no gradient flows through
    d_shift or the rewards, so keep-rewarded tokens contribute zero loss and
    shift-rewarded tokens pull d_pred toward the shifted value.
    """
    if d_pred.shape != d_shift.shape:
        raise ValueError("d_pred and d_shift must have matching shapes")
    r_keep = reward.r_keep.to(d_pred.dtype)
    r_shift = reward.r_shift.to(d_pred.dtype)
    target = (d_pred * r_keep + d_shift * r_shift).detach()
    return (d_pred - target).abs().sum(dim=-1)


def total_duration_loss(d_pred: torch.Tensor, m_length,
                        mask: torch.Tensor | None = None) -> torch.Tensor:
    """(m_length - sum_j d_pred[j])^2 on unscaled predictions."""
    d = d_pred
    if mask is not None:
        d = d * mask.to(d.dtype)
    total = d.sum(dim=-1)
    target = torch.as_tensor(m_length, dtype=d.dtype, device=d.device)
    return (target - total) ** 2


def cumulative_round(d: torch.Tensor) -> torch.Tensor:
    """Error-diffusing rounding: integer lengths whose running sum tracks cumsum(d)."""
    cums = torch.cumsum(d, dim=-1)
    rounded = torch.floor(cums + 0.5)
    return torch.diff(rounded, dim=-1, prepend=rounded.new_zeros(*rounded.shape[:-1], 1))
