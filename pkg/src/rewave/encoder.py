"""Phoneme encoder: embedding plus a multi-receptive-field residual stack.

The stack mixes parallel residual branches with different kernel sizes and
dilation rates and never resamples, so the output keeps one hidden vector
per input token. Padding positions are re-zeroed after every convolution;
this makes batched outputs at real positions match an unbatched run exactly
(a convolution then sees zeros past the sequence end either way).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from .data import PAD_ID

LRELU_SLOPE = 0.1


@dataclass
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 256
    kernel_sizes: tuple[int, ...] = (3, 7, 11)
    dilations: tuple[tuple[int, ...], ...] = ((1, 3, 5), (1, 3, 5), (1, 3, 5))
    num_blocks: int = 3

    def __post_init__(self):
        if len(self.dilations) != len(self.kernel_sizes):
            raise ValueError("need one dilation schedule per kernel size")


@dataclass
class EncoderState:
    """Per-token hidden states [B, N, H] and the validity mask [B, N]."""

    hidden: torch.Tensor
    mask: torch.Tensor

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum(dim=1)


def _masked(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    return x if mask is None else x * mask


class ResBlock(nn.Module):
    """Dilated residual block: two convs per dilation, residual sum."""

    def __init__(self, channels: int, kernel_size: int, dilations: tuple[int, ...]):
        super().__init__()
        self.convs1 = nn.ModuleList(
            weight_norm(
                nn.Conv1d(
                    channels, channels, kernel_size,
                    dilation=d, padding=(kernel_size - 1) * d // 2,
                )
            )
            for d in dilations
        )
        self.convs2 = nn.ModuleList(
            weight_norm(
                nn.Conv1d(channels, channels, kernel_size, padding=(kernel_size - 1) // 2)
            )
            for _ in dilations
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = _masked(c1(F.leaky_relu(x, LRELU_SLOPE)), mask)
            xt = _masked(c2(F.leaky_relu(xt, LRELU_SLOPE)), mask)
            x = x + xt
        return x


class MRFBlock(nn.Module):
    """Parallel residual branches with distinct receptive fields, averaged."""

    def __init__(self, channels: int, kernel_sizes, dilations):
        super().__init__()
        self.branches = nn.ModuleList(
            ResBlock(channels, k, d) for k, d in zip(kernel_sizes, dilations)
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        out = None
        for branch in self.branches:
            y = branch(x, mask)
            out = y if out is None else out + y
        return out / len(self.branches)


class Encoder(nn.Module):
    """Token ids -> per-token hidden states, length preserved."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.hidden_dim, padding_idx=PAD_ID)
        self.conv_pre = weight_norm(nn.Conv1d(cfg.hidden_dim, cfg.hidden_dim, 7, padding=3))
        self.blocks = nn.ModuleList(
            MRFBlock(cfg.hidden_dim, cfg.kernel_sizes, cfg.dilations)
            for _ in range(cfg.num_blocks)
        )

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> EncoderState:
        """tokens: [B, N] int64 (or [N], auto-batched). mask defaults to tokens != PAD."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ValueError(
                f"token id out of range [0, {self.cfg.vocab_size}): "
                f"min={int(tokens.min())}, max={int(tokens.max())}"
            )
        if mask is None:
            mask = tokens != PAD_ID
        elif mask.dim() == 1:
            mask = mask.unsqueeze(0)

        chan_mask = mask.unsqueeze(1).to(self.embedding.weight.dtype)  # [B, 1, N]
        x = self.embedding(tokens).transpose(1, 2)  # [B, H, N]
        x = _masked(self.conv_pre(x), chan_mask)
        for block in self.blocks:
            x = block(x, chan_mask)
        hidden = (x * chan_mask).transpose(1, 2)
        if squeeze:
            return EncoderState(hidden=hidden.squeeze(0), mask=mask.squeeze(0))
        return EncoderState(hidden=hidden, mask=mask)
