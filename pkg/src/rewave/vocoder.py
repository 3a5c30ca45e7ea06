"""Frame-to-waveform decoder and the two adversaries.

The decoder upsamples hidden frames by a total factor of 256 through four
transposed-convolution stages, each followed by a multi-receptive-field
residual stack, ending in a tanh. The multi-scale discriminator views raw
audio at x1, /2, and /4 (mean-pooled) resolutions; the multi-period
discriminator reshapes audio into period-column 2-D maps for periods
{2, 3, 5, 7, 11}. Adversarial training uses least-squares objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm, weight_norm

from .encoder import MRFBlock

LRELU_SLOPE = 0.1


@dataclass
class DecoderConfig:
    input_dim: int = 256
    upsample_rates: tuple[int, ...] = (8, 8, 2, 2)
    upsample_kernels: tuple[int, ...] = (16, 16, 4, 4)
    base_channels: int = 512
    resblock_kernels: tuple[int, ...] = (3, 7, 11)
    resblock_dilations: tuple[tuple[int, ...], ...] = ((1, 3, 5), (1, 3, 5), (1, 3, 5))

    def __post_init__(self):
        if len(self.upsample_rates) != len(self.upsample_kernels):
            raise ValueError("need one kernel per upsample rate")
        for k, u in zip(self.upsample_kernels, self.upsample_rates):
            if (k - u) % 2 != 0:
                raise ValueError(f"kernel {k} and rate {u} must differ by an even amount")

    @property
    def total_upsample(self) -> int:
        return prod(self.upsample_rates)

    @classmethod
    def small(cls, **overrides) -> "DecoderConfig":
        """Desk-scale preset: same layout, quarter the channels."""
        return cls(base_channels=128, **overrides)


class Decoder(nn.Module):
    """Hidden frames [B, T, input_dim] -> waveform [B, T * 256] in (-1, 1)."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.conv_pre = weight_norm(nn.Conv1d(cfg.input_dim, cfg.base_channels, 7, padding=3))
        self.ups = nn.ModuleList()
        self.mrfs = nn.ModuleList()
        ch = cfg.base_channels
        for k, u in zip(cfg.upsample_kernels, cfg.upsample_rates):
            self.ups.append(
                weight_norm(nn.ConvTranspose1d(ch, ch // 2, k, stride=u, padding=(k - u) // 2))
            )
            ch //= 2
            self.mrfs.append(MRFBlock(ch, cfg.resblock_kernels, cfg.resblock_dilations))
        self.conv_post = weight_norm(nn.Conv1d(ch, 1, 7, padding=3))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        squeeze = frames.dim() == 2
        if squeeze:
            frames = frames.unsqueeze(0)
        x = self.conv_pre(frames.transpose(1, 2))
        for up, mrf in zip(self.ups, self.mrfs):
            x = up(F.leaky_relu(x, LRELU_SLOPE))
            x = mrf(x)
        audio = torch.tanh(self.conv_post(F.leaky_relu(x, LRELU_SLOPE))).squeeze(1)
        return audio.squeeze(0) if squeeze else audio


class ScaleDiscriminator(nn.Module):
    """1-D conv stack over raw audio at one resolution."""

    def __init__(self, channels: int = 128, use_spectral_norm: bool = False):
        super().__init__()
        norm = spectral_norm if use_spectral_norm else weight_norm
        c = channels
        cap = 1024
        self.convs = nn.ModuleList([
            norm(nn.Conv1d(1, c, 15, 1, padding=7)),
            norm(nn.Conv1d(c, c, 41, 2, groups=4, padding=20)),
            norm(nn.Conv1d(c, min(2 * c, cap), 41, 2, groups=16, padding=20)),
            norm(nn.Conv1d(min(2 * c, cap), min(4 * c, cap), 41, 4, groups=16, padding=20)),
            norm(nn.Conv1d(min(4 * c, cap), min(8 * c, cap), 41, 4, groups=16, padding=20)),
            norm(nn.Conv1d(min(8 * c, cap), min(8 * c, cap), 41, 1, groups=16, padding=20)),
            norm(nn.Conv1d(min(8 * c, cap), min(8 * c, cap), 5, 1, padding=2)),
        ])
        self.conv_post = norm(nn.Conv1d(min(8 * c, cap), 1, 3, 1, padding=1))

    def forward(self, x: torch.Tensor):
        fmaps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmaps.append(x)
        logits = self.conv_post(x)
        return logits.flatten(1), fmaps


class PeriodDiscriminator(nn.Module):
    """2-D conv stack over audio reshaped into period-width columns."""

    def __init__(self, period: int, channels: int = 32):
        super().__init__()
        self.period = period
        c = channels
        cap = 1024
        chs = [min(c, cap), min(4 * c, cap), min(16 * c, cap), min(32 * c, cap)]
        self.convs = nn.ModuleList()
        in_ch = 1
        for out_ch in chs:
            self.convs.append(
                weight_norm(nn.Conv2d(in_ch, out_ch, (5, 1), (3, 1), padding=(2, 0)))
            )
            in_ch = out_ch
        self.convs.append(weight_norm(nn.Conv2d(in_ch, in_ch, (5, 1), 1, padding=(2, 0))))
        self.conv_post = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), 1, padding=(1, 0)))

    def forward(self, x: torch.Tensor):
        b, _, t = x.shape
        if t % self.period:
            pad = self.period - t % self.period
            x = F.pad(x, (0, pad), mode="reflect")
            t = t + pad
        x = x.view(b, 1, t // self.period, self.period)
        fmaps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            fmaps.append(x)
        logits = self.conv_post(x)
        return logits.flatten(1), fmaps


@dataclass
class DiscriminatorConfig:
    scales: int = 3
    periods: tuple[int, ...] = (2, 3, 5, 7, 11)
    scale_channels: int = 128
    period_channels: int = 32

    def __post_init__(self):
        if self.scale_channels % 16 or self.scale_channels < 16:
            raise ValueError("scale_channels must be a positive multiple of 16 (grouped convs)")

    @classmethod
    def small(cls, **overrides) -> "DiscriminatorConfig":
        return cls(scale_channels=16, period_channels=4, **overrides)


class DiscriminatorSet(nn.Module):
    """Multi-scale plus multi-period sub-discriminators.

    The first scale branch uses spectral norm, the rest weight norm; the /2
    and /4 branches see the input mean-pooled with kernel 2, stride 2 (so the
    /2 branch input is exactly the stride-2 mean-pool of the audio).
    """

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.cfg = cfg
        self.msd = nn.ModuleList(
            ScaleDiscriminator(cfg.scale_channels, use_spectral_norm=(i == 0))
            for i in range(cfg.scales)
        )
        self.mpd = nn.ModuleList(
            PeriodDiscriminator(p, cfg.period_channels) for p in cfg.periods
        )
        self.pool = nn.AvgPool1d(kernel_size=2, stride=2)

    def forward(self, audio: torch.Tensor):
        """audio: [B, L] or [L]. Returns a list of (logits, feature maps)."""
        if audio.dim() == 1:
            audio = audio.unsqueeze(0)
        x = audio.unsqueeze(1)
        outputs = []
        scaled = x
        for i, disc in enumerate(self.msd):
            if i > 0:
                scaled = self.pool(scaled)
            outputs.append(disc(scaled))
        for disc in self.mpd:
            outputs.append(disc(x))
        return outputs


def lsgan_losses(real_logits: list[torch.Tensor], fake_logits: list[torch.Tensor]):
    """Least-squares GAN losses summed over sub-discriminators.

    d_loss = sum_k mean((D_k(x) - 1)^2) + mean(D_k(G)^2)
    g_loss = sum_k mean((D_k(G) - 1)^2)
    """
    if len(real_logits) != len(fake_logits):
        raise ValueError("need matching sub-discriminator outputs")
    d_loss = sum(((r - 1.0) ** 2).mean() + (f**2).mean() for r, f in zip(real_logits, fake_logits))
    g_loss = sum(((f - 1.0) ** 2).mean() for f in fake_logits)
    return d_loss, g_loss


def feature_matching_loss(real_outputs, fake_outputs) -> torch.Tensor:
    """Mean absolute difference of intermediate features, off by default in training."""
    loss = 0.0
    for (_, real_fmaps), (_, fake_fmaps) in zip(real_outputs, fake_outputs):
        for r, f in zip(real_fmaps, fake_fmaps):
            loss = loss + (r.detach() - f).abs().mean()
    return loss
