"""Conditional noise-prediction network.

The denoiser sees the channel concatenation of the conditioning image
``b`` and the noisy mask ``x_bt`` plus a sinusoidal timestep embedding,
and predicts two per-pixel quantities:

* ``eps_hat`` -- the injected Gaussian noise (epsilon-prediction target);
* ``v``       -- logits interpolating the reverse-step log-variance
                 between its analytic lower and upper bounds
                 (:func:`interpolate_variance`).

Architecture: a small U-shaped encoder-decoder with residual blocks,
skip connections, and the time embedding added per block.  No attention;
sizing is meant for desk-scale experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .schedule import NoiseSchedule, _match_coef
from .seeding import init_module_params, zero_module_

__all__ = [
    "DenoiserConfig",
    "DenoiserOutput",
    "Denoiser",
    "denoise_forward",
    "interpolate_variance",
]


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4)
    prior_channels: int = 1
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.base_channels < 1 or self.time_embed_dim < 2:
            raise ValueError("base_channels must be >= 1 and time_embed_dim >= 2")
        if len(self.channel_multipliers) < 1:
            raise ValueError("need at least one channel multiplier")
        down = 2 ** (len(self.channel_multipliers) - 1)
        if self.image_size % down != 0:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by {down} "
                f"for {len(self.channel_multipliers)} resolution levels"
            )
        # tuple-ify in case a list sneaks through config parsing
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor  # (B, 1, H, W)
    v: torch.Tensor        # (B, 1, H, W) variance-interpolation logits


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / max(half - 1, 1)
    )
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(1, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """U-shaped eps/v predictor; see module docstring."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        emb_dim = cfg.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv2d(cfg.prior_channels + 1, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        prev = chans[0]
        for ch in chans:
            self.down_blocks.append(ResBlock(prev, ch, emb_dim))
            prev = ch
        self.middle = ResBlock(prev, prev, emb_dim)
        self.up_blocks = nn.ModuleList()
        for ch in reversed(chans):
            # input = upsampled state + same-resolution skip
            self.up_blocks.append(ResBlock(prev + ch, ch, emb_dim))
            prev = ch
        self.head_norm = nn.GroupNorm(1, prev)
        self.head = nn.Conv2d(prev, 2, 3, padding=1)

        init_module_params(self, seed, "denoiser")
        zero_module_(self.head)  # start from eps_hat = 0, v = 0

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        div = 2 ** (len(self.cfg.channel_multipliers) - 1)
        if x.shape[-1] % div or x.shape[-2] % div:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by {div} "
                f"({len(self.cfg.channel_multipliers)} resolution levels)"
            )
        emb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.cfg.time_embed_dim))
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = F.avg_pool2d(h, 2)
        h = self.middle(h, emb)
        for i, block in enumerate(self.up_blocks):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.head(F.silu(self.head_norm(h)))


def denoise_forward(net: Denoiser, b: torch.Tensor, x_bt: torch.Tensor,
                    t) -> DenoiserOutput:
    """Run the denoiser on the channel concatenation b ⊕ x_bt at step t.

    `t` is a python int or a (B,) integer tensor of 1-indexed timesteps.
    """
    if b.ndim != 4 or x_bt.ndim != 4:
        raise ValueError("b and x_bt must be (B, C, H, W)")
    if b.shape[0] != x_bt.shape[0] or b.shape[2:] != x_bt.shape[2:]:
        raise ValueError(
            f"b {tuple(b.shape)} and x_bt {tuple(x_bt.shape)} are not aligned"
        )
    if x_bt.shape[1] != 1:
        raise ValueError("x_bt must have exactly one mask channel")
    if not torch.is_tensor(t):
        t = torch.full((b.shape[0],), int(t), dtype=torch.long, device=b.device)
    elif t.shape != (b.shape[0],):
        raise ValueError(
            f"t must be scalar or shape ({b.shape[0]},), got {tuple(t.shape)}"
        )
    out = net(torch.cat([b, x_bt], dim=1), t)
    return DenoiserOutput(eps_hat=out[:, 0:1], v=out[:, 1:2])


def interpolate_variance(v: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Per-pixel log-variance of the reverse step from logits v.

    log sigma^2 = w * log beta_t + (1 - w) * log var_post(t),  w = sigmoid(v)

    so v -> -inf gives the posterior variance (lower bound), v -> +inf
    gives beta_t (upper bound), and v = 0 their geometric mean.  The t=1
    posterior variance is clipped (see NoiseSchedule) before taking logs.
    """
    log_hi = _match_coef(np.log(s.beta(t)), v)
    log_lo = _match_coef(s.posterior_log_variance_clipped(t), v)
    w = torch.sigmoid(v)
    return w * log_hi + (1.0 - w) * log_lo
