"""Latent ambiguity encoders and their Gaussian divergence.

Two small convolutional encoders map an image plus a mask to a latent
Gaussian over segmentation ambiguity:

* AMN (ambiguity modeling network) encodes (image, ground-truth mask)
  into the target distribution Q;
* ACN (ambiguity controlling network) encodes (image, reconstructed
  predicted mask, timestep) into the model distribution P, with the
  timestep entering as an extra constant input channel of value t/T.

KL(Q || P) is the training regularizer.  Neither latent is ever injected
into the denoiser: the ambiguity pair acts purely as a training-time
distribution-matching term whose gradient reaches the denoiser through
ACN's input (the denoiser's own mask reconstruction).  Latents can still
be drawn via :func:`reparam_sample` for diagnostics.

Latents are either axis-aligned (diagonal sigma vector) or full
covariance via a lower-triangular Cholesky factor L with Sigma = L Lᵀ.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .seeding import init_module_params

__all__ = [
    "LatentGaussian",
    "AmbiguityNetConfig",
    "AmbiguityNet",
    "NonFiniteActivationError",
    "make_amn",
    "make_acn",
    "amn_forward",
    "acn_forward",
    "kl_divergence",
    "reparam_sample",
    "build_covariance",
]

SIGMA_FLOOR = 1e-5  # added after softplus so scales stay strictly positive


class NonFiniteActivationError(RuntimeError):
    """An encoder emitted NaN/inf — training has diverged."""


@dataclass(frozen=True)
class LatentGaussian:
    """Gaussian over R^N: `scale` is sigma (..., N) in diagonal form or a
    lower-triangular Cholesky factor (..., N, N) in full form."""

    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        _validate_gaussian(self, "LatentGaussian")

    @property
    def is_full(self) -> bool:
        return self.scale.ndim == self.mean.ndim + 1

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])


def _validate_gaussian(g: LatentGaussian, name: str) -> None:
    if g.is_full:
        L = g.scale
        if L.shape[-1] != L.shape[-2] or L.shape[-1] != g.dim:
            raise ValueError(f"{name}: Cholesky factor shape {tuple(L.shape)} "
                             f"does not match mean dim {g.dim}")
        if not bool((L.triu(1) == 0).all()):
            raise ValueError(f"{name}: Cholesky factor must be lower-triangular")
        diag = L.diagonal(dim1=-2, dim2=-1)
    else:
        if g.scale.shape != g.mean.shape:
            raise ValueError(f"{name}: sigma shape {tuple(g.scale.shape)} "
                             f"does not match mean {tuple(g.mean.shape)}")
        diag = g.scale
    if not bool((diag > 0).all()):
        raise ValueError(f"{name}: covariance is not positive definite "
                         "(nonpositive scale entries)")


@dataclass(frozen=True)
class AmbiguityNetConfig:
    """Encoder sizing.  `filters` is fixed to the reference ladder unless
    explicitly overridden (small inputs may need a shorter one)."""

    filters: Tuple[int, ...] = (32, 64, 128, 192)
    latent_dim: int = 6
    covariance_mode: str = "axis-aligned"
    # In full mode: emit the same diagonal parameterization as
    # axis-aligned, keeping every off-diagonal Cholesky entry pinned at
    # zero.  A zero-off-diagonal L *is* a diagonal sigma, so this arm is
    # arithmetically identical to axis-aligned (used as a degeneracy
    # check on the full-covariance machinery).
    freeze_off_diagonal: bool = False

    def __post_init__(self):
        if len(self.filters) < 1 or any(f < 1 for f in self.filters):
            raise ValueError("filters must be a nonempty positive sequence")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.covariance_mode not in ("axis-aligned", "full"):
            raise ValueError(
                f"covariance_mode must be 'axis-aligned' or 'full', "
                f"got {self.covariance_mode!r}"
            )
        if self.freeze_off_diagonal and self.covariance_mode != "full":
            raise ValueError(
                "freeze_off_diagonal only applies to covariance_mode='full'"
            )
        object.__setattr__(self, "filters", tuple(self.filters))

    @property
    def head_dim(self) -> int:
        n = self.latent_dim
        if self.covariance_mode == "full" and not self.freeze_off_diagonal:
            return n + n * (n + 1) // 2  # mean + full lower triangle
        return 2 * n  # mean + diagonal sigma


class AmbiguityNet(nn.Module):
    """Four 3x3-conv stages (ReLU, 2x2 average pool), global average
    pooling, and a 1x1-conv head emitting the latent parameters.

    Pooling is skipped once the spatial extent drops below 2 so short
    inputs (tests) still pass through all stages.
    """

    def __init__(self, cfg: AmbiguityNetConfig, in_channels: int,
                 seed: int = 0, prefix: str = "amn"):
        super().__init__()
        self.cfg = cfg
        convs = []
        prev = in_channels
        for f in cfg.filters:
            convs.append(nn.Conv2d(prev, f, 3, padding=1))
            prev = f
        self.convs = nn.ModuleList(convs)
        # The head keeps its seeded init on purpose: zeroing it would make
        # Q and P the same constant Gaussian, parking the KL at an exact
        # stationary point that training escapes only by float roundoff
        # (or never).  The two encoders draw from distinct substreams, so
        # the regularizer is live from step one.
        self.head = nn.Conv2d(prev, cfg.head_dim, 1)
        init_module_params(self, seed, prefix)

    def forward(self, x: torch.Tensor) -> LatentGaussian:
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            if h.shape[-1] >= 2 and h.shape[-2] >= 2:
                h = F.avg_pool2d(h, 2)
        h = h.mean(dim=(2, 3), keepdim=True)
        raw = self.head(h).flatten(1)  # (B, head_dim)
        if not bool(torch.isfinite(raw).all()):
            raise NonFiniteActivationError(
                "ambiguity encoder produced non-finite latent parameters"
            )
        n = self.cfg.latent_dim
        mean = raw[:, :n]
        if self.cfg.covariance_mode == "full" and not self.cfg.freeze_off_diagonal:
            diag = F.softplus(raw[:, n:2 * n]) + SIGMA_FLOOR
            off = raw[:, 2 * n:]
            L = torch.diag_embed(diag)
            idx = torch.tril_indices(n, n, offset=-1, device=raw.device)
            if idx.shape[1]:
                L = L.clone()
                L[:, idx[0], idx[1]] = off
            return LatentGaussian(mean=mean, scale=L)
        sigma = F.softplus(raw[:, n:]) + SIGMA_FLOOR
        return LatentGaussian(mean=mean, scale=sigma)


def make_amn(cfg: AmbiguityNetConfig, prior_channels: int = 1,
             seed: int = 0) -> AmbiguityNet:
    """Ground-truth encoder: input channels = image + mask."""
    return AmbiguityNet(cfg, prior_channels + 1, seed=seed, prefix="amn")


def make_acn(cfg: AmbiguityNetConfig, prior_channels: int = 1,
             seed: int = 0) -> AmbiguityNet:
    """Prediction encoder: input channels = image + mask + timestep."""
    return AmbiguityNet(cfg, prior_channels + 2, seed=seed, prefix="acn")


def _check_aligned(b: torch.Tensor, m: torch.Tensor, name: str) -> None:
    if b.ndim != 4 or m.ndim != 4 or m.shape[1] != 1:
        raise ValueError(f"b and {name} must be (B, C, H, W) with one mask channel")
    if b.shape[0] != m.shape[0] or b.shape[2:] != m.shape[2:]:
        raise ValueError(
            f"b {tuple(b.shape)} and {name} {tuple(m.shape)} are not aligned"
        )


def amn_forward(net: AmbiguityNet, b: torch.Tensor,
                x_b: torch.Tensor) -> LatentGaussian:
    """Q = AMN(image, ground-truth mask in [-1, 1])."""
    _check_aligned(b, x_b, "x_b")
    return net(torch.cat([b, x_b], dim=1))


def acn_forward(net: AmbiguityNet, b: torch.Tensor, x_b_hat: torch.Tensor,
                t, T: int) -> LatentGaussian:
    """P = ACN(image, reconstructed mask, t) with t/T as a constant channel.

    `x_b_hat` is the clipped x0 reconstruction from the denoiser's noise
    prediction — the only path through which the regularizer's gradient
    reaches the denoiser.
    """
    _check_aligned(b, x_b_hat, "x_b_hat")
    if not torch.is_tensor(t):
        t = torch.full((b.shape[0],), int(t), device=b.device)
    tchan = (t.to(b.dtype) / float(T)).view(-1, 1, 1, 1).expand(
        b.shape[0], 1, b.shape[2], b.shape[3]
    )
    return net(torch.cat([b, x_b_hat, tchan], dim=1))


def kl_divergence(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """Closed-form KL(Q || P); result shaped like the batch dimensions.

    Both latents must share dimension and covariance form.  Diagonal form
    sums per-dimension terms; full form uses triangular solves against
    P's Cholesky factor and log-determinants off the factor diagonals.
    """
    if q.dim != p.dim:
        raise ValueError(f"latent dims differ: {q.dim} vs {p.dim}")
    if q.is_full != p.is_full:
        raise ValueError("cannot mix diagonal and full-covariance latents")
    _validate_gaussian(q, "q")
    _validate_gaussian(p, "p")
    if not q.is_full:
        sq, sp = q.scale, p.scale
        term = torch.log(sp / sq) + (sq ** 2 + (q.mean - p.mean) ** 2) / (2 * sp ** 2)
        return (term - 0.5).sum(dim=-1)
    Lq, Lp = q.scale, p.scale
    n = q.dim
    M = torch.linalg.solve_triangular(Lp, Lq, upper=False)
    trace = (M ** 2).sum(dim=(-2, -1))
    y = torch.linalg.solve_triangular(
        Lp, (q.mean - p.mean).unsqueeze(-1), upper=False
    ).squeeze(-1)
    maha = (y ** 2).sum(dim=-1)
    logdet_q = torch.log(Lq.diagonal(dim1=-2, dim2=-1)).sum(dim=-1)
    logdet_p = torch.log(Lp.diagonal(dim1=-2, dim2=-1)).sum(dim=-1)
    return 0.5 * (trace + maha - n) + logdet_p - logdet_q


def reparam_sample(g: LatentGaussian, eps: torch.Tensor) -> torch.Tensor:
    """z = mean + scale * eps, differentiable in the Gaussian parameters."""
    if eps.shape != g.mean.shape:
        raise ValueError(
            f"eps shape {tuple(eps.shape)} must match mean {tuple(g.mean.shape)}"
        )
    if g.is_full:
        return g.mean + (g.scale @ eps.unsqueeze(-1)).squeeze(-1)
    return g.mean + g.scale * eps


def build_covariance(L: torch.Tensor) -> torch.Tensor:
    """Sigma = L Lᵀ from a lower-triangular positive-diagonal factor."""
    if L.shape[-1] != L.shape[-2]:
        raise ValueError(f"Cholesky factor must be square, got {tuple(L.shape)}")
    if not bool((L.triu(1) == 0).all()):
        raise ValueError("Cholesky factor must be lower-triangular")
    if not bool((L.diagonal(dim1=-2, dim2=-1) > 0).all()):
        raise ValueError("Cholesky diagonal must be strictly positive")
    return L @ L.transpose(-2, -1)
