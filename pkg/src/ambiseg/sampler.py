"""Reverse-chain sampling of segmentation masks.

Each requested mask runs its own reverse diffusion chain from pure noise,
conditioned on the input image via channel concatenation.  One step:

    x_{t-1} = posterior_mean(x0_hat, x_t, t) + sigma_t * z

where ``x0_hat`` is the clipped reconstruction from the predicted noise
(algebraically identical to stepping directly off the noise prediction,
but bounded, which keeps half-trained models stable), ``sigma_t`` comes
from the learned-range variance logits, and ``z`` is fresh Gaussian noise
for t > 1 and zero at the final step.

Every chain owns a private RNG stream derived from (seed, chain index),
so results do not depend on how chains are batched, and a fixed seed
reproduces the exact MaskSet.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Tuple

import numpy as np
import torch

from .denoiser import Denoiser, denoise_forward, interpolate_variance
from .metrics import MaskSet
from .schedule import NoiseSchedule, posterior_params, predict_x0_from_eps
from .seeding import torch_generator

__all__ = [
    "SampleRequest",
    "SamplingDivergedError",
    "sample_masks",
    "sample_trajectory",
]

DEFAULT_TRAJECTORY_CAP_BYTES = 256 * 1024 * 1024


class SamplingDivergedError(RuntimeError):
    """Chain state went non-finite; message carries the failing timestep."""


@dataclass(frozen=True)
class SampleRequest:
    """n reverse chains for one conditioning image."""

    b: object  # (C, H, W) image in [-1, 1]; numpy array or torch tensor
    n: int = 4
    seed: int = 0
    binarize_threshold: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not -1.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie strictly inside (-1, 1)")


def _prep(net: Denoiser, req: SampleRequest):
    dtype = next(net.parameters()).dtype
    b = torch.as_tensor(np.asarray(req.b), dtype=dtype)
    if b.ndim == 2:
        b = b[None]
    if b.ndim != 3:
        raise ValueError(f"b must be (C, H, W) or (H, W), got shape {tuple(b.shape)}")
    batch = b[None].expand(req.n, *b.shape)
    gens = [torch_generator(req.seed, f"chain:{i}") for i in range(req.n)]
    shape = (1, b.shape[1], b.shape[2])
    x = torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])
    return batch, gens, x


def _chain_noise(gens, shape, dtype, zero_noise: bool) -> torch.Tensor:
    """One z per chain.  Draws are consumed even when zeroed so the
    zero-noise diagnostic sees the same stream layout."""
    z = torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in gens])
    return torch.zeros_like(z) if zero_noise else z


def _reverse_step(net, s, batch_b, x, t, z):
    out = denoise_forward(net, batch_b, x, t)
    x0_hat = predict_x0_from_eps(x, t, out.eps_hat, s, clip=True)
    mean = posterior_params(x0_hat, x, t, s).mean
    sigma = torch.exp(0.5 * interpolate_variance(out.v, t, s))
    x_next = mean + sigma * z
    if not bool(torch.isfinite(x_next).all()):
        raise SamplingDivergedError(f"non-finite chain state at timestep t={t}")
    return x_next


@torch.no_grad()
def sample_masks(net: Denoiser, s: NoiseSchedule, req: SampleRequest,
                 zero_noise: bool = False) -> MaskSet:
    """Draw req.n binary masks; deterministic given req.seed.

    With ``zero_noise=True`` every per-step z is forced to 0 and the
    chain becomes a deterministic map of its starting noise (diagnostic
    for isolating stochasticity sources).
    """
    batch_b, gens, x = _prep(net, req)
    shape = x.shape[1:]
    for t in range(s.T, 0, -1):
        z = (
            _chain_noise(gens, shape, x.dtype, zero_noise)
            if t > 1
            else torch.zeros_like(x)
        )
        x = _reverse_step(net, s, batch_b, x, t, z)
    masks = (x[:, 0] > req.binarize_threshold).cpu().numpy()
    return MaskSet(masks)


@torch.no_grad()
def sample_trajectory(
    net: Denoiser,
    s: NoiseSchedule,
    req: SampleRequest,
    every_k: int = 1,
    zero_noise: bool = False,
    memory_cap_bytes: int = DEFAULT_TRAJECTORY_CAP_BYTES,
) -> Tuple[np.ndarray, np.ndarray]:
    """Run the same chains as :func:`sample_masks`, keeping snapshots.

    Retains the state x_t for t = T, T-k, T-2k, ... (while t >= 1) plus
    the final x_0, so the trajectory has ceil(T/k) + 1 entries.  Returns
    (ts, states) with ts (n_kept,) int and states (n_kept, n, H, W)
    float.  With every_k = T only the initial noise and the final
    pre-threshold state are kept, the latter bitwise equal to what
    sample_masks would threshold.
    """
    if every_k < 1:
        raise ValueError("every_k must be >= 1")
    batch_b, gens, x = _prep(net, req)
    n_kept = ceil(s.T / every_k) + 1
    nbytes = n_kept * req.n * int(np.prod(x.shape[2:])) * x.element_size()
    if nbytes > memory_cap_bytes:
        raise ValueError(
            f"trajectory would hold {nbytes} bytes (> cap {memory_cap_bytes}); "
            "raise every_k or the cap"
        )
    keep = {s.T - i * every_k for i in range(n_kept) if s.T - i * every_k >= 1}
    ts, states = [], []
    shape = x.shape[1:]
    for t in range(s.T, 0, -1):
        if t in keep:
            ts.append(t)
            states.append(x[:, 0].cpu().numpy().copy())
        z = (
            _chain_noise(gens, shape, x.dtype, zero_noise)
            if t > 1
            else torch.zeros_like(x)
        )
        x = _reverse_step(net, s, batch_b, x, t, z)
    ts.append(0)
    states.append(x[:, 0].cpu().numpy().copy())
    return np.asarray(ts, dtype=np.int64), np.stack(states)
