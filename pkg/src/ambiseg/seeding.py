"""Deterministic seeding helpers.

All randomness in the package flows from integer seeds through
``numpy.random.SeedSequence``.  Named substreams are derived by hashing a
string label, so adding or reordering consumers never shifts anyone
else's stream, and parameter initialization is independent of module
registration order.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

__all__ = ["substream", "torch_generator", "init_module_params", "zero_module_"]


def _label_entropy(seed: int, label: str) -> list:
    return [int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))]


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent numpy Generator for (seed, label)."""
    return np.random.default_rng(np.random.SeedSequence(_label_entropy(seed, label)))


def torch_generator(seed: int, label: str, device: str = "cpu") -> torch.Generator:
    """Independent torch Generator for (seed, label)."""
    g = torch.Generator(device=device)
    # fold the SeedSequence to one 63-bit value torch accepts
    state = np.random.SeedSequence(_label_entropy(seed, label)).generate_state(2)
    g.manual_seed(int((int(state[0]) << 31) ^ int(state[1])) & 0x7FFFFFFFFFFFFFFF)
    return g


def init_module_params(module: torch.nn.Module, seed: int, prefix: str) -> None:
    """He-normal weights, zero biases, unit norm scales — reproducibly.

    Each parameter gets its own stream keyed by ``prefix + name``, so the
    draw is a pure function of (seed, qualified name, shape) and does not
    depend on construction order or on other parameters existing.
    1-D parameters are biases (→ 0) except normalization scales (→ 1).
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                rng = substream(seed, prefix + "." + name)
                fan_in = int(np.prod(p.shape[1:]))
                vals = rng.standard_normal(tuple(p.shape)) * np.sqrt(2.0 / fan_in)
                p.copy_(torch.from_numpy(vals).to(p.dtype))
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.fill_(1.0)


def zero_module_(module: torch.nn.Module) -> torch.nn.Module:
    """Zero every parameter (used for output heads so nets start neutral)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
