"""Checkpoint archive IO.

A checkpoint is a single ``.npz``-compatible zip archive holding every
parameter as a little-endian ``.npy`` member, keyed by stable names:

* ``denoiser.<param>`` — always present
* ``amn.<param>`` / ``acn.<param>`` — only when the run trains the
  ambiguity pair
* ``__meta__`` — a UTF-8 JSON blob (stored as a uint8 array) with
  ``format_version``, the network configs, and any caller-supplied
  metadata (training config, step counter, ...)

Writing is byte-deterministic: members are sorted by name, stored
uncompressed, and stamped with a fixed timestamp, so identical runs make
identical files and files can be compared by hash.  ``numpy.load`` can
open the archives directly.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .ambiguity import AmbiguityNet, AmbiguityNetConfig, make_acn, make_amn
from .denoiser import Denoiser, DenoiserConfig

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "checkpoint_hash"]

FORMAT_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)  # zip's epoch; pinned for byte determinism


@dataclass
class Checkpoint:
    denoiser: Denoiser
    amn: Optional[AmbiguityNet]
    acn: Optional[AmbiguityNet]
    meta: dict

    @property
    def denoiser_config(self) -> DenoiserConfig:
        return self.denoiser.cfg


def _state_arrays(module: torch.nn.Module, prefix: str) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy()
        for k, v in module.state_dict().items()
    }


def _write_archive(path, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())


def save_checkpoint(
    path,
    denoiser: Denoiser,
    amn: Optional[AmbiguityNet] = None,
    acn: Optional[AmbiguityNet] = None,
    extra_meta: Optional[dict] = None,
) -> None:
    if (amn is None) != (acn is None):
        raise ValueError("amn and acn must be saved together or not at all")
    arrays = _state_arrays(denoiser, "denoiser")
    meta = {
        "format_version": FORMAT_VERSION,
        "denoiser_config": asdict(denoiser.cfg),
        "ambiguity_config": asdict(amn.cfg) if amn is not None else None,
        "extra": extra_meta or {},
    }
    if amn is not None:
        arrays.update(_state_arrays(amn, "amn"))
        arrays.update(_state_arrays(acn, "acn"))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays["__meta__"] = np.frombuffer(blob, dtype=np.uint8)
    _write_archive(path, arrays)


def _load_module(module: torch.nn.Module, arrays, prefix: str, path) -> None:
    sd = {}
    for key in arrays.files:
        if key.startswith(prefix + "."):
            sd[key[len(prefix) + 1:]] = torch.from_numpy(arrays[key].copy())
    try:
        module.load_state_dict(sd, strict=True)
    except RuntimeError as e:
        raise ValueError(
            f"checkpoint {path} does not match the {prefix} architecture "
            f"described by its own metadata: {e}"
        ) from e


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with np.load(path) as arrays:
        if "__meta__" not in arrays.files:
            raise ValueError(f"checkpoint {path} lacks the __meta__ member")
        meta = json.loads(bytes(arrays["__meta__"].tobytes()).decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(
                f"checkpoint {path} has format_version {version}, "
                f"expected {FORMAT_VERSION}"
            )
        den_cfg = DenoiserConfig(**meta["denoiser_config"])
        dtype = torch.from_numpy(arrays["denoiser.stem.weight"]).dtype
        denoiser = Denoiser(den_cfg, seed=0).to(dtype)
        _load_module(denoiser, arrays, "denoiser", path)
        amn = acn = None
        if meta.get("ambiguity_config") is not None:
            amb_cfg = AmbiguityNetConfig(**meta["ambiguity_config"])
            amn = make_amn(amb_cfg, den_cfg.prior_channels, seed=0).to(dtype)
            acn = make_acn(amb_cfg, den_cfg.prior_channels, seed=0).to(dtype)
            _load_module(amn, arrays, "amn", path)
            _load_module(acn, arrays, "acn", path)
    return Checkpoint(denoiser=denoiser, amn=amn, acn=acn, meta=meta)


def checkpoint_hash(path) -> str:
    """SHA-256 of the archive bytes (recorded in sampling manifests)."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
