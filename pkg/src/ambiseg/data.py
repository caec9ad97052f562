"""Synthetic multi-rater segmentation data with known ambiguity statistics.

Each sample is a low-contrast elliptical blob on a textured background,
annotated by M simulated raters.  Raters disagree in two controlled ways:

* with probability ``blank_prob`` a rater declares the image clean and
  produces an *empty* mask (an empty grading is a valid grading);
* otherwise the rater returns the true blob mask morphologically dilated
  or eroded by a rater-specific radius (boundary disagreement).

Because both effects are driven by explicit parameters, the dataset's
ambiguity statistics (blank fraction, pairwise mask dispersions) are known
by construction and can be enumerated exactly over a generated set, which
is what the end-to-end evaluation checks against.

On-disk layout (one directory per sample)::

    <root>/<id>/image.png     16-bit grayscale; multi-channel images are
                              stacked vertically as a (C*H, W) strip
    <root>/<id>/mask_r{k}.png 8-bit, 0 or 255, one per rater
    <root>/<id>/meta.json     generator parameters + layout fields

The layout is generic: preprocessed real multi-rater data in the same
shape drops in without code changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "SynthConfig",
    "AmbiguousSample",
    "generate_synthetic",
    "rater_view",
    "save_dataset",
    "load_dataset",
    "dataset_statistics",
]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs. Defaults are sized for tests; demos typically use
    image_size=64 and count in the hundreds."""

    image_size: int = 16
    num_raters: int = 4
    blank_prob: float = 0.5
    boundary_jitter: Tuple[int, int] = (0, 1)  # inclusive radius range, px
    noise_level: float = 0.1
    count: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.num_raters < 1:
            raise ValueError("num_raters must be >= 1")
        if not 0.0 <= self.blank_prob <= 1.0:
            raise ValueError("blank_prob must lie in [0, 1]")
        lo, hi = self.boundary_jitter
        if lo < 0 or hi < lo:
            raise ValueError("boundary_jitter must be (lo, hi) with 0 <= lo <= hi")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class AmbiguousSample:
    """One image in [-1, 1] (C, H, W) with M aligned binary rater masks."""

    image: np.ndarray
    rater_masks: List[np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.ndim != 3:
            raise ValueError(f"image must be (C, H, W) or (H, W), got {self.image.shape}")
        if len(self.rater_masks) < 1:
            raise ValueError("need at least one rater mask")
        hw = self.image.shape[1:]
        self.rater_masks = [np.asarray(m) != 0 for m in self.rater_masks]
        for k, m in enumerate(self.rater_masks):
            if m.shape != hw:
                raise ValueError(
                    f"rater mask {k} shape {m.shape} does not match image {hw}"
                )

    @property
    def num_raters(self) -> int:
        return len(self.rater_masks)


def _disk(radius: int) -> np.ndarray:
    if radius < 1:
        raise ValueError("disk radius must be >= 1")
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def _render_ellipse(size: int, rng: np.random.Generator) -> Tuple[np.ndarray, dict]:
    """Random ellipse mask that fits strictly inside the canvas.

    Off-canvas or tiny draws are resampled, never emitted.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(200):
        cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
        a = rng.uniform(0.12 * size, 0.28 * size)
        b = rng.uniform(0.12 * size, 0.28 * size)
        theta = rng.uniform(0.0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        # keep a 1-px clear border so dilation never runs off-canvas
        if mask.sum() >= 4 and not (
            mask[0, :].any() or mask[-1, :].any() or mask[:, 0].any() or mask[:, -1].any()
        ):
            params = {
                "center": [float(cy), float(cx)],
                "axes": [float(a), float(b)],
                "theta": float(theta),
            }
            return mask, params
    raise RuntimeError("failed to draw a valid blob after 200 attempts")


def _perturb(mask: np.ndarray, op: str, radius: int) -> np.ndarray:
    """Dilate/erode by `radius`; erosion backs off until nonempty."""
    if radius == 0:
        return mask.copy()
    if op == "dilate":
        return ndimage.binary_dilation(mask, structure=_disk(radius))
    for r in range(radius, 0, -1):
        out = ndimage.binary_erosion(mask, structure=_disk(r))
        if out.any():
            return out
    return mask.copy()


def _generate_one(cfg: SynthConfig, rng: np.random.Generator, index: int) -> AmbiguousSample:
    size = cfg.image_size
    blob, geom = _render_ellipse(size, rng)

    texture = rng.standard_normal((size, size))
    texture = ndimage.gaussian_filter(texture, sigma=1.5)
    std = texture.std()
    if std > 0:
        texture /= std
    contrast = rng.uniform(0.35, 0.65)
    soft = ndimage.gaussian_filter(blob.astype(np.float64), sigma=0.7)
    image = -0.4 + contrast * soft + cfg.noise_level * texture
    image = np.clip(image, -1.0, 1.0)[None].astype(np.float32)

    lo, hi = cfg.boundary_jitter
    raters = []
    rater_meta = []
    for _ in range(cfg.num_raters):
        # draw all per-rater randomness unconditionally to keep the
        # stream layout independent of the blank coin
        coin = rng.random()
        radius = int(rng.integers(lo, hi + 1))
        op = "dilate" if rng.random() < 0.5 else "erode"
        if coin < cfg.blank_prob:
            raters.append(np.zeros((size, size), dtype=np.uint8))
            rater_meta.append({"blank": True, "op": None, "radius": 0})
        else:
            raters.append(_perturb(blob, op, radius).astype(np.uint8))
            rater_meta.append({"blank": False, "op": op, "radius": radius})

    meta = {
        "index": index,
        "geometry": geom,
        "contrast": float(contrast),
        "raters": rater_meta,
        "config": {
            "image_size": cfg.image_size,
            "num_raters": cfg.num_raters,
            "blank_prob": cfg.blank_prob,
            "boundary_jitter": list(cfg.boundary_jitter),
            "noise_level": cfg.noise_level,
            "count": cfg.count,
            "seed": cfg.seed,
        },
    }
    return AmbiguousSample(image=image, rater_masks=raters, metadata=meta)


def generate_synthetic(cfg: SynthConfig) -> List[AmbiguousSample]:
    """Deterministic dataset: same config (incl. seed) → identical samples.

    Each sample consumes an independent child RNG stream, so generation
    order is immaterial and samples could be produced in parallel.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    return [
        _generate_one(cfg, np.random.default_rng(ss), i)
        for i, ss in enumerate(children)
    ]


def rater_view(
    sample: AmbiguousSample,
    mode: str,
    rng: Optional[np.random.Generator] = None,
) -> Union[Tuple[np.ndarray, np.ndarray], Iterator[Tuple[np.ndarray, np.ndarray]]]:
    """Turn a multi-rater sample into training pairs.

    * ``"averaged"``: pixelwise mean of the rater masks, thresholded
      strictly above 0.5.  Ties go to background: with 4 raters, a 2-2
      split (mean exactly 0.5) yields an empty pixel.
    * ``"random-rater"``: one uniformly drawn rater mask per call
      (``rng`` required for reproducibility; defaults to a fresh
      unseeded generator).
    * ``"all-raters"``: iterator over every (image, rater mask) pair.
    """
    if mode == "averaged":
        mean = np.mean([m.astype(np.float64) for m in sample.rater_masks], axis=0)
        return sample.image, (mean > 0.5).astype(np.uint8)
    if mode == "random-rater":
        if rng is None:
            rng = np.random.default_rng()
        k = int(rng.integers(0, sample.num_raters))
        return sample.image, sample.rater_masks[k].astype(np.uint8)
    if mode == "all-raters":
        return iter(
            (sample.image, m.astype(np.uint8)) for m in sample.rater_masks
        )
    raise ValueError(f"unknown rater_view mode {mode!r}")


# ---------------------------------------------------------------------------
# On-disk IO
# ---------------------------------------------------------------------------

def _image_to_u16(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float (C, H, W) → (C*H, W) uint16 strip."""
    c, h, w = image.shape
    strip = image.reshape(c * h, w)
    return np.round((strip.astype(np.float64) + 1.0) / 2.0 * 65535.0).astype(np.uint16)


def _u16_to_image(strip: np.ndarray, channels: int) -> np.ndarray:
    ch_h, w = strip.shape
    if ch_h % channels != 0:
        raise ValueError(
            f"image strip height {ch_h} is not divisible by channel count {channels}"
        )
    h = ch_h // channels
    flat = strip.astype(np.float64) / 65535.0 * 2.0 - 1.0
    return flat.reshape(channels, h, w).astype(np.float32)


def save_dataset(path, samples: Sequence[AmbiguousSample]) -> None:
    """Write samples under `path`, one zero-padded directory per sample."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        d = root / f"{i:05d}"
        d.mkdir(exist_ok=True)
        Image.fromarray(_image_to_u16(s.image)).save(d / "image.png")
        for k, m in enumerate(s.rater_masks):
            arr = (np.asarray(m) != 0).astype(np.uint8) * 255
            Image.fromarray(arr).save(d / f"mask_r{k}.png")
        meta = dict(s.metadata)
        meta["format_version"] = FORMAT_VERSION
        meta["channels"] = int(s.image.shape[0])
        meta["num_raters"] = s.num_raters
        with open(d / "meta.json", "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)


def _require(p: Path) -> Path:
    if not p.is_file():
        raise FileNotFoundError(f"dataset layout error: missing {p}")
    return p


def load_dataset(path) -> List[AmbiguousSample]:
    """Load a dataset written by :func:`save_dataset` (or hand-prepared
    in the same layout).  Errors name the specific offending file."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    sample_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not sample_dirs:
        raise FileNotFoundError(f"dataset root {root} contains no sample directories")
    samples = []
    for d in sample_dirs:
        with open(_require(d / "meta.json")) as f:
            try:
                meta = json.load(f)
            except json.JSONDecodeError as e:
                raise ValueError(f"invalid JSON in {d / 'meta.json'}: {e}") from e
        meta.setdefault("id", d.name)
        for key in ("channels", "num_raters"):
            if key not in meta:
                raise ValueError(f"dataset layout error: {d / 'meta.json'} lacks {key!r}")
        strip = np.asarray(Image.open(_require(d / "image.png")), dtype=np.uint16)
        image = _u16_to_image(strip, int(meta["channels"]))
        masks = []
        for k in range(int(meta["num_raters"])):
            m = np.asarray(Image.open(_require(d / f"mask_r{k}.png")))
            masks.append((m != 0).astype(np.uint8))
        samples.append(AmbiguousSample(image=image, rater_masks=masks, metadata=meta))
    return samples


# ---------------------------------------------------------------------------
# Reference statistics (enumerated, not sampled)
# ---------------------------------------------------------------------------

def dataset_statistics(samples: Sequence[AmbiguousSample]) -> dict:
    """Exact ambiguity statistics of a dataset by direct enumeration.

    Returns blank fraction over all rater masks, the mean pairwise IoU
    distance over distinct rater pairs within each sample, and the mean
    per-sample min/max pairwise dispersion (samples with <2 raters are
    skipped for the pairwise statistics).
    """
    from .metrics import _pairwise_iou_distance  # shared primitive

    total = 0
    blanks = 0
    pair_means, pair_mins, pair_maxes = [], [], []
    for s in samples:
        total += s.num_raters
        blanks += sum(1 for m in s.rater_masks if not np.any(m))
        if s.num_raters >= 2:
            flat = np.stack([np.asarray(m) != 0 for m in s.rater_masks]).reshape(
                s.num_raters, -1
            )
            D = _pairwise_iou_distance(flat, flat)
            iu = np.triu_indices(s.num_raters, k=1)
            pair_means.append(float(D[iu].mean()))
            pair_mins.append(float(D[iu].min()))
            pair_maxes.append(float(D[iu].max()))
    out = {
        "num_samples": len(samples),
        "num_masks": total,
        "blank_fraction": blanks / total if total else 0.0,
    }
    if pair_means:
        out["mean_pairwise_iou_distance"] = float(np.mean(pair_means))
        out["mean_min_dispersion"] = float(np.mean(pair_mins))
        out["mean_max_dispersion"] = float(np.mean(pair_maxes))
    return out
