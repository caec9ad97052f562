"""Training, ablation, and evaluation orchestration.

Three training arms share one loop and differ only in how the target
mask is chosen and whether the ambiguity regularizer is active:

* ``cimd``          -- per step, each example trains against one uniformly
                       drawn rater mask; the AMN encodes that same mask and
                       the ACN encodes the denoiser's current reconstruction,
                       their KL joining the loss.
* ``ddpm-prob-seg`` -- same random-rater targets, no ambiguity networks.
* ``ddpm-det-seg``  -- trains against the average of the rater masks
                       (thresholded strictly above 0.5), no ambiguity
                       networks.

In the ddpm-* arms the ambiguity weight is forced to zero and AMN/ACN are
never instantiated, so their checkpoints contain no ``amn.*``/``acn.*``
keys.

Masks enter diffusion in the symmetric encoding foreground=+1,
background=-1.  All stochastic draws come from named substreams of the
config seed, making every run bit-reproducible (single worker).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, get_args, get_origin, get_type_hints

import numpy as np
import torch

from .ambiguity import (
    AmbiguityNet,
    AmbiguityNetConfig,
    NonFiniteActivationError,
    acn_forward,
    amn_forward,
    make_acn,
    make_amn,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AmbiguousSample
from .denoiser import Denoiser, DenoiserConfig, denoise_forward
from .metrics import EvaluationSummary, MaskSet, evaluate_testset
from .objectives import LossParts, LossWeights, NonFiniteLossError, l_amb, l_simple, l_vlb_term, total_loss
from .sampler import SampleRequest, sample_masks
from .schedule import NoiseSchedule, make_linear_schedule, predict_x0_from_eps, q_sample
from .seeding import substream

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingAbortedError",
    "MODES",
    "train",
    "evaluate",
    "evaluate_with_sampler",
    "run_ablation",
    "blank_mask_fraction",
    "heldout_l_simple",
]

MODES = ("cimd", "ddpm-det-seg", "ddpm-prob-seg")
ABLATION_REPORT_VERSION = 1


class TrainingAbortedError(RuntimeError):
    """Training hit a non-finite loss; the last periodic checkpoint survives."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "cimd"
    T: int = 100
    beta_start: Optional[float] = None  # None -> standard endpoints scaled by 1000/T
    beta_end: Optional[float] = None
    lambda_vlb: float = 0.001
    beta_amb: float = 0.001
    learning_rate: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    covariance_mode: str = "axis-aligned"
    freeze_off_diagonal: bool = False
    latent_dim: int = 6
    eval_samples: int = 4
    checkpoint_every: int = 500
    base_channels: int = 32
    channel_multipliers: Tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    ambiguity_filters: Tuple[int, ...] = (32, 64, 128, 192)
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "cimd" and self.beta_amb != 0.0:
            # the ddpm-* arms have no ambiguity networks by definition
            object.__setattr__(self, "beta_amb", 0.0)
        if self.T < 1 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("T >= 1, steps >= 0, batch_size >= 1 required")
        if self.checkpoint_every < 1 or self.eval_samples < 1:
            raise ValueError("checkpoint_every and eval_samples must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "ambiguity_filters", tuple(self.ambiguity_filters))

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def weights(self) -> LossWeights:
        return LossWeights(lambda_vlb=self.lambda_vlb, beta_amb=self.beta_amb)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a flat key = value config file (``#`` starts a comment)."""
        raw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            raw[key] = val
        return cls(**coerce_config_values(cls, raw))


def coerce_config_values(cls, raw: dict) -> dict:
    """Coerce string config values to the dataclass field types."""
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    out = {}
    for key, val in raw.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        if not isinstance(val, str):
            out[key] = val
            continue
        out[key] = _coerce(hints[key], val.strip())
    return out


def _coerce(tp, text: str):
    origin = get_origin(tp)
    if origin is not None and type(None) in get_args(tp):  # Optional[...]
        if text.lower() in ("none", ""):
            return None
        return _coerce([a for a in get_args(tp) if a is not type(None)][0], text)
    if origin is tuple:
        inner = get_args(tp)[0]
        return tuple(_coerce(inner, part) for part in text.split(",") if part.strip())
    if tp is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


@dataclass
class TrainResult:
    denoiser: Denoiser
    amn: Optional[AmbiguityNet]
    acn: Optional[AmbiguityNet]
    schedule: NoiseSchedule
    config: TrainConfig
    steps_completed: int
    log: List[dict]
    checkpoint_path: Optional[Path]


def _mask_to_signed(mask: torch.Tensor) -> torch.Tensor:
    """{0,1} mask -> [-1, +1] diffusion encoding."""
    return mask * 2.0 - 1.0


@dataclass
class _Tensors:
    """Dataset staged as stacked tensors for fast batch indexing."""

    images: torch.Tensor        # (N, C, H, W)
    rater_masks: torch.Tensor   # (N, M, H, W) in {0, 1}
    averaged: torch.Tensor      # (N, H, W) in {0, 1}

    @classmethod
    def stage(cls, dataset: Sequence[AmbiguousSample], dtype: torch.dtype) -> "_Tensors":
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        num_raters = {s.num_raters for s in dataset}
        if len(num_raters) != 1:
            raise ValueError(f"all samples must share a rater count, got {num_raters}")
        images = torch.as_tensor(
            np.stack([s.image for s in dataset]), dtype=dtype
        )
        masks = torch.as_tensor(
            np.stack([np.stack(s.rater_masks) for s in dataset]).astype(np.float64),
            dtype=dtype,
        )
        averaged = (masks.mean(dim=1) > 0.5).to(dtype)
        return cls(images=images, rater_masks=masks, averaged=averaged)


def _build_nets(cfg: TrainConfig, image_size: int, prior_channels: int):
    den_cfg = DenoiserConfig(
        image_size=image_size,
        base_channels=cfg.base_channels,
        channel_multipliers=cfg.channel_multipliers,
        prior_channels=prior_channels,
        time_embed_dim=cfg.time_embed_dim,
    )
    denoiser = Denoiser(den_cfg, seed=cfg.seed).to(cfg.torch_dtype)
    amn = acn = None
    if cfg.mode == "cimd":
        amb_cfg = AmbiguityNetConfig(
            filters=cfg.ambiguity_filters,
            latent_dim=cfg.latent_dim,
            covariance_mode=cfg.covariance_mode,
            freeze_off_diagonal=cfg.freeze_off_diagonal,
        )
        amn = make_amn(amb_cfg, prior_channels, seed=cfg.seed).to(cfg.torch_dtype)
        acn = make_acn(amb_cfg, prior_channels, seed=cfg.seed).to(cfg.torch_dtype)
    return denoiser, amn, acn


def train(
    cfg: TrainConfig,
    dataset: Sequence[AmbiguousSample],
    out_dir=None,
) -> TrainResult:
    """Run the configured arm; returns nets plus the full loss log.

    When `out_dir` is given, a checkpoint lands there every
    `checkpoint_every` steps (and at the end), and each step's LossReport
    is appended to ``train_log.ndjson``.  A non-finite loss aborts with
    :class:`TrainingAbortedError`, leaving the last periodic checkpoint
    in place.
    """
    data = _Tensors.stage(dataset, cfg.torch_dtype)
    n_samples, n_raters = data.rater_masks.shape[:2]
    image_size = data.images.shape[-1]
    s = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    denoiser, amn, acn = _build_nets(cfg, image_size, data.images.shape[1])

    params = list(denoiser.parameters())
    if amn is not None:
        params += list(amn.parameters()) + list(acn.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    rng = substream(cfg.seed, "train")
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.npz" if out_dir else None
    log_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.ndjson", "w")

    def save(step: int) -> None:
        if ckpt_path is not None:
            save_checkpoint(
                ckpt_path, denoiser, amn, acn,
                extra_meta={"train_config": asdict(cfg), "step": step},
            )

    log: List[dict] = []
    try:
        for step in range(cfg.steps):
            idx = torch.from_numpy(rng.integers(0, n_samples, size=cfg.batch_size))
            b = data.images[idx]
            if cfg.mode == "ddpm-det-seg":
                mask = data.averaged[idx]
            else:
                rater = torch.from_numpy(rng.integers(0, n_raters, size=cfg.batch_size))
                mask = data.rater_masks[idx, rater]
            x0 = _mask_to_signed(mask)[:, None]  # (B, 1, H, W)

            t = rng.integers(1, cfg.T + 1, size=cfg.batch_size)
            eps = torch.as_tensor(
                rng.standard_normal(tuple(x0.shape)), dtype=cfg.torch_dtype
            )
            x_t = q_sample(x0, t, eps, s)
            out = denoise_forward(denoiser, b, x_t, torch.from_numpy(t))

            parts = LossParts(
                l_simple=l_simple(eps, out.eps_hat),
                l_vlb=l_vlb_term(x0, x_t, t, out, s),
            )
            if cfg.mode == "cimd":
                q_lat = amn_forward(amn, b, x0)
                x0_hat = predict_x0_from_eps(x_t, t, out.eps_hat, s, clip=True)
                p_lat = acn_forward(acn, b, x0_hat, torch.from_numpy(t), cfg.T)
                parts.l_amb = l_amb(q_lat, p_lat)

            report = total_loss(parts, cfg.weights)
            opt.zero_grad()
            report.total.backward()
            opt.step()

            entry = {"step": step, **report.scalars()}
            log.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
            if (step + 1) % cfg.checkpoint_every == 0:
                save(step + 1)
    except (NonFiniteLossError, NonFiniteActivationError) as e:
        if log_file:
            log_file.close()
        raise TrainingAbortedError(
            f"aborted at step {len(log)}: {e}"
            + (f"; last good checkpoint: {ckpt_path}" if ckpt_path else "")
        ) from e
    else:
        save(cfg.steps)
    finally:
        if log_file and not log_file.closed:
            log_file.close()

    return TrainResult(
        denoiser=denoiser, amn=amn, acn=acn, schedule=s, config=cfg,
        steps_completed=cfg.steps, log=log, checkpoint_path=ckpt_path,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate_with_sampler(
    sample_fn: Callable[[SampleRequest], MaskSet],
    dataset: Sequence[AmbiguousSample],
    n: int = 4,
    seed: int = 0,
    binarize_threshold: float = 0.0,
) -> EvaluationSummary:
    """Score any mask sampler against the dataset's rater masks.

    `sample_fn` maps a SampleRequest to a MaskSet; each image gets a
    seed derived from (seed, image index), so the evaluation is
    deterministic and independent of image order.
    """
    preds, gts = [], []
    for i, smp in enumerate(dataset):
        req = SampleRequest(
            b=smp.image, n=n, seed=_image_seed(seed, i),
            binarize_threshold=binarize_threshold,
        )
        preds.append(sample_fn(req))
        gts.append(MaskSet(np.stack([np.asarray(m) != 0 for m in smp.rater_masks])))
    return evaluate_testset(preds, gts)


def _sampler_for(ckpt: Checkpoint) -> Tuple[Callable[[SampleRequest], MaskSet], NoiseSchedule]:
    extra = ckpt.meta.get("extra", {})
    tc = extra.get("train_config")
    if not tc:
        raise ValueError(
            "checkpoint metadata lacks the training config needed to rebuild "
            "the noise schedule"
        )
    s = make_linear_schedule(int(tc["T"]), tc.get("beta_start"), tc.get("beta_end"))
    return (lambda req: sample_masks(ckpt.denoiser, s, req)), s


def evaluate(
    checkpoint,
    dataset: Sequence[AmbiguousSample],
    n: int = 4,
    seed: int = 0,
) -> EvaluationSummary:
    """Sample n masks per image from a checkpoint and score them."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    sample_fn, _ = _sampler_for(ckpt)
    return evaluate_with_sampler(sample_fn, dataset, n=n, seed=seed)


def blank_mask_fraction(masks: MaskSet, max_area_fraction: float = 0.0) -> float:
    """Fraction of masks whose foreground area is <= the given fraction
    of the image (0.0 -> exactly empty)."""
    flat = masks.flat()
    areas = flat.sum(axis=1) / flat.shape[1]
    return float((areas <= max_area_fraction).mean())


def heldout_l_simple(
    result: TrainResult,
    dataset: Sequence[AmbiguousSample],
    seed: int = 0,
    batch_size: int = 64,
) -> float:
    """Noise-prediction MSE on a freshly drawn batch (regression probe)."""
    cfg = result.config
    data = _Tensors.stage(dataset, cfg.torch_dtype)
    rng = substream(seed, "heldout-l-simple")
    idx = torch.from_numpy(rng.integers(0, data.images.shape[0], size=batch_size))
    rater = torch.from_numpy(rng.integers(0, data.rater_masks.shape[1], size=batch_size))
    x0 = _mask_to_signed(data.rater_masks[idx, rater])[:, None]
    t = rng.integers(1, cfg.T + 1, size=batch_size)
    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=cfg.torch_dtype)
    with torch.no_grad():
        x_t = q_sample(x0, t, eps, result.schedule)
        out = denoise_forward(result.denoiser, data.images[idx], x_t, torch.from_numpy(t))
        return float(l_simple(eps, out.eps_hat))


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def run_ablation(
    dataset: Sequence[AmbiguousSample],
    base_cfg: TrainConfig,
    out_dir=None,
    eval_dataset: Optional[Sequence[AmbiguousSample]] = None,
    modes: Sequence[str] = MODES,
) -> dict:
    """Train each arm with the shared seed/budget and rank them.

    Returns (and optionally writes as JSON) a report with one entry per
    arm holding exactly the three headline metrics, ranked by ci
    descending (ties broken by lower ged, then arm name).
    """
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown ablation arm {m!r}")
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    out_dir = Path(out_dir) if out_dir is not None else None
    arms = []
    for m in modes:
        cfg = TrainConfig(**{**asdict(base_cfg), "mode": m})
        arm_dir = out_dir / m if out_dir else None
        result = train(cfg, dataset, out_dir=arm_dir)
        summary = evaluate_with_sampler(
            lambda req: sample_masks(result.denoiser, result.schedule, req),
            eval_dataset,
            n=cfg.eval_samples,
            seed=cfg.seed,
        )
        arms.append(
            {
                "mode": m,
                "metrics": {
                    "ged": summary.mean_ged,
                    "ci": summary.mean_ci,
                    "d_max": summary.mean_d_max,
                },
            }
        )
    none_low = lambda x: -math.inf if x is None else x
    arms.sort(key=lambda a: (-none_low(a["metrics"]["ci"]), a["metrics"]["ged"], a["mode"]))
    report = {
        "format_version": ABLATION_REPORT_VERSION,
        "seed": base_cfg.seed,
        "eval_samples": base_cfg.eval_samples,
        "arms": arms,
    }
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation_report.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    return report
