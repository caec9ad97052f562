"""Command-line entrypoint.

Subcommands cover the whole pipeline::

    ambiseg generate-data --out data/ --count 200 --seed 0
    ambiseg train         --data data/ --out run/ --mode cimd
    ambiseg sample        --checkpoint run/checkpoint.npz --data data/ --out samples/
    ambiseg evaluate      --checkpoint run/checkpoint.npz --data data/ --out eval/
    ambiseg ablate        --data data/ --out ablation/
    ambiseg plot          --checkpoint run/checkpoint.npz --data data/ --images 0,1 --out grid.png

Every subcommand takes a ``--seed``; all randomness flows from it, so
reruns over read-only inputs reproduce their artifacts byte for byte.
Reports are JSON (validated by the schemas shipped under
``ambiseg/schemas/``) plus CSV, with matplotlib figures rendered next to
them.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import checkpoint_hash, load_checkpoint
from .data import SynthConfig, generate_synthetic, load_dataset, save_dataset
from .harness import (
    TrainConfig,
    coerce_config_values,
    evaluate_with_sampler,
    run_ablation,
    train,
)
from .plotting import PlotSpec, plot_ablation, plot_evaluation, plot_loss_curves, plot_sample_grid
from .sampler import SampleRequest, sample_masks
from .schedule import make_linear_schedule

__all__ = ["main", "console_entry", "load_schema"]

EVALUATION_REPORT_VERSION = 1
SAMPLE_MANIFEST_VERSION = 1


def load_schema(name: str) -> dict:
    """Load one of the packaged report schemas by file name."""
    ref = resources.files("ambiseg") / "schemas" / name
    return json.loads(ref.read_text())


# ---------------------------------------------------------------------------
# subcommand helpers
# ---------------------------------------------------------------------------

def _add_train_config_flags(p: argparse.ArgumentParser) -> None:
    """One string-valued flag per TrainConfig field; parsed like the
    config file so the two surfaces accept identical syntax."""
    for f in fields(TrainConfig):
        p.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f"cfg_{f.name}",
            default=None,
            metavar="V",
            help=f"TrainConfig.{f.name}",
        )


def _train_config_from_args(args) -> TrainConfig:
    raw = {}
    if getattr(args, "config", None):
        base = TrainConfig.from_file(args.config)
        raw.update({f.name: getattr(base, f.name) for f in fields(TrainConfig)})
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(TrainConfig)
        if getattr(args, f"cfg_{f.name}") is not None
    }
    raw.update(coerce_config_values(TrainConfig, overrides))
    return TrainConfig(**raw)


def _checkpoint_sampler(path):
    ckpt = load_checkpoint(path)
    tc = ckpt.meta.get("extra", {}).get("train_config")
    if not tc:
        raise ValueError(f"checkpoint {path} lacks train_config metadata")
    s = make_linear_schedule(int(tc["T"]), tc.get("beta_start"), tc.get("beta_end"))
    return ckpt, s, (lambda req: sample_masks(ckpt.denoiser, s, req))


def _image_ids(dataset):
    return [
        str(smp.metadata.get("id", f"{i:05d}")) for i, smp in enumerate(dataset)
    ]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate_data(args) -> int:
    cfg = SynthConfig(
        image_size=args.image_size,
        num_raters=args.num_raters,
        blank_prob=args.blank_prob,
        boundary_jitter=tuple(int(x) for x in args.boundary_jitter.split(",")),
        noise_level=args.noise_level,
        count=args.count,
        seed=args.seed,
    )
    samples = generate_synthetic(cfg)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _train_config_from_args(args)
    dataset = load_dataset(args.data)
    result = train(cfg, dataset, out_dir=args.out)
    if result.log:
        plot_loss_curves(result.log, Path(args.out) / "loss_curves.png")
    print(
        f"trained {cfg.mode} for {result.steps_completed} steps; "
        f"checkpoint: {result.checkpoint_path}"
    )
    return 0


def _cmd_sample(args) -> int:
    ckpt, _, sample_fn = _checkpoint_sampler(args.checkpoint)
    dataset = load_dataset(args.data)
    if not 0 <= args.image_index < len(dataset):
        raise ValueError(f"image index {args.image_index} outside dataset of {len(dataset)}")
    smp = dataset[args.image_index]
    req = SampleRequest(
        b=smp.image, n=args.n, seed=args.seed, binarize_threshold=args.threshold
    )
    masks = sample_fn(req)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i in range(len(masks)):
        name = f"sample_{i}.png"
        arr = masks[i].astype(np.uint8) * 255
        Image.fromarray(arr, mode="L").save(out / name)
        files.append(name)
    manifest = {
        "format_version": SAMPLE_MANIFEST_VERSION,
        "seed": args.seed,
        "n": args.n,
        "binarize_threshold": args.threshold,
        "checkpoint_sha256": checkpoint_hash(args.checkpoint),
        "image_id": str(smp.metadata.get("id", f"{args.image_index:05d}")),
        "files": files,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {len(files)} masks and manifest.json to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt, _, sample_fn = _checkpoint_sampler(args.checkpoint)
    dataset = load_dataset(args.data)
    summary = evaluate_with_sampler(
        sample_fn, dataset, n=args.n, seed=args.seed,
        binarize_threshold=args.threshold,
    )
    ids = _image_ids(dataset)
    per_image = [
        {
            "image_id": ids[i],
            "ged": r.ged,
            "s_c": r.s_c,
            "d_max": r.d_max,
            "d_a": r.d_a,
            "ci": r.ci,
        }
        for i, r in enumerate(summary.per_image)
    ]
    report = {
        "format_version": EVALUATION_REPORT_VERSION,
        "seed": args.seed,
        "eval_samples": args.n,
        "n_images": summary.n_images,
        "n_ci_defined": summary.n_ci_defined,
        "means": {
            "ged": summary.mean_ged,
            "s_c": summary.mean_s_c,
            "d_max": summary.mean_d_max,
            "d_a": summary.mean_d_a,
            "ci": summary.mean_ci,
        },
        "per_image": per_image,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["image_id", "ged", "s_c", "d_max", "d_a", "ci"])
        w.writeheader()
        w.writerows(per_image)
    plot_evaluation(per_image, out / "metrics.png")
    ci_txt = "undefined" if summary.mean_ci is None else f"{summary.mean_ci:.4f}"
    print(f"evaluated {summary.n_images} images: ged={summary.mean_ged:.4f} ci={ci_txt}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _train_config_from_args(args)
    dataset = load_dataset(args.data)
    report = run_ablation(dataset, cfg, out_dir=args.out)
    out = Path(args.out)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "ged", "ci", "d_max"])
        for arm in report["arms"]:
            m = arm["metrics"]
            w.writerow([arm["mode"], m["ged"], m["ci"], m["d_max"]])
    plot_ablation(report, out / "ablation.png")
    ranking = " > ".join(a["mode"] for a in report["arms"])
    print(f"ablation complete; ci ranking: {ranking}")
    return 0


def _cmd_plot(args) -> int:
    _, _, sample_fn = _checkpoint_sampler(args.checkpoint)
    dataset = load_dataset(args.data)
    ids = [int(x) for x in args.images.split(",") if x.strip()]
    spec = PlotSpec(
        image_ids=tuple(ids),
        show_input=not args.no_input,
        num_gt=args.num_gt,
        num_samples=args.n,
        out_path=args.out,
    )
    pred_sets = []
    for k, image_id in enumerate(spec.image_ids):
        if not 0 <= image_id < len(dataset):
            raise ValueError(f"image index {image_id} outside dataset of {len(dataset)}")
        req = SampleRequest(
            b=dataset[image_id].image, n=max(args.n, 1), seed=args.seed + image_id
        )
        pred_sets.append(sample_fn(req))
    path = plot_sample_grid(dataset, pred_sets, spec)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ambiseg",
        description="Diffusion-based ambiguous segmentation: data, training, "
        "sampling, evaluation, ablation, plots.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic multi-rater dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--num-raters", type=int, default=4)
    p.add_argument("--blank-prob", type=float, default=0.5)
    p.add_argument("--boundary-jitter", default="0,1", metavar="LO,HI")
    p.add_argument("--noise-level", type=float, default=0.1)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train one arm on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value config file")
    _add_train_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="draw masks for one image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("evaluate", help="score a checkpoint against rater masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare the three arms")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key = value config file")
    _add_train_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="render an input/raters/samples grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--images", required=True, metavar="I,J,...")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--num-gt", type=int, default=None)
    p.add_argument("--no-input", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse handles --help / usage errors
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


def console_entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    console_entry()
