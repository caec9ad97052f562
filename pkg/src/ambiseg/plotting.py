"""Figure rendering (file output only; no interactive backends).

Grids show, per image row: the input, the rater masks, and sampled
predictions.  The other helpers chart training logs, per-image
evaluation metrics, and ablation comparisons.  All figures are written
with fixed metadata so identical runs produce identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = [
    "PlotSpec",
    "plot_sample_grid",
    "plot_loss_curves",
    "plot_evaluation",
    "plot_ablation",
]

_PNG_META = {"Software": "ambiseg"}  # pinned so reruns are byte-identical


@dataclass(frozen=True)
class PlotSpec:
    """Layout of a sample grid: which images, which columns."""

    image_ids: Tuple[int, ...]
    show_input: bool = True
    num_gt: Optional[int] = None  # None -> all raters
    num_samples: int = 4
    out_path: str = "grid.png"

    def __post_init__(self):
        if len(self.image_ids) < 1:
            raise ValueError("need at least one image id")
        gt_cols = self.num_gt if self.num_gt is not None else 1
        if int(self.show_input) + gt_cols + self.num_samples < 1:
            raise ValueError("grid needs at least one column")
        if self.num_samples < 0 or (self.num_gt is not None and self.num_gt < 0):
            raise ValueError("column counts must be >= 0")


def _imshow(ax, img, title: str, cmap: str) -> None:
    ax.imshow(img, cmap=cmap, vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_title(title, fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])


def plot_sample_grid(dataset, pred_sets, spec: PlotSpec) -> Path:
    """Render rows of input | rater masks | samples to spec.out_path.

    `pred_sets[k]` holds the sampled masks for spec.image_ids[k].
    """
    rows = len(spec.image_ids)
    first = dataset[spec.image_ids[0]]
    n_gt = spec.num_gt if spec.num_gt is not None else first.num_raters
    cols = int(spec.show_input) + n_gt + spec.num_samples
    fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.4 * rows), squeeze=False)
    for r, image_id in enumerate(spec.image_ids):
        smp = dataset[image_id]
        c = 0
        if spec.show_input:
            img = (np.asarray(smp.image)[0] + 1.0) / 2.0
            _imshow(axes[r][c], img, f"input {image_id}", "gray")
            c += 1
        for k in range(n_gt):
            _imshow(axes[r][c], np.asarray(smp.rater_masks[k]), f"gt {k+1}", "viridis")
            c += 1
        preds = pred_sets[r]
        for j in range(spec.num_samples):
            _imshow(axes[r][c], np.asarray(preds[j]).astype(float), f"sample {j+1}", "viridis")
            c += 1
    fig.tight_layout()
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out


def plot_loss_curves(log: Sequence[dict], out_path) -> Path:
    """Per-term loss curves from a training log (list of step records)."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    steps = [e["step"] for e in log]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l_simple", "l_vlb", "l_amb", "total"):
        ax.plot(steps, [e[key] for e in log], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out


def plot_evaluation(per_image: Sequence[dict], out_path) -> Path:
    """Per-image ged and ci bars from evaluation records."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    ids = [str(r["image_id"]) for r in per_image]
    x = np.arange(len(ids))
    ged = [r["ged"] for r in per_image]
    ci = [np.nan if r["ci"] is None else r["ci"] for r in per_image]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6, 0.3 * len(ids)), 5), sharex=True)
    ax1.bar(x, ged, color="tab:orange")
    ax1.set_ylabel("ged")
    ax2.bar(x, ci, color="tab:blue")
    ax2.set_ylabel("ci")
    ax2.set_xticks(x)
    ax2.set_xticklabels(ids, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(out, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out


def plot_ablation(report: dict, out_path) -> Path:
    """Grouped bars of the headline metrics per ablation arm."""
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    arms = report["arms"]
    names = [a["mode"] for a in arms]
    keys = ("ged", "ci", "d_max")
    x = np.arange(len(names))
    width = 0.25
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, key in enumerate(keys):
        vals = [
            np.nan if a["metrics"][key] is None else a["metrics"][key] for a in arms
        ]
        ax.bar(x + (i - 1) * width, vals, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out
