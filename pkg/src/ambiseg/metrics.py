"""Distribution-level segmentation metrics.

Compares a *set* of predicted binary masks against a *set* of ground-truth
masks (e.g. multiple annotators), rather than one mask against one mask:

* ``ged`` -- squared generalized energy distance under the IoU distance,
* ``combined_sensitivity`` / ``max_dice_match`` / ``diversity_agreement`` --
  the three components combined into a single score by ``ci_score``,
* ``evaluate_testset`` -- per-image reports plus dataset means.

All metrics are pure functions of their inputs.

Conventions for empty masks (an empty mask is a legitimate "no foreground"
annotation, not an error):

* IoU of two empty masks is 1: two raters agreeing that nothing is there
  are in perfect agreement.  This also makes the IoU distance d = 1 - IoU
  vanish for identical masks of any kind.
* Dice of two masks with empty union is 1.
* Combined sensitivity with an empty combined ground truth is 1 -- there
  are no positives to miss, regardless of false positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MaskSet",
    "CIReport",
    "EvaluationSummary",
    "UndefinedDispersionError",
    "iou",
    "dice",
    "ged",
    "combined_sensitivity",
    "max_dice_match",
    "diversity_agreement",
    "ci_score",
    "ci_harmonic_mean",
    "evaluate_testset",
]


class UndefinedDispersionError(ValueError):
    """Raised when a pairwise-dispersion statistic needs >= 2 masks."""


def _validate_binary(arr: np.ndarray, name: str) -> np.ndarray:
    """Return `arr` as a bool array, rejecting anything not exactly 0/1."""
    if arr.dtype == np.bool_:
        return arr
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be strictly binary (values 0 or 1)")
    return arr != 0


@dataclass(frozen=True)
class MaskSet:
    """An ordered collection of same-shape binary masks, stacked on axis 0."""

    masks: np.ndarray  # (K, *mask_shape), bool

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim < 2 or m.shape[0] < 1:
            raise ValueError("MaskSet needs at least one mask with at least 1 dimension")
        m = _validate_binary(m, "MaskSet")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)

    @property
    def mask_shape(self) -> tuple:
        return tuple(self.masks.shape[1:])

    def __len__(self) -> int:
        return int(self.masks.shape[0])

    def __getitem__(self, i) -> np.ndarray:
        return self.masks[i]

    def flat(self) -> np.ndarray:
        """(K, n_pixels) bool view for vectorized pairwise computations."""
        return self.masks.reshape(len(self), -1)


def as_mask_set(obj) -> MaskSet:
    """Coerce a MaskSet, a (K, ...) array, or a list of masks."""
    if isinstance(obj, MaskSet):
        return obj
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            raise ValueError("MaskSet requires a nonempty list of masks")
        shapes = {tuple(np.asarray(m).shape) for m in obj}
        if len(shapes) != 1:
            raise ValueError(f"masks in a set must share one shape, got {sorted(shapes)}")
        obj = np.stack([np.asarray(m) for m in obj], axis=0)
    return MaskSet(np.asarray(obj))


def _check_cross_shape(preds: MaskSet, gts: MaskSet) -> None:
    if preds.mask_shape != gts.mask_shape:
        raise ValueError(
            f"prediction masks {preds.mask_shape} and ground-truth masks "
            f"{gts.mask_shape} have different shapes"
        )


# ---------------------------------------------------------------------------
# Pairwise primitives
# ---------------------------------------------------------------------------

def iou(a, b) -> float:
    """Intersection over union of two binary masks; 1.0 if both are empty."""
    a = _validate_binary(np.asarray(a), "a")
    b = _validate_binary(np.asarray(b), "b")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def dice(a, b) -> float:
    """Dice coefficient 2|a∩b|/(|a|+|b|); 1.0 if the union is empty."""
    a = _validate_binary(np.asarray(a), "a")
    b = _validate_binary(np.asarray(b), "b")
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _pairwise_iou_distance(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """(n, m) matrix of 1 - IoU between rows of two (k, P) bool arrays.

    Both-empty pairs get distance 0 (IoU convention above).
    """
    Ai = A.astype(np.int64)
    Bi = B.astype(np.int64)
    inter = Ai @ Bi.T
    sizes_a = Ai.sum(axis=1)[:, None]
    sizes_b = Bi.sum(axis=1)[None, :]
    union = sizes_a + sizes_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou_mat = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return 1.0 - iou_mat


# ---------------------------------------------------------------------------
# Set-level metrics
# ---------------------------------------------------------------------------

def ged(preds, gts, include_self_pairs: bool = True) -> float:
    """Squared generalized energy distance between two mask sets.

    ``2*mean d(S_i, Y_j) - mean d(S_i, S_i') - mean d(Y_j, Y_j')`` with
    ``d = 1 - IoU``.  By default every mean runs over all ordered pairs
    *including* self-pairs (a V-statistic): this keeps the estimator
    defined for single-element sets and, because the IoU distance is of
    negative type, nonnegative.  With ``include_self_pairs=False`` the
    within-set means run over distinct ordered pairs only (a U-statistic,
    which can go slightly negative and needs >= 2 masks per set).
    """
    P = as_mask_set(preds)
    G = as_mask_set(gts)
    _check_cross_shape(P, G)
    cross = float(_pairwise_iou_distance(P.flat(), G.flat()).mean())

    def within(S: MaskSet) -> float:
        D = _pairwise_iou_distance(S.flat(), S.flat())
        n = len(S)
        if include_self_pairs:
            return float(D.mean())
        if n < 2:
            raise ValueError(
                "include_self_pairs=False needs >= 2 masks per set "
                f"(got {n})"
            )
        return float(D.sum() / (n * (n - 1)))  # diagonal is exactly 0

    return 2.0 * cross - within(P) - within(G)


def combined_sensitivity(preds, gts) -> float:
    """Sensitivity of the union of predictions against the union of GTs.

    Returns TP/(TP+FN) of the combined masks.  If the combined ground
    truth is empty there is nothing to miss, so the score is 1 whether or
    not the predictions fire.
    """
    P = as_mask_set(preds)
    G = as_mask_set(gts)
    _check_cross_shape(P, G)
    pred_union = np.any(P.masks, axis=0)
    gt_union = np.any(G.masks, axis=0)
    positives = int(gt_union.sum())
    if positives == 0:
        return 1.0
    tp = int(np.logical_and(pred_union, gt_union).sum())
    return tp / positives


def max_dice_match(preds, gts) -> float:
    """Mean over ground truths of the best Dice score any prediction achieves."""
    P = as_mask_set(preds)
    G = as_mask_set(gts)
    _check_cross_shape(P, G)
    Pf = P.flat().astype(np.int64)
    Gf = G.flat().astype(np.int64)
    inter = Pf @ Gf.T  # (n_pred, n_gt)
    denom = Pf.sum(axis=1)[:, None] + Gf.sum(axis=1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        dice_mat = np.where(denom > 0, 2.0 * inter / np.maximum(denom, 1), 1.0)
    return float(dice_mat.max(axis=0).mean())


def _pair_dispersions(S: MaskSet, dispersion: str) -> np.ndarray:
    """Dispersion for every unordered distinct pair within one set."""
    n = len(S)
    if n < 2:
        raise UndefinedDispersionError(
            f"pairwise dispersion needs at least 2 masks, got {n}"
        )
    iu = np.triu_indices(n, k=1)
    if dispersion == "iou":
        return _pairwise_iou_distance(S.flat(), S.flat())[iu]
    if dispersion == "pixel_variance":
        # Unbiased two-sample variance per pixel, (a-b)^2/2, averaged.
        F = S.flat().astype(np.float64)
        sq = (F[:, None, :] - F[None, :, :]) ** 2
        return sq.mean(axis=2)[iu] / 2.0
    raise ValueError(f"unknown dispersion {dispersion!r}")


def diversity_agreement(preds, gts, dispersion: str = "iou") -> float:
    """How well prediction diversity matches annotator diversity.

    The dispersion of a pair of masks defaults to the IoU distance
    1 - IoU (a per-pixel-variance alternative is available via
    ``dispersion="pixel_variance"`` for sensitivity checks).  With
    V_min/V_max the extreme dispersions over unordered distinct pairs
    within each set::

        d_a = 1 - (|ΔV_max| + |ΔV_min|) / 2

    where ΔV compares ground-truth extremes to prediction extremes.
    Either set having fewer than 2 masks raises
    :class:`UndefinedDispersionError`; the caller chooses a policy.
    """
    P = as_mask_set(preds)
    G = as_mask_set(gts)
    _check_cross_shape(P, G)
    vp = _pair_dispersions(P, dispersion)
    vg = _pair_dispersions(G, dispersion)
    delta_max = abs(float(vg.max()) - float(vp.max()))
    delta_min = abs(float(vg.min()) - float(vp.min()))
    return 1.0 - (delta_max + delta_min) / 2.0


def ci_score(s_c: float, d_max: float, d_a: float) -> float:
    """Collective-insight combination 3*s_c*d_max*d_a/(s_c+d_max+d_a).

    Note this is *not* the harmonic mean of the three components even
    though it is often described as one; see :func:`ci_harmonic_mean`
    for the actual harmonic mean.  Returns 0 when the denominator is 0.
    """
    denom = s_c + d_max + d_a
    if denom == 0.0:
        return 0.0
    return 3.0 * s_c * d_max * d_a / denom


def ci_harmonic_mean(s_c: float, d_max: float, d_a: float) -> float:
    """True harmonic mean 3abc/(ab+bc+ca), as a diagnostic alternative."""
    denom = s_c * d_max + d_max * d_a + d_a * s_c
    if denom == 0.0:
        return 0.0
    return 3.0 * s_c * d_max * d_a / denom


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CIReport:
    """Per-image metric record.

    ``d_a`` and ``ci`` are None when the diversity term is undefined for
    the image (either mask set had fewer than 2 masks).
    """

    s_c: float
    d_max: float
    d_a: Optional[float]
    ci: Optional[float]
    ged: float


@dataclass(frozen=True)
class EvaluationSummary:
    """Per-image reports plus dataset means.

    Means of ``d_a``/``ci`` run over the images where they are defined
    (``n_ci_defined`` of ``n_images``); they are None if no image defines
    them.
    """

    per_image: tuple
    mean_ged: float
    mean_s_c: float
    mean_d_max: float
    mean_d_a: Optional[float]
    mean_ci: Optional[float]
    n_images: int
    n_ci_defined: int


def evaluate_single(preds, gts) -> CIReport:
    """All metrics for one image's prediction set vs ground-truth set."""
    s_c = combined_sensitivity(preds, gts)
    d_max = max_dice_match(preds, gts)
    try:
        d_a = diversity_agreement(preds, gts)
        ci: Optional[float] = ci_score(s_c, d_max, d_a)
    except UndefinedDispersionError:
        d_a = None
        ci = None
    return CIReport(s_c=s_c, d_max=d_max, d_a=d_a, ci=ci, ged=ged(preds, gts))


def evaluate_testset(model_outputs: Sequence, gt_sets: Sequence) -> EvaluationSummary:
    """Evaluate one prediction MaskSet against one GT MaskSet per image.

    The standard protocol draws 4 predictions per image; this function
    scores whatever it is handed.  Aggregates are plain arithmetic means
    of the per-image values.
    """
    if len(model_outputs) != len(gt_sets):
        raise ValueError(
            f"got {len(model_outputs)} prediction sets for {len(gt_sets)} "
            "ground-truth sets"
        )
    if len(gt_sets) == 0:
        raise ValueError("cannot evaluate an empty test set")
    reports = tuple(evaluate_single(p, g) for p, g in zip(model_outputs, gt_sets))
    defined = [r for r in reports if r.ci is not None]
    return EvaluationSummary(
        per_image=reports,
        mean_ged=float(np.mean([r.ged for r in reports])),
        mean_s_c=float(np.mean([r.s_c for r in reports])),
        mean_d_max=float(np.mean([r.d_max for r in reports])),
        mean_d_a=float(np.mean([r.d_a for r in defined])) if defined else None,
        mean_ci=float(np.mean([r.ci for r in defined])) if defined else None,
        n_images=len(reports),
        n_ci_defined=len(defined),
    )
