"""Tolerance-aware crack evaluation: Pr/Re/F1, ODS, OIS and PR-curve data.

A predicted crack pixel is a true positive when a ground-truth crack pixel
lies within ``tol`` pixels of it; a ground-truth pixel is missed when no
predicted pixel lies within ``tol`` of it. Matching is many-to-one.
"""

from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage

THRESHOLDS = np.arange(1, 1000) / 1000.0
TOLERANCE = 2.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    pr: float
    re: float
    f1: float
    ods: float
    ois: float
    best_t: float
    threshold: float = 0.5
    tolerance: float = TOLERANCE
    n_images: int = 0
    pr_curve: List[Tuple[float, float, float]] = field(default_factory=list)

    def summary(self):
        d = asdict(self)
        d.pop("pr_curve")
        return d


def _as_2d(a):
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    a = np.asarray(a)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a single 2-D map, got shape {a.shape}")
    return a


def footprint(tol=TOLERANCE, metric="euclidean"):
    """Boolean disk (or square for ``chebyshev``) of offsets within ``tol``."""
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    r = int(np.floor(tol))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    if metric == "euclidean":
        return dy * dy + dx * dx <= tol * tol
    if metric == "chebyshev":
        return np.maximum(abs(dy), abs(dx)) <= tol
    raise ValueError(f"unknown distance metric {metric!r}")


def _dilate(mask, fp):
    if fp.size == 1:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=fp)


def tolerant_confusion(pred, gt, tol=TOLERANCE, metric="euclidean"):
    pred = _as_2d(pred).astype(bool)
    gt = _as_2d(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    fp_ = footprint(tol, metric)
    tp = int(np.count_nonzero(pred & _dilate(gt, fp_)))
    fn = int(np.count_nonzero(gt & ~_dilate(pred, fp_)))
    return ConfusionCounts(tp, int(np.count_nonzero(pred)) - tp, fn)


def _prf_arrays(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        pr = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
        re = np.where(tp + fn > 0, tp / (tp + fn), 1.0)
        f1 = np.where(pr + re > 0, 2 * pr * re / (pr + re), 0.0)
    return pr, re, f1


def prf(c: ConfusionCounts):
    """Precision, recall, F1. Empty denominators give 1 for Pr/Re; F1 is 0 when both are 0."""
    pr, re, f1 = _prf_arrays(c.tp, c.fp, c.fn)
    return float(pr), float(re), float(f1)


def _count_at_least(sorted_vals, thresholds):
    return sorted_vals.size - np.searchsorted(sorted_vals, thresholds, side="left")


def image_sweep(prob, gt, tol=TOLERANCE, metric="euclidean", thresholds=THRESHOLDS):
    """TP/FP/FN of one image for every threshold, as three int arrays.

    Equivalent to binarizing at each ``t`` (``prob >= t``) and calling
    :func:`tolerant_confusion`, but linear in image size.
    """
    prob = _as_2d(prob).astype(np.float64)
    gt = _as_2d(gt).astype(bool)
    if prob.shape != gt.shape:
        raise ValueError(f"probability map {prob.shape} and ground truth {gt.shape} differ in shape")
    fp_ = footprint(tol, metric)
    near_gt = _dilate(gt, fp_)
    n_pred = _count_at_least(np.sort(prob, axis=None), thresholds)
    tp = _count_at_least(np.sort(prob[near_gt]), thresholds)
    # a gt pixel is hit at t iff the max probability in its neighbourhood reaches t
    reach = ndimage.grey_dilation(prob, footprint=fp_, mode="constant", cval=-np.inf)
    covered = _count_at_least(np.sort(reach[gt]), thresholds)
    fn = int(gt.sum()) - covered
    return tp, n_pred - tp, fn


def _check_dataset(probs, gts):
    if len(probs) != len(gts):
        raise ValueError(f"{len(probs)} probability maps but {len(gts)} ground-truth masks")
    if not probs:
        raise ValueError("empty dataset")


def _sweeps(probs, gts, tol, metric):
    _check_dataset(probs, gts)
    return [image_sweep(p, g, tol, metric) for p, g in zip(probs, gts)]


def _ods_from_sweeps(sweeps):
    tp = sum(s[0] for s in sweeps)
    fp = sum(s[1] for s in sweeps)
    fn = sum(s[2] for s in sweeps)
    pr, re, f1 = _prf_arrays(tp, fp, fn)
    k = int(np.argmax(f1))
    curve = [(float(t), float(p), float(r)) for t, p, r in zip(THRESHOLDS, pr, re)]
    return float(f1[k]), float(THRESHOLDS[k]), curve


def _ois_from_sweeps(sweeps):
    return float(np.mean([_prf_arrays(*s)[2].max() for s in sweeps]))


def ods(probs, gts, tol=TOLERANCE, metric="euclidean"):
    """Best dataset-aggregated F1 over the shared threshold grid; ``(ods, best_t, pr_curve)``."""
    return _ods_from_sweeps(_sweeps(probs, gts, tol, metric))


def ois(probs, gts, tol=TOLERANCE, metric="euclidean"):
    """Mean over images of each image's best-threshold F1."""
    return _ois_from_sweeps(_sweeps(probs, gts, tol, metric))


def evaluate(probs, gts, threshold=0.5, tol=TOLERANCE, metric="euclidean"):
    sweeps = _sweeps(probs, gts, tol, metric)
    total = ConfusionCounts(0, 0, 0)
    for p, g in zip(probs, gts):
        total = total + tolerant_confusion(_as_2d(p) >= threshold, g, tol, metric)
    pr, re, f1 = prf(total)
    best, best_t, curve = _ods_from_sweeps(sweeps)
    return MetricsReport(
        pr=pr,
        re=re,
        f1=f1,
        ods=best,
        ois=_ois_from_sweeps(sweeps),
        best_t=best_t,
        threshold=threshold,
        tolerance=tol,
        n_images=len(probs),
        pr_curve=curve,
    )
