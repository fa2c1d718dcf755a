"""Overlap and surface-distance metrics: DSC, precision, recall, HD95.

Evaluation is volumetric per patient. HD95 is the symmetric form: the max of
the two directed 95th percentiles of surface-to-surface nearest-neighbor
distances, in physical mm. Surface voxels are foreground voxels with at
least one background face-neighbor (voxels beyond the array edge count as
background). Empty-set conventions are explicit because challenge tools
differ: dice/precision/recall are 1.0 when both sets are empty; hd95 is 0.0
when both are empty and NaN (undefined) when exactly one is.

`hd95_bruteforce` is a deliberately naive O(n^2) reference kept independent
of the fast path; tests compare the two.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P&G| / (|P|+|G|); 1.0 when both sets are empty."""
    pred, gt = _check_shapes(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def precision_recall(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(TP/(TP+FP), TP/(TP+FN)); an empty denominator is 1.0 only if both sets are empty."""
    pred, gt = _check_shapes(pred, gt)
    tp = int(np.logical_and(pred, gt).sum())
    n_pred = int(pred.sum())
    n_gt = int(gt.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbor."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    all_neighbors_fg = np.ones_like(m)
    for axis in range(m.ndim):
        for shift in (1, -1):
            sl = [slice(1, -1)] * m.ndim
            sl[axis] = slice(1 + shift, padded.shape[axis] - 1 + shift)
            all_neighbors_fg &= padded[tuple(sl)]
    return m & ~all_neighbors_fg


def _surface_points_mm(mask: np.ndarray, spacing: tuple[float, ...]) -> np.ndarray:
    coords = np.argwhere(surface_mask(mask)).astype(np.float64)
    return coords * np.asarray(spacing, dtype=np.float64)


def percentile95(values: np.ndarray) -> float:
    """95th percentile with linear interpolation between order statistics."""
    return float(np.percentile(values, 95.0, method="linear"))


def hd95(pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, ...]) -> float:
    """Symmetric 95th-percentile surface distance in mm (NaN if one set is empty)."""
    pred, gt = _check_shapes(pred, gt)
    p_pts = _surface_points_mm(pred, spacing)
    g_pts = _surface_points_mm(gt, spacing)
    if len(p_pts) == 0 and len(g_pts) == 0:
        return 0.0
    if len(p_pts) == 0 or len(g_pts) == 0:
        return float("nan")
    d_pg = cKDTree(g_pts).query(p_pts)[0]
    d_gp = cKDTree(p_pts).query(g_pts)[0]
    return max(percentile95(d_pg), percentile95(d_gp))


def hd95_bruteforce(pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, ...]) -> float:
    """O(n^2) pairwise reference implementation of hd95, kept independent."""
    pred, gt = _check_shapes(pred, gt)
    spacing = tuple(float(s) for s in spacing)

    def surface_coords(m: np.ndarray) -> list[tuple[int, ...]]:
        pts = []
        for idx in np.ndindex(m.shape):
            if not m[idx]:
                continue
            on_surface = False
            for axis in range(m.ndim):
                for shift in (1, -1):
                    nb = list(idx)
                    nb[axis] += shift
                    if not (0 <= nb[axis] < m.shape[axis]) or not m[tuple(nb)]:
                        on_surface = True
            if on_surface:
                pts.append(idx)
        return pts

    def directed_distances(src, dst):
        out = []
        for a in src:
            best = math.inf
            for b in dst:
                d = 0.0
                for ai, bi, sp in zip(a, b, spacing):
                    d += ((ai - bi) * sp) ** 2
                best = min(best, math.sqrt(d))
            out.append(best)
        return out

    def percentile_sorted(values, q):
        ordered = sorted(values)
        h = (len(ordered) - 1) * q / 100.0
        lo = math.floor(h)
        hi = min(lo + 1, len(ordered) - 1)
        return ordered[lo] + (h - lo) * (ordered[hi] - ordered[lo])

    p_pts = surface_coords(pred)
    g_pts = surface_coords(gt)
    if not p_pts and not g_pts:
        return 0.0
    if not p_pts or not g_pts:
        return float("nan")
    return max(
        percentile_sorted(directed_distances(p_pts, g_pts), 95.0),
        percentile_sorted(directed_distances(g_pts, p_pts), 95.0),
    )


@dataclass(frozen=True)
class ClassScores:
    dice: float
    precision: float
    recall: float
    hd95_mm: float  # NaN means undefined (exactly one empty surface)


@dataclass(frozen=True)
class MetricsReport:
    per_class: Mapping[int, ClassScores]
    macro: ClassScores
    present_classes: tuple[int, ...]  # classes with ground-truth support


def _class_map(pred, gt_labels: np.ndarray, class_count: int, organ: int) -> np.ndarray:
    """Extract one organ's binary map from a label map or per-class stack."""
    pred = np.asarray(pred)
    if pred.shape == gt_labels.shape:
        return pred == organ
    if pred.shape == (class_count, *gt_labels.shape):
        return pred[organ - 1].astype(bool)
    raise ValueError(
        f"prediction shape {pred.shape} matches neither label map {gt_labels.shape} "
        f"nor per-class stack {(class_count, *gt_labels.shape)}"
    )


def evaluate_prediction(
    pred,
    gt,
    spacing: tuple[float, ...] | None,
    class_count: int | None = None,
) -> MetricsReport:
    """Per-class and macro metrics for one patient.

    `pred` may be an exclusive label map, a per-class binary stack
    (class_count, ...), or anything exposing `.binary` as such a stack (a
    multi-label prediction). `gt` is a label map or LabelMask. The macro row
    averages only classes present in the ground truth; macro hd95 skips
    undefined per-class values. Without spacing metadata, hd95 falls back to
    voxel units with a warning.
    """
    gt_labels = np.asarray(getattr(gt, "labels", gt))
    if spacing is None:
        warnings.warn("no spacing metadata; hd95 reported in voxels", stacklevel=2)
        spacing = (1.0,) * gt_labels.ndim
    c = class_count or getattr(gt, "class_count", None) or int(gt_labels.max(initial=0))
    pred = getattr(pred, "binary", pred)

    per_class: dict[int, ClassScores] = {}
    present = []
    for organ in range(1, c + 1):
        g = gt_labels == organ
        p = _class_map(pred, gt_labels, c, organ)
        pr, rc = precision_recall(p, g)
        per_class[organ] = ClassScores(
            dice=dice(p, g), precision=pr, recall=rc, hd95_mm=hd95(p, g, spacing)
        )
        if g.any():
            present.append(organ)

    if present:
        scores = [per_class[o] for o in present]
        hd_values = [s.hd95_mm for s in scores if not math.isnan(s.hd95_mm)]
        macro = ClassScores(
            dice=float(np.mean([s.dice for s in scores])),
            precision=float(np.mean([s.precision for s in scores])),
            recall=float(np.mean([s.recall for s in scores])),
            hd95_mm=float(np.mean(hd_values)) if hd_values else float("nan"),
        )
    else:
        macro = ClassScores(1.0, 1.0, 1.0, 0.0)
    return MetricsReport(per_class=per_class, macro=macro, present_classes=tuple(present))
