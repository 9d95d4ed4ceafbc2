"""Occupancy evaluation: per-class IoU, mIoU, and range-masked protocols.

Intersection-over-union is computed per semantic class from true/false
positive and false negative counts; the geometry variant binarizes the grids
into occupied/empty first. Range-masked evaluation restricts the counts to
voxels whose center lies within a horizontal radius (or annular sector) of an
origin, which is how performance is profiled against perception distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import SemanticGrid


@dataclass
class ConfusionCounts:
    """Per-class and binarized-geometry confusion counts.

    Index c-1 holds semantic class c (classes run 1..C; 0 is empty). Counts
    from disjoint voxel subsets add, which the sector protocol relies on.
    """

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    geo_tp: int
    geo_fp: int
    geo_fn: int

    @property
    def num_classes(self) -> int:
        return self.tp.size

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot add counts with different class counts")
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            geo_tp=self.geo_tp + other.geo_tp,
            geo_fp=self.geo_fp + other.geo_fp,
            geo_fn=self.geo_fn + other.geo_fn,
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionCounts)
            and np.array_equal(self.tp, other.tp)
            and np.array_equal(self.fp, other.fp)
            and np.array_equal(self.fn, other.fn)
            and (self.geo_tp, self.geo_fp, self.geo_fn)
            == (other.geo_tp, other.geo_fp, other.geo_fn)
        )


def _check_compatible(pred: SemanticGrid, gt: SemanticGrid):
    if pred.spec.dims != gt.spec.dims:
        raise ValueError("prediction and ground truth grids differ in dims")
    if not np.allclose(pred.spec.origin, gt.spec.origin) or not np.allclose(
        pred.spec.extent, gt.spec.extent
    ):
        raise ValueError("prediction and ground truth grids differ in geometry")
    if pred.num_classes != gt.num_classes:
        raise ValueError("prediction and ground truth differ in class count")


def confusion(
    pred: SemanticGrid, gt: SemanticGrid, mask: np.ndarray | None = None
) -> ConfusionCounts:
    """Confusion counts of two label grids, optionally restricted to a mask."""
    _check_compatible(pred, gt)
    p = pred.to_labels().labels
    g = gt.to_labels().labels
    if mask is not None:
        p = p[mask]
        g = g[mask]
    c = pred.num_classes
    tp = np.zeros(c, dtype=np.int64)
    fp = np.zeros(c, dtype=np.int64)
    fn = np.zeros(c, dtype=np.int64)
    for cls in range(1, c + 1):
        pc = p == cls
        gc = g == cls
        tp[cls - 1] = np.count_nonzero(pc & gc)
        fp[cls - 1] = np.count_nonzero(pc & ~gc)
        fn[cls - 1] = np.count_nonzero(~pc & gc)
    occ_p = p > 0
    occ_g = g > 0
    return ConfusionCounts(
        tp=tp,
        fp=fp,
        fn=fn,
        geo_tp=int(np.count_nonzero(occ_p & occ_g)),
        geo_fp=int(np.count_nonzero(occ_p & ~occ_g)),
        geo_fn=int(np.count_nonzero(~occ_p & occ_g)),
    )


def iou(counts: ConfusionCounts, cls: int) -> float:
    """IoU of semantic class cls (1..C); 0 when the class never occurs."""
    if not 1 <= cls <= counts.num_classes:
        raise ValueError(f"class must lie in 1..{counts.num_classes}")
    i = cls - 1
    denom = counts.tp[i] + counts.fp[i] + counts.fn[i]
    if denom == 0:
        return 0.0
    return float(counts.tp[i]) / float(denom)


def geometry_iou(counts: ConfusionCounts) -> float:
    """IoU of the binarized occupied/empty masks; NaN when nothing occupied."""
    denom = counts.geo_tp + counts.geo_fp + counts.geo_fn
    if denom == 0:
        return math.nan
    return counts.geo_tp / denom


def miou(counts: ConfusionCounts) -> float:
    """Mean IoU over semantic classes present in prediction or ground truth.

    Classes absent from both sides are excluded from the mean; a class
    present in ground truth but never predicted contributes 0. NaN when no
    semantic class occurs at all.
    """
    denom = counts.tp + counts.fp + counts.fn
    present = denom > 0
    if not np.any(present):
        return math.nan
    vals = counts.tp[present] / denom[present]
    return float(np.mean(vals))


def _horizontal_distance_grid(pred: SemanticGrid, origin) -> np.ndarray:
    spec = pred.spec
    origin = np.asarray(origin, dtype=np.float64)
    xs = spec.axis_centers(0) - origin[0]
    ys = spec.axis_centers(1) - origin[1]
    d = np.sqrt(xs[:, None] ** 2 + ys[None, :] ** 2)
    return np.broadcast_to(d[:, :, None], spec.dims)


def range_mask(pred: SemanticGrid, origin, r_lo: float, r_hi: float) -> np.ndarray:
    """Boolean voxel mask: horizontal center distance in the half-open [r_lo, r_hi)."""
    d = _horizontal_distance_grid(pred, origin)
    return (d >= r_lo) & (d < r_hi)


def range_masked_eval(
    pred: SemanticGrid,
    gt: SemanticGrid,
    mode: str,
    origin,
    radius: float | None = None,
    r_lo: float | None = None,
    r_hi: float | None = None,
) -> tuple[float, float]:
    """(geometry IoU, mIoU) over a radius disc or annular sector.

    mode 'radius' keeps voxels with horizontal distance < radius; mode
    'sector' keeps the half-open annulus [r_lo, r_hi). The half-open
    convention makes disjoint sector bands partition a disc exactly. Both
    metrics are NaN (undefined, never silently 0) when the mask is empty.
    """
    if not pred.spec.contains(origin):
        raise ValueError("origin must lie inside the grid")
    if mode == "radius":
        if radius is None or radius <= 0:
            raise ValueError("radius mode needs a positive radius")
        lo, hi = 0.0, float(radius)
    elif mode == "sector":
        if r_lo is None or r_hi is None or not 0 <= r_lo < r_hi:
            raise ValueError("sector mode needs 0 <= r_lo < r_hi")
        lo, hi = float(r_lo), float(r_hi)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    mask = range_mask(pred, origin, lo, hi)
    if not np.any(mask):
        return math.nan, math.nan
    counts = confusion(pred, gt, mask=mask)
    return geometry_iou(counts), miou(counts)
