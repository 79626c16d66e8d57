"""Localization-map post-processing: normalize, threshold, box, upsample."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class BBox(NamedTuple):
    """Axis-aligned pixel box, half-open: covers columns ``[x1, x2)`` and rows ``[y1, y2)``."""

    x1: int
    y1: int
    x2: int
    y2: int

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def is_valid(self, width: int | None = None, height: int | None = None) -> bool:
        ok = 0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2
        if width is not None:
            ok = ok and self.x2 <= width
        if height is not None:
            ok = ok and self.y2 <= height
        return ok


def normalize_map(raw) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map maps to all zeros."""
    m = np.asarray(raw, dtype=np.float64)
    if m.size == 0:
        raise InputError("cannot normalize an empty map")
    lo, hi = m.min(), m.max()
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise InputError("map contains non-finite values")
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def object_mask(normalized, delta: float) -> np.ndarray:
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {delta}")
    return np.asarray(normalized) > delta


def largest_component_bbox(mask) -> BBox | None:
    """Tight box around the largest 4-connected foreground component.

    Equal-sized components are resolved in favour of the one whose first
    pixel comes earliest in row-major order.  Returns ``None`` for an empty mask.
    """
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR_CONNECTED)
    if count == 0:
        return None
    # ndimage numbers components in row-major order of their first pixel,
    # so argmax's first-index rule gives the required tie-break.
    sizes = np.bincount(labels.ravel())[1:]
    winner = int(sizes.argmax()) + 1
    rows, cols = ndimage.find_objects(labels, max_label=winner)[winner - 1]
    return BBox(cols.start, rows.start, cols.stop, rows.stop)


def upsample_bilinear(m, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and border clamping."""
    src = np.asarray(m, dtype=np.float64)
    if src.ndim != 2 or min(src.shape) < 1:
        raise InputError(f"expected a non-empty 2-D map, got shape {src.shape}")
    if out_h < 1 or out_w < 1:
        raise InputError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = src.shape
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def _axis_weights(n_in: int, n_out: int):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def box_from_map(normalized_full, tau: float) -> BBox | None:
    return largest_component_bbox(object_mask(normalized_full, tau))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two half-open pixel boxes."""
    for box in (a, b):
        if not (box.x1 < box.x2 and box.y1 < box.y2):
            raise InputError(f"degenerate box {tuple(box)}")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0) * max(ih, 0)
    return inter / (a.area + b.area - inter)


def localization_hit(box: BBox | None, gt_boxes: Sequence[BBox], min_iou: float = 0.5) -> bool:
    """A box counts when it overlaps some ground-truth box by IoU strictly above ``min_iou``."""
    if box is None:
        return False
    return any(iou(box, g) > min_iou for g in gt_boxes)


def sweep_threshold(maps_with_gt, grid: Sequence[float]) -> tuple[float, dict[float, float]]:
    """Pick the box-binarization threshold with the lowest Gt-known error.

    ``maps_with_gt`` yields ``(normalized full-size map, gt boxes)`` pairs.
    Returns ``(best_tau, {tau: error_percent})``; ties go to the smaller tau.
    """
    items = list(maps_with_gt)
    if not items:
        raise InputError("threshold sweep needs at least one map")
    taus = sorted(float(t) for t in grid)
    if not taus:
        raise InputError("threshold grid is empty")
    for t in taus:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"threshold {t} outside (0, 1)")
    errors = {}
    for t in taus:
        misses = sum(not localization_hit(box_from_map(m, t), gts) for m, gts in items)
        errors[t] = 100.0 * misses / len(items)
    best = min(taus, key=lambda t: (errors[t], t))
    return best, errors
