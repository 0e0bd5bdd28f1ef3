"""From per-slice grid outputs to final per-volume predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Box2D, Prediction, VolumeKey
from .gridcodec import GridSpec, decode_grid


@dataclass(frozen=True)
class MergeRule:
    max_score_ratio: float = 10.0
    min_iou: float = 0.5

    def __post_init__(self):
        if self.max_score_ratio < 1:
            raise ValueError("max_score_ratio must be >= 1")
        if not 0 < self.min_iou <= 1:
            raise ValueError("min_iou must be in (0, 1]")


def iou(a: Box2D, b: Box2D) -> float:
    iw = min(a.x + a.width, b.x + b.width) - max(a.x, b.x)
    ih = min(a.y + a.height, b.y + b.height) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def half_ranges(slices: int) -> list[range]:
    """Split ``range(slices)`` in two; the first half takes the odd slice."""
    first = math.ceil(slices / 2)
    return [r for r in (range(0, first), range(first, slices)) if len(r)]


def average_grids(grids: np.ndarray) -> np.ndarray:
    """Arithmetic per-cell mean of a ``(slices, 5, rows, cols)`` stack.

    Objectness is averaged as a probability, not as a logit.
    """
    return np.asarray(grids, dtype=np.float64).mean(axis=0)


def combine_volume_predictions(per_slice_grids: np.ndarray, spec: GridSpec,
                               score_threshold: float = 0.0,
                               volume_key: VolumeKey | None = None,
                               scale_factor: int = 1) -> list[Prediction]:
    grids = np.asarray(per_slice_grids, dtype=np.float64)
    if grids.ndim != 4 or len(grids) < 1:
        raise ValueError("expected a non-empty (slices, 5, rows, cols) stack")
    preds = []
    for half in half_ranges(len(grids)):
        middle = (half.start + half.stop - 1) // 2
        preds += decode_grid(average_grids(grids[half.start:half.stop]), spec, score_threshold,
                             volume_key, middle, scale_factor)
    return preds


def box_pixel_bounds(box: Box2D) -> tuple[int, int, int, int]:
    """Half-open pixel index ranges (r0, r1, c0, c1) of pixels whose center lies in the box."""
    c0 = math.ceil(box.x - 0.5)
    c1 = math.ceil(box.x + box.width - 0.5)
    r0 = math.ceil(box.y - 0.5)
    r1 = math.ceil(box.y + box.height - 0.5)
    return r0, r1, c0, c1


def mask_coverage(box: Box2D, mask_slice: np.ndarray) -> float:
    """Fraction of pixel centers inside ``box`` that are mask pixels.

    Pixels beyond the image count as outside the mask.  A box too small to
    contain any pixel center is judged by the pixel under its center.
    """
    rows, cols = mask_slice.shape
    r0, r1, c0, c1 = box_pixel_bounds(box)
    total = (r1 - r0) * (c1 - c0)
    if total <= 0:
        cx, cy = box.center
        r, c = math.floor(cy), math.floor(cx)
        return float(0 <= r < rows and 0 <= c < cols and bool(mask_slice[r, c]))
    inside = mask_slice[max(r0, 0):max(min(r1, rows), 0), max(c0, 0):max(min(c1, cols), 0)]
    return float(np.count_nonzero(inside)) / total


def filter_by_breast_mask(preds: list[Prediction], mask: np.ndarray,
                          min_coverage: float = 0.5) -> list[Prediction]:
    """Drop boxes with less than half of their pixels in the breast.

    ``mask`` is a ``(slices, rows, cols)`` stack on the same pixel grid as
    the predictions; each box is checked against the slice nearest its
    center slice.
    """
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    kept = []
    for p in preds:
        z = min(max(p.center_slice, 0), len(mask) - 1)
        if mask_coverage(p.box, mask[z]) >= min_coverage:
            kept.append(p)
    return kept


def ratio_nms(preds: list[Prediction], rule: MergeRule = MergeRule()) -> list[Prediction]:
    """Merge overlapping boxes of comparable confidence.

    Two boxes merge when their score ratio (max / min) is below
    ``max_score_ratio`` and their IoU exceeds ``min_iou``.  The merged box
    is the higher-scoring one, which keeps its score.  Pairs are processed
    highest score first, so a box that has been merged away never absorbs
    another.  Equal scores keep input order.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    alive = [True] * len(order)
    kept = []
    for a, i in enumerate(order):
        if not alive[a]:
            continue
        top = preds[i]
        kept.append(top)
        for b in range(a + 1, len(order)):
            if not alive[b]:
                continue
            other = preds[order[b]]
            if other.volume_key != top.volume_key:
                continue
            if top.score / other.score < rule.max_score_ratio and iou(top.box, other.box) > rule.min_iou:
                alive[b] = False
    return kept


def postprocess_volume(per_slice_grids: np.ndarray, mask: np.ndarray, spec: GridSpec,
                       volume_key: VolumeKey, scale_factor: int = 1,
                       score_threshold: float = 0.0,
                       rule: MergeRule = MergeRule()) -> list[Prediction]:
    """Half-split averaging, breast filtering and NMS; returns original-pixel predictions."""
    preds = combine_volume_predictions(per_slice_grids, spec, score_threshold, volume_key,
                                       scale_factor)
    preds = filter_by_breast_mask(preds, mask)
    return [p.to_original() for p in ratio_nms(preds, rule)]
