"""FROC evaluation, sensitivity at fixed false-positive rates, model selection."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .dataset import GroundTruthLesion, Prediction, VolumeMeta

UNITS = ("volume", "breast", "slice")


@dataclass(frozen=True)
class MatchCriteria:
    """Detection rule: close enough in-plane and within the slice window.

    ``diagonal_of`` selects whose box diagonal sets the in-plane tolerance,
    the ground truth's (default) or the prediction's.
    """

    min_distance_px: float = 100.0
    z_fraction: float = 0.25
    diagonal_of: str = "gt"

    def __post_init__(self):
        if not self.min_distance_px > 0:
            raise ValueError("min_distance_px must be positive")
        if not 0 < self.z_fraction <= 0.5:
            raise ValueError("z_fraction must be in (0, 0.5]")
        if self.diagonal_of not in ("gt", "pred"):
            raise ValueError("diagonal_of must be 'gt' or 'pred'")


class FrocPoint(NamedTuple):
    threshold: float
    avg_fp: float
    sensitivity: float


@dataclass(frozen=True)
class FrocCurve:
    points: tuple[FrocPoint, ...]
    unit: str = "volume"

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        lines = [f"# {h}\n" for h in header_lines]
        lines.append("threshold,avg_fp,sensitivity\n")
        lines += [f"{t!r},{fp!r},{s!r}\n" for t, fp, s in self.points]
        return "".join(lines)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    sens_at_2fp: float
    sens_at_1fp: float


def center_distance(pred: Prediction, gt: GroundTruthLesion) -> float:
    (px, py), (gx, gy) = pred.box.center, gt.box.center
    return math.hypot(px - gx, py - gy)


def is_match(pred: Prediction, gt: GroundTruthLesion, total_slices: int,
             c: MatchCriteria = MatchCriteria()) -> bool:
    """True if ``pred`` detects ``gt``; both must be in original pixel units."""
    if pred.scale_factor != 1:
        raise ValueError("prediction is on a downscaled grid; call to_original() first")
    if pred.volume_key != gt.volume_key:
        return False
    diagonal = gt.box.diagonal if c.diagonal_of == "gt" else pred.box.diagonal
    if center_distance(pred, gt) >= max(diagonal / 2, c.min_distance_px):
        return False
    return abs(pred.center_slice - gt.center_slice) <= c.z_fraction * total_slices


def match_predictions(preds: Sequence[Prediction], gts: Sequence[GroundTruthLesion],
                      slices: dict, c: MatchCriteria = MatchCriteria()) -> list[tuple[int, int | None]]:
    """Greedy one-to-one matching, highest score first.

    Returns ``(pred_index, gt_index or None)`` in processing order (score
    descending, input order on ties).  Each prediction takes the nearest
    still-unclaimed ground truth it matches.  Because the processing order
    only depends on scores, the matching at any threshold is a prefix of
    this list.
    """
    gts_by_volume = defaultdict(list)
    for j, g in enumerate(gts):
        gts_by_volume[g.volume_key].append(j)
    claimed = set()
    result = []
    for i in sorted(range(len(preds)), key=lambda i: -preds[i].score):
        p = preds[i]
        best = None
        for j in gts_by_volume.get(p.volume_key, ()):
            if j in claimed or not is_match(p, gts[j], slices[p.volume_key], c):
                continue
            d = center_distance(p, gts[j])
            if best is None or d < best[0]:
                best = (d, j)
        if best is not None:
            claimed.add(best[1])
        result.append((i, None if best is None else best[1]))
    return result


def froc_curve(preds: Sequence[Prediction], gts: Sequence[GroundTruthLesion],
               volumes: Sequence[VolumeMeta], c: MatchCriteria = MatchCriteria(),
               unit: str = "volume") -> FrocCurve:
    """Sweep every distinct score as a threshold, highest first.

    ``unit`` picks the false-positive denominator and the sensitivity
    numerator: ``volume`` and ``slice`` count lesions (over volumes or over
    all slices); ``breast`` credits a breast once any lesion on any of its
    views is detected and divides false positives by the number of breasts.
    """
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {UNITS}")
    slices = {}
    for v in volumes:
        if v.key in slices:
            raise ValueError(f"volume {v.key} listed twice")
        slices[v.key] = v.slices
    for item in list(preds) + list(gts):
        if item.volume_key not in slices:
            raise ValueError(f"{item.volume_key} is not among the listed volumes")
    if not gts:
        raise ValueError("no ground-truth lesions; sensitivity is undefined")

    if unit == "breast":
        breasts = {k.breast for k in slices}
        positives = {g.volume_key.breast for g in gts}
        denominator = len(breasts)
        n_positive = len(positives)

        def credit(j):
            return gts[j].volume_key.breast
    else:
        denominator = len(slices) if unit == "volume" else sum(slices.values())
        n_positive = len(gts)

        def credit(j):
            return j

    order = match_predictions(preds, gts, slices, c)
    points = []
    detected = set()
    fps = 0
    for pos, (i, j) in enumerate(order):
        if j is None:
            fps += 1
        else:
            detected.add(credit(j))
        score = preds[i].score
        # emit once all predictions tied at this score are active
        if pos + 1 == len(order) or preds[order[pos + 1][0]].score != score:
            points.append(FrocPoint(score, fps / denominator, len(detected) / n_positive))
    if not points:
        points.append(FrocPoint(math.inf, 0.0, 0.0))
    return FrocCurve(tuple(points), unit)


def breast_froc(preds, gts, volumes, c: MatchCriteria = MatchCriteria()) -> FrocCurve:
    return froc_curve(preds, gts, volumes, c, unit="breast")


def sensitivity_at(curve: FrocCurve, fp_budget: float) -> float:
    """Step-function reading: sensitivity of the last point within the budget."""
    if fp_budget < 0:
        raise ValueError("fp_budget must be >= 0")
    best = 0.0
    for point in curve.points:
        if point.avg_fp <= fp_budget:
            best = point.sensitivity
    return best


def select_model(records: Sequence[EpochRecord]) -> EpochRecord:
    """Best sensitivity at 2 FP, then at 1 FP, then the earliest epoch."""
    if not records:
        raise ValueError("no epoch records")
    return min(records, key=lambda r: (-r.sens_at_2fp, -r.sens_at_1fp, r.epoch))


def early_stop(history: Sequence[float], patience: int = 25) -> bool:
    """True once the best value (first occurrence) is more than ``patience`` epochs old."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not history:
        return False
    best_index = max(range(len(history)), key=lambda i: (history[i], -i))
    return len(history) - 1 - best_index > patience
