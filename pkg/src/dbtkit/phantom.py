"""Synthetic volumes, lesions and detector outputs for exercising the pipeline.

All randomness comes from numpy's PCG64 generator.  A volume set uses one
stream per volume, seeded from ``(seed, volume_index)``, so results do not
depend on generation order or worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Box2D, GroundTruthLesion, Prediction, Volume, VolumeKey, VolumeMeta
from .froceval import MatchCriteria, is_match
from .gridcodec import positive_slice_span
from .postprocess import iou, mask_coverage

VIEW_CYCLE = (("L", "CC"), ("L", "MLO"), ("R", "CC"), ("R", "MLO"))


@dataclass(frozen=True)
class PhantomParams:
    slices: int = 16
    rows: int = 384
    cols: int = 256
    radius_fraction: float = 0.9
    background_intensity: float = 1200.0
    noise_std: float = 40.0
    lesion_count: int = 1
    lesion_size_range: tuple[float, float] = (24.0, 64.0)
    lesion_contrast: float = 600.0
    margin_px: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if min(self.slices, self.rows, self.cols) < 1:
            raise ValueError("phantom dimensions must be >= 1")
        if not 0 < self.radius_fraction <= 1:
            raise ValueError("radius_fraction must be in (0, 1]")
        lo, hi = self.lesion_size_range
        if not 0 < lo <= hi:
            raise ValueError("lesion_size_range must satisfy 0 < low <= high")
        if self.lesion_count < 0:
            raise ValueError("lesion_count must be >= 0")
        if self.lesion_count and hi + 2 * self.margin_px > self.radius:
            raise ValueError("lesions cannot fit inside the breast region")
        if self.background_intensity < 1 or self.background_intensity + self.lesion_contrast > 65535:
            raise ValueError("intensities must stay within uint16")

    @property
    def radius(self) -> float:
        """Breast radius in pixels; the semicircle sits on the left image edge."""
        return self.radius_fraction * min(self.rows / 2, self.cols)

    @property
    def chest_center(self) -> tuple[float, float]:
        return (0.0, self.rows / 2)


@dataclass(frozen=True)
class DetectorProfile:
    tp_rate: float = 0.7
    fp_per_volume: float = 2.0
    center_jitter_px: float = 10.0
    size_jitter: float = 0.1
    tp_score: tuple[float, float] = (5.0, 2.0)
    fp_score: tuple[float, float] = (2.0, 5.0)
    fp_size_range: tuple[float, float] = (24.0, 64.0)

    def __post_init__(self):
        if not 0 <= self.tp_rate <= 1:
            raise ValueError("tp_rate must be in [0, 1]")
        if self.fp_per_volume < 0:
            raise ValueError("fp_per_volume must be >= 0")
        if self.center_jitter_px < 0:
            raise ValueError("center_jitter_px must be >= 0")
        # Beta(a, b) has mean a / (a + b); TP scores must run higher than FP scores.
        tp_mean = self.tp_score[0] / sum(self.tp_score)
        fp_mean = self.fp_score[0] / sum(self.fp_score)
        if min(self.tp_score + self.fp_score) <= 0 or tp_mean <= fp_mean:
            raise ValueError("score distributions must be Beta(a, b) with TP mean above FP mean")


def _inside_breast(box: Box2D, p: PhantomParams) -> bool:
    cx, cy = p.chest_center
    if box.x < p.margin_px or box.y < 0 or box.y + box.height > p.rows:
        return False
    corners = ((box.x, box.y), (box.x + box.width, box.y),
               (box.x, box.y + box.height), (box.x + box.width, box.y + box.height))
    return all(math.hypot(x - cx, y - cy) <= p.radius - p.margin_px for x, y in corners)


def _disjoint(a: Box2D, b: Box2D, gap: float) -> bool:
    return (a.x + a.width + gap <= b.x or b.x + b.width + gap <= a.x
            or a.y + a.height + gap <= b.y or b.y + b.height + gap <= a.y)


def generate_phantom(p: PhantomParams, key: VolumeKey = VolumeKey("P0000", "S0000", "L", "CC"),
                     rng: np.random.Generator | None = None,
                     max_tries: int = 1000) -> tuple[Volume, list[GroundTruthLesion]]:
    """Semicircular breast with ellipsoidal lesions; GT boxes are tight at the central slice."""
    rng = np.random.default_rng(p.seed) if rng is None else rng
    z, r, c = np.ogrid[: p.slices, : p.rows, : p.cols]
    cx, cy = p.chest_center
    breast = ((c + 0.5 - cx) ** 2 + (r + 0.5 - cy) ** 2 <= p.radius**2)
    noise = rng.normal(0.0, p.noise_std, size=(p.slices, p.rows, p.cols))
    voxels = np.where(breast, np.maximum(p.background_intensity + noise, 1.0), 0.0)

    lesions: list[GroundTruthLesion] = []
    boxes: list[Box2D] = []
    lo, hi = p.lesion_size_range
    for _ in range(p.lesion_count):
        for _ in range(max_tries):
            w, h = rng.uniform(lo, hi, size=2)
            # integer-centered ellipse so the tight pixel box is symmetric
            ex = int(rng.integers(0, p.cols))
            ey = int(rng.integers(0, p.rows))
            ax, ay = max(1, int(w // 2)), max(1, int(h // 2))
            box = Box2D(ex - ax, ey - ay, 2 * ax + 1, 2 * ay + 1)
            if _inside_breast(box, p) and all(_disjoint(box, b, p.margin_px) for b in boxes):
                break
        else:
            raise RuntimeError(f"could not place {p.lesion_count} non-overlapping lesions")
        span = positive_slice_span(box)
        az = max(span / 2, 0.5)
        ez = int(rng.integers(0, p.slices))
        blob = ((c - ex) / ax) ** 2 + ((r - ey) / ay) ** 2 + ((z - ez) / az) ** 2 <= 1
        voxels = np.where(blob, voxels + p.lesion_contrast, voxels)
        boxes.append(box)
        kind = "mass" if rng.random() < 0.75 else "architectural_distortion"
        cls = "cancer" if rng.random() < 0.45 else "benign"
        lesions.append(GroundTruthLesion(key, box, ez, cls, kind))

    meta = VolumeMeta(*key, window_center=2048.0, window_width=4096.0,
                      slices=p.slices, rows=p.rows, cols=p.cols)
    return Volume(meta, np.rint(voxels).astype(np.uint16)), lesions


def volume_key_for(index: int) -> VolumeKey:
    """Four views per study, one study per patient."""
    patient = index // 4
    lat, view = VIEW_CYCLE[index % 4]
    return VolumeKey(f"P{patient:04d}", f"S{patient:04d}", lat, view)


def generate_phantom_set(n_volumes: int, p: PhantomParams):
    """``n_volumes`` phantoms; volume i uses the stream seeded by ``(p.seed, i)``."""
    return [
        generate_phantom(p, volume_key_for(i), np.random.default_rng([p.seed, i]))
        for i in range(n_volumes)
    ]


def _beta_score(rng, ab) -> float:
    return float(min(max(rng.beta(*ab), 1e-6), 1.0))


def _simulate_volume(meta: VolumeMeta, gts: list[GroundTruthLesion], d: DetectorProfile,
                     rng: np.random.Generator, c: MatchCriteria, mask, mask_scale: int,
                     max_tries: int) -> list[Prediction]:
    key = meta.key
    preds: list[Prediction] = []
    for g in gts:
        if rng.random() >= d.tp_rate:
            continue
        tolerance = max(g.box.diagonal / 2, c.min_distance_px)
        radius = min(d.center_jitter_px, 0.9 * tolerance) * math.sqrt(rng.random())
        angle = rng.uniform(0, 2 * math.pi)
        gx, gy = g.box.center
        w = g.box.width * math.exp(rng.normal(0, d.size_jitter))
        h = g.box.height * math.exp(rng.normal(0, d.size_jitter))
        dz_max = int(math.floor(c.z_fraction * meta.slices / 2))
        z = int(np.clip(g.center_slice + rng.integers(-dz_max, dz_max + 1), 0, meta.slices - 1))
        box = Box2D.from_center(gx + radius * math.cos(angle), gy + radius * math.sin(angle), w, h)
        preds.append(Prediction(key, box, z, _beta_score(rng, d.tp_score)))

    lo, hi = d.fp_size_range
    for _ in range(int(rng.poisson(d.fp_per_volume))):
        for _ in range(max_tries):
            z = int(rng.integers(0, meta.slices))
            w, h = rng.uniform(lo, hi, size=2)
            if mask is not None:
                candidates = np.argwhere(mask[z])
                if not len(candidates):
                    continue
                row, col = candidates[rng.integers(0, len(candidates))]
                cx, cy = (col + 0.5) * mask_scale, (row + 0.5) * mask_scale
            else:
                cx, cy = rng.uniform(0, meta.cols), rng.uniform(0, meta.rows)
            box = Box2D.from_center(cx, cy, w, h)
            candidate = Prediction(key, box, z, 1.0)
            if mask is not None and mask_coverage(box.scaled(1 / mask_scale), mask[z]) < 0.9:
                continue
            if any(is_match(candidate, g, meta.slices, c) for g in gts):
                continue
            if any(iou(box, q.box) > 0 for q in preds):
                continue
            preds.append(Prediction(key, box, z, _beta_score(rng, d.fp_score)))
            break
        else:
            raise RuntimeError(f"could not place a false positive in volume {key}")
    return preds


def simulate_detector(gts: list[GroundTruthLesion], volumes: list[VolumeMeta], d: DetectorProfile,
                      seed: int, c: MatchCriteria = MatchCriteria(), masks: dict | None = None,
                      mask_scale: int = 1, max_tries: int = 1000) -> list[Prediction]:
    """Predictions (original pixels) mimicking a detector with known rates.

    Each lesion is found with probability ``tp_rate`` by a box whose center
    stays within the match tolerance.  Each volume gets Poisson-many false
    positives placed where they match no lesion and overlap no other box.
    If ``masks`` maps volume keys to breast-mask stacks (on a grid
    ``mask_scale`` times coarser), false positives are kept inside the mask.
    """
    by_volume: dict[VolumeKey, list[GroundTruthLesion]] = {}
    for g in gts:
        by_volume.setdefault(g.volume_key, []).append(g)
    preds = []
    for i, meta in enumerate(volumes):
        rng = np.random.default_rng([seed, i])
        mask = None if masks is None else masks.get(meta.key)
        preds += _simulate_volume(meta, by_volume.get(meta.key, []), d, rng, c, mask,
                                  mask_scale, max_tries)
    return preds
