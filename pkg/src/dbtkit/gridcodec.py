"""Cell grid / anchor box geometry of the single-stage detector.

A grid output is an array of shape ``(5, grid_rows, grid_cols)`` with
channels ``objectness, dx, dy, sw, sh``:

* ``dx, dy`` -- box center offset from the cell center, in cell units;
* ``sw, sh`` -- natural log of box width / height over the anchor size.

Stacks of per-slice outputs have shape ``(slices, 5, grid_rows, grid_cols)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Box2D, Prediction, VolumeKey

CHANNELS = ("objectness", "dx", "dy", "sw", "sh")
OBJECTNESS, DX, DY, SW, SH = range(5)


@dataclass(frozen=True)
class GridSpec:
    grid_rows: int
    grid_cols: int
    cell_size: int = 96
    anchor_size: int = 256

    def __post_init__(self):
        if self.cell_size <= 0 or self.anchor_size <= 0:
            raise ValueError("cell_size and anchor_size must be positive")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValueError("grid must have at least one cell")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid_rows, self.grid_cols)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.grid_rows * self.cell_size, self.grid_cols * self.cell_size)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        """(x, y) pixel coordinates of a cell center."""
        half = self.cell_size / 2
        return (col * self.cell_size + half, row * self.cell_size + half)


def pad_to_grid(rows: int, cols: int, cell_size: int = 96,
                anchor_size: int = 256) -> tuple[tuple[int, int], GridSpec]:
    if rows < 1 or cols < 1:
        raise ValueError("image dimensions must be >= 1")
    grid_rows, grid_cols = -(-rows // cell_size), -(-cols // cell_size)
    spec = GridSpec(grid_rows, grid_cols, cell_size, anchor_size)
    return spec.image_shape, spec


def pad_image(image: np.ndarray, cell_size: int = 96) -> np.ndarray:
    """Zero-pad a 2D image at the bottom/right up to a multiple of the cell size."""
    (rows, cols), _ = pad_to_grid(*image.shape, cell_size=cell_size)
    out = np.zeros((rows, cols), dtype=image.dtype)
    out[: image.shape[0], : image.shape[1]] = image
    return out


def encode_box(box: Box2D, spec: GridSpec) -> tuple[tuple[int, int], float, float, float, float]:
    """Return ``((row, col), dx, dy, sw, sh)`` for the cell holding the box center."""
    if not (box.width > 0 and box.height > 0):
        raise ValueError("box dimensions must be positive")
    cx, cy = box.center
    rows, cols = spec.image_shape
    if not (0 <= cx < cols and 0 <= cy < rows):
        raise ValueError(f"box center ({cx}, {cy}) outside the {rows}x{cols} padded image")
    row, col = int(cy // spec.cell_size), int(cx // spec.cell_size)
    ccx, ccy = spec.cell_center(row, col)
    dx = (cx - ccx) / spec.cell_size
    dy = (cy - ccy) / spec.cell_size
    sw = math.log(box.width / spec.anchor_size)
    sh = math.log(box.height / spec.anchor_size)
    return (row, col), dx, dy, sw, sh


def decode_cell(spec: GridSpec, row: int, col: int, dx: float, dy: float,
                sw: float, sh: float) -> Box2D:
    ccx, ccy = spec.cell_center(row, col)
    return Box2D.from_center(
        ccx + dx * spec.cell_size,
        ccy + dy * spec.cell_size,
        spec.anchor_size * math.exp(sw),
        spec.anchor_size * math.exp(sh),
    )


def encode_targets(boxes, spec: GridSpec) -> np.ndarray:
    """Training target grid: objectness 1 and box code at each box's cell.

    When two boxes share a cell the later one wins (one box per cell).
    """
    target = np.zeros((5,) + spec.shape)
    for box in boxes:
        (row, col), dx, dy, sw, sh = encode_box(box, spec)
        target[:, row, col] = (1.0, dx, dy, sw, sh)
    return target


def decode_grid(out: np.ndarray, spec: GridSpec, score_threshold: float,
                volume_key: VolumeKey | None = None, center_slice: int = 0,
                scale_factor: int = 1) -> list[Prediction]:
    """Boxes for every cell with objectness >= threshold, in raster order.

    Coordinates stay in the grid's pixel units; ``scale_factor`` records how
    to get back to original pixels.  Cells with zero objectness are skipped
    since predictions need a positive score.
    """
    if not 0 <= score_threshold <= 1:
        raise ValueError("score_threshold must be in [0, 1]")
    out = np.asarray(out, dtype=np.float64)
    if out.shape != (5,) + spec.shape:
        raise ValueError(f"grid output shape {out.shape} != {(5,) + spec.shape}")
    key = volume_key or VolumeKey("", "", "L", "CC")
    objectness = out[OBJECTNESS]
    preds = []
    for row, col in zip(*np.nonzero((objectness >= score_threshold) & (objectness > 0))):
        dx, dy, sw, sh = out[1:, row, col]
        box = decode_cell(spec, int(row), int(col), dx, dy, sw, sh)
        preds.append(Prediction(key, box, center_slice, min(float(objectness[row, col]), 1.0),
                                scale_factor))
    return preds


def positive_slice_span(box: Box2D, validation_mode: bool = False) -> int:
    """Number of slices a ground-truth box spans; round half to even, at least 1."""
    if not (box.width > 0 and box.height > 0):
        raise ValueError("box dimensions must be positive")
    span = max(1, round(math.sqrt((box.width + box.height) / 2)))
    if validation_mode:
        span = max(1, round(span / 2))
    return span


def slice_range(center_slice: int, span: int) -> range:
    """Slices covered by a span centered on ``center_slice``; even spans extend after it."""
    start = center_slice - (span - 1) // 2
    return range(start, start + span)


def sample_training_crop(rows: int, cols: int, gt_box: Box2D, rng: np.random.Generator,
                         crop_rows: int = 1056, crop_cols: int = 672) -> tuple[int, int]:
    """Uniform random integer crop origin ``(x, y)`` whose crop contains ``gt_box``.

    The box is measured by the pixels it touches, so a fractional box needs
    its snapped extent to fit the crop.
    """
    snapped_w = math.ceil(gt_box.x + gt_box.width) - math.floor(gt_box.x)
    snapped_h = math.ceil(gt_box.y + gt_box.height) - math.floor(gt_box.y)
    if snapped_w > crop_cols or snapped_h > crop_rows:
        raise ValueError(
            f"ground-truth box {gt_box.width}x{gt_box.height} does not fit a "
            f"{crop_cols}x{crop_rows} crop"
        )
    if rows < crop_rows or cols < crop_cols:
        raise ValueError("image smaller than the crop; pad it first")
    x_lo = max(0, math.ceil(gt_box.x + gt_box.width - crop_cols))
    x_hi = min(cols - crop_cols, math.floor(gt_box.x))
    y_lo = max(0, math.ceil(gt_box.y + gt_box.height - crop_rows))
    y_hi = min(rows - crop_rows, math.floor(gt_box.y))
    if x_lo > x_hi or y_lo > y_hi:
        raise ValueError("no crop inside the image contains the ground-truth box")
    return int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1))
