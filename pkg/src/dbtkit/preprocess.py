"""Window-leveling, 2x downscaling and breast-region segmentation.

All morphology is 2D and per slice.  Components are 8-connected and the
erosion footprint is the integer disc ``dy**2 + dx**2 <= r**2``; pixels
outside the image count as background.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
from scipy import ndimage

from .dataset import Volume

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def window_level(volume: Volume) -> Volume:
    """Map raw intensities linearly to [0, 1] using the volume's window."""
    center, width = volume.meta.window_center, volume.meta.window_width
    if not width > 0:
        raise ValueError("window_width must be positive")
    lower = center - width / 2
    out = np.clip((volume.voxels.astype(np.float64) - lower) / width, 0.0, 1.0)
    return Volume(volume.meta, out)


def downscale_2x(image: np.ndarray) -> np.ndarray:
    """2x2 block mean; an odd trailing row or column is dropped."""
    image = np.asarray(image, dtype=np.float64)
    rows, cols = image.shape
    if rows < 2 or cols < 2:
        raise ValueError("downscale_2x needs at least a 2x2 image")
    r, c = rows // 2, cols // 2
    blocks = image[: 2 * r, : 2 * c].reshape(r, 2, c, 2)
    return blocks.mean(axis=(1, 3))


def downscale_volume(volume: Volume) -> Volume:
    voxels = np.stack([downscale_2x(s) for s in volume.voxels])
    meta = replace(
        volume.meta,
        rows=voxels.shape[1],
        cols=voxels.shape[2],
        scale_factor=volume.meta.scale_factor * 2,
    )
    return Volume(meta, voxels)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    return dy * dy + dx * dx <= r * r


def erode_nonzero(mask: np.ndarray, radius: int = 5) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = np.asarray(mask) != 0
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disc(radius), border_value=0)


def largest_connected_component(mask: np.ndarray) -> np.ndarray:
    """Keep the biggest 8-connected component (first in raster order on ties)."""
    mask = np.asarray(mask) != 0
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def breast_mask_slice(image: np.ndarray, radius: int = 5) -> np.ndarray:
    return largest_connected_component(erode_nonzero(image > 0, radius))


def breast_mask(volume: Volume, radius: int = 5, jobs: int = 1) -> np.ndarray:
    """Boolean (slices, rows, cols) breast mask of a window-leveled volume."""
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            slices = list(ex.map(lambda s: breast_mask_slice(s, radius), volume.voxels))
    else:
        slices = [breast_mask_slice(s, radius) for s in volume.voxels]
    return np.stack(slices)


def preprocess_volume(volume: Volume, radius: int = 5, downscale: bool = True,
                      jobs: int = 1) -> tuple[Volume, np.ndarray]:
    """Window-level, optionally downscale, and segment the breast."""
    leveled = window_level(volume)
    if downscale:
        leveled = downscale_volume(leveled)
    return leveled, breast_mask(leveled, radius, jobs)
