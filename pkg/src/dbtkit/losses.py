"""Objectness losses and the box localization loss.

Every loss takes the predicted probability ``p`` and the label ``y`` and
works elementwise on scalars or arrays.  ``p`` must lie strictly inside
(0, 1); use :func:`clamp` on raw network outputs first.  Gradients are
with respect to ``p``.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-7


def clamp(p, eps: float = EPS):
    return np.clip(p, eps, 1 - eps)


def _prepare(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie strictly inside (0, 1); clamp it first")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    positive = y == 1
    p_t = np.where(positive, p, 1 - p)
    # d p_t / d p
    sign = np.where(positive, 1.0, -1.0)
    return p_t, sign


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def bce(p, y):
    p_t, _ = _prepare(p, y)
    return _out(-np.log(p_t))


def bce_grad(p, y):
    p_t, sign = _prepare(p, y)
    return _out(-sign / p_t)


def weighted_bce(p, y, w_pos: float, w_neg: float):
    if not (w_pos > 0 and w_neg > 0):
        raise ValueError("weights must be positive")
    w = np.where(np.asarray(y) == 1, w_pos, w_neg)
    return _out(w * bce(p, y))


def weighted_bce_grad(p, y, w_pos: float, w_neg: float):
    if not (w_pos > 0 and w_neg > 0):
        raise ValueError("weights must be positive")
    w = np.where(np.asarray(y) == 1, w_pos, w_neg)
    return _out(w * bce_grad(p, y))


def prevalence_weights(labels) -> tuple[float, float]:
    """(w_pos, w_neg) = (negatives / positives, 1) over a labeled grid set."""
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0:
        raise ValueError("no positive cells; prevalence weight undefined")
    return n_neg / n_pos, 1.0


def focal(p, y, gamma: float = 2.0):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p_t, _ = _prepare(p, y)
    return _out(-((1 - p_t) ** gamma) * np.log(p_t))


def focal_grad(p, y, gamma: float = 2.0):
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p_t, sign = _prepare(p, y)
    q = 1 - p_t
    d_pt = -(q**gamma) / p_t
    if gamma != 0:
        d_pt = d_pt + gamma * q ** (gamma - 1) * np.log(p_t)
    return _out(sign * d_pt)


def _check_threshold(threshold):
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")


def reduced_focal(p, y, gamma: float = 2.0, threshold: float = 0.5):
    """Cross-entropy below the knee ``p_t < threshold``, scaled down above it.

    Above the knee the cross-entropy is multiplied by
    ``((1 - p_t) / (1 - threshold)) ** gamma``, which equals 1 at the knee.
    """
    _check_threshold(threshold)
    p_t, _ = _prepare(p, y)
    factor = np.where(p_t < threshold, 1.0, ((1 - p_t) / (1 - threshold)) ** gamma)
    return _out(-np.log(p_t) * factor)


def reduced_focal_grad(p, y, gamma: float = 2.0, threshold: float = 0.5):
    _check_threshold(threshold)
    p_t, sign = _prepare(p, y)
    k = (1 - p_t) / (1 - threshold)
    above = -(k**gamma) / p_t
    if gamma != 0:
        above = above + np.log(p_t) * gamma * k ** (gamma - 1) / (1 - threshold)
    d_pt = np.where(p_t < threshold, -1 / p_t, above)
    return _out(sign * d_pt)


def localization_mse(pred, gt):
    """Mean squared difference over the four box-code components."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return _out(np.mean(diff**2, axis=-1))


def localization_mse_grad(pred, gt):
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return diff * 2 / diff.shape[-1]


OBJECTNESS_LOSSES = ("bce", "weighted_bce", "focal", "reduced_focal")


def objectness_loss(name: str, p, y, *, gamma: float = 2.0, threshold: float = 0.5,
                    w_pos: float = 1.0, w_neg: float = 1.0):
    if name == "bce":
        return bce(p, y)
    if name == "weighted_bce":
        return weighted_bce(p, y, w_pos, w_neg)
    if name == "focal":
        return focal(p, y, gamma)
    if name == "reduced_focal":
        return reduced_focal(p, y, gamma, threshold)
    raise ValueError(f"unknown objectness loss {name!r}; expected one of {OBJECTNESS_LOSSES}")


def grid_loss(pred: np.ndarray, target: np.ndarray, name: str = "bce",
              localization_weight: float = 1.0, **params) -> float:
    """Detector loss over grid outputs of shape ``(..., 5, rows, cols)``.

    Objectness loss is averaged over all cells; localization MSE only over
    cells whose target objectness is 1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-3] != 5:
        raise ValueError("pred and target must share a (..., 5, rows, cols) shape")
    p = clamp(pred[..., 0, :, :])
    y = target[..., 0, :, :]
    obj = float(np.mean(objectness_loss(name, p, y, **params)))
    positive = y == 1
    if not positive.any():
        return obj
    codes_pred = np.moveaxis(pred[..., 1:, :, :], -3, -1)[positive]
    codes_gt = np.moveaxis(target[..., 1:, :, :], -3, -1)[positive]
    return obj + localization_weight * float(np.mean(localization_mse(codes_pred, codes_gt)))


def loss_table(points: int = 99, gamma: float = 2.0, threshold: float = 0.5) -> list[tuple[float, ...]]:
    """Rows ``(p_t, bce, weighted_bce, focal, reduced_focal)`` on an even p_t grid.

    Weighted cross-entropy is shown with unit weights, where it coincides
    with plain cross-entropy.
    """
    rows = []
    for p_t in np.linspace(0, 1, points + 2)[1:-1]:
        b = bce(p_t, 1)
        rows.append((float(p_t), b, weighted_bce(p_t, 1, 1.0, 1.0), focal(p_t, 1, gamma),
                     reduced_focal(p_t, 1, gamma, threshold)))
    return rows
