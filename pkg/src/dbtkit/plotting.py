"""Figures written next to the CSV outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .froceval import FrocCurve  # noqa: E402

UNIT_LABELS = {"volume": "per DBT volume", "breast": "per breast", "slice": "per slice"}
LOSS_LABELS = ("binary cross-entropy", "weighted binary cross-entropy", "focal loss",
               "reduced focal loss")

STYLE = {
    "figure.figsize": (5.0, 3.8),
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or version strings, so identical inputs give identical files
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_froc(curves: dict[str, FrocCurve], path, fp_max: float | None = None,
              budgets=(1.0, 2.0)):
    """Step plot of one or more FROC curves."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        unit = "volume"
        xmax = 0.0
        for label, curve in curves.items():
            unit = curve.unit
            fps = [0.0] + [p.avg_fp for p in curve.points if math.isfinite(p.threshold)]
            sens = [0.0] + [p.sensitivity for p in curve.points if math.isfinite(p.threshold)]
            xmax = max(xmax, fps[-1])
            ax.step(fps, sens, where="post", label=label)
        xmax = fp_max if fp_max is not None else max(xmax, max(budgets, default=1.0)) * 1.05
        for b in budgets:
            ax.axvline(b, color="0.6", linestyle=":", linewidth=0.8)
        ax.set_xlim(0, xmax)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel(f"False positives {UNIT_LABELS.get(unit, '')}")
        ax.set_ylabel("Sensitivity")
        if len(curves) > 1 or next(iter(curves), ""):
            ax.legend(loc="lower right")
        return _save(fig, path)


def plot_losses(rows, path):
    """Loss against p_t for the four objectness losses."""
    p_t = [r[0] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        styles = ("-", "--", "-", "-.")
        for k, (label, ls) in enumerate(zip(LOSS_LABELS, styles), start=1):
            ax.plot(p_t, [r[k] for r in rows], linestyle=ls, label=label)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 5)
        ax.set_xlabel("probability of ground truth class $p_t$")
        ax.set_ylabel("loss")
        ax.legend(loc="upper right")
        return _save(fig, path)
