"""Matplotlib figures for evaluation reports and loss traces.

Figures are written with the Agg backend and a fixed SVG hash salt and no
date stamp, so the same inputs give byte-identical files.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

_RC = {
    "svg.hashsalt": "fdsos",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> None:
    fmt = str(path).rsplit(".", 1)[-1].lower()
    metadata = {"Date": None} if fmt == "svg" else None
    fig.savefig(path, metadata=metadata)
    plt.close(fig)


def plot_pr_curves(report: EvalReport, path, title: str | None = None) -> None:
    """Step plot of the IoU-0.5 precision/recall curve of every evaluated class."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for name, curve in report.pr_curves.items():
            r = np.concatenate([[0.0], curve.recall])
            p = np.concatenate([[1.0], curve.precision])
            ax.step(r, p, where="post", label=f"{name} (AP50 {curve.ap:.3f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_trace(steps: Sequence[int], columns: dict[str, Sequence[float]], path, window: int = 50) -> None:
    """Loss components against step, smoothed by a trailing moving average."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        steps = np.asarray(steps)
        for name, vals in columns.items():
            v = np.asarray(vals, dtype=float)
            k = max(1, min(window, len(v)))
            smooth = np.convolve(v, np.ones(k) / k, mode="valid")
            ax.plot(steps[k - 1 :], smooth, lw=1, label=name)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
