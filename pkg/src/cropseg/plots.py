"""Matplotlib figures rendered next to the CLI's machine-readable output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .corpus import CoverageHistogram
from .pseudolabel import SigmoidFit


def plot_coverage_histogram(hist: CoverageHistogram, out_path) -> None:
    """Bar chart of the canopy coverage distribution."""
    edges = np.linspace(0.0, 1.0, len(hist.counts) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], hist.counts, width=np.diff(edges), align="edge", edgecolor="white")
    ax.set_xlabel("canopy coverage")
    ax.set_ylabel("samples")
    ax.set_title(f"Coverage distribution ({hist.total} masks)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_cumulative_fit(
    x: np.ndarray, y: np.ndarray, fit: SigmoidFit, threshold: float, out_path
) -> None:
    """Cumulative depth curve, its sigmoid fit, and the chosen threshold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, y, lw=1.0, label="cumulative histogram")
    ax.plot(x, fit(x), lw=1.0, ls="--", label="sigmoid fit")
    ax.axvline(threshold, color="tab:red", lw=1.0, label=f"threshold {threshold:.3f}")
    ax.set_xlabel("normalized depth")
    ax.set_ylabel("cumulative weight")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_loss_curves(reports, out_path) -> None:
    """Training loss per epoch for each self-training stage."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        ax.plot(rep.train_loss_curve, label=f"stage {rep.stage}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked BCE loss")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
