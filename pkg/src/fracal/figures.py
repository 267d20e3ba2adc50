"""Matplotlib renderings of the report outputs, written to files."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_heatmap(hist, path, title: str | None = None) -> None:
    """Location heatmap of a spatial histogram (image coordinates, y down)."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(hist.counts, origin="upper", cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="objects per cell")
    ax.set_xlabel("cell i (x)")
    ax.set_ylabel("cell j (y)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_boxcount_fits(items, path) -> None:
    """Log-log occupied-cell curves with fitted slopes, one color per class.

    ``items`` is a sequence of (label, pairs, slope) with pairs the (G, nu)
    box-count series.
    """
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for label, pairs, slope in items:
        g = np.array([p[0] for p in pairs], dtype=float)
        nu = np.array([p[1] for p in pairs], dtype=float)
        x, y = np.log(g), np.log(nu)
        (pts,) = ax.plot(x, y, "o", ms=4, alpha=0.8)
        if len(x) >= 2:
            intercept = y.mean() - slope * x.mean()
            ax.plot(
                x,
                slope * x + intercept,
                "-",
                color=pts.get_color(),
                label=f"{label} (slope {slope:.2f})",
            )
    ax.set_xlabel("ln G")
    ax.set_ylabel("ln nu")
    if items:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_phi_scatter(phi_values, counts, path, corr: float | None = None) -> None:
    """Dimension against log instance count, one point per class."""
    counts = np.asarray(counts, dtype=float)
    phi_values = np.asarray(phi_values, dtype=float)
    keep = counts >= 1
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(np.log(counts[keep]), phi_values[keep], s=16, alpha=0.7)
    ax.set_xlabel("ln n_y")
    ax.set_ylabel("fractal dimension")
    ax.set_ylim(-0.05, 2.05)
    if corr is not None and math.isfinite(corr):
        ax.set_title(f"Pearson r = {corr:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ap_bars(report, path) -> None:
    """Overall and per-group average precision as a bar chart."""
    labels = ["overall", "rare", "common", "frequent"]
    values = [report.ap_overall, report.ap_rare, report.ap_common, report.ap_frequent]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(labels, values, color=["#444444", "#d62728", "#ff7f0e", "#2ca02c"])
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.0)
    for k, v in enumerate(values):
        ax.text(k, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
