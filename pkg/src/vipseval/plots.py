"""Figures written next to the delimited report outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figsize(width=6.0, ratio=None):
    ratio = ratio or (np.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def ranking_figure(rows, path, windows=(1, 2, 4, 6)):
    """Grouped bars of VPQ per window for each ranked entry.

    ``rows`` are dicts with ``name`` and ``vpq_k`` (window -> percent).
    """
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_figsize())
        x = np.arange(len(rows))
        width = 0.8 / max(len(windows), 1)
        for i, k in enumerate(windows):
            vals = [r["vpq_k"].get(k, np.nan) for r in rows]
            ax.bar(x + (i - (len(windows) - 1) / 2) * width, vals, width, label=f"VPQ{k}")
        ax.plot(x, [r["vpq"] for r in rows], "k_", markersize=18, mew=2, label="VPQ")
        ax.set_xticks(x)
        ax.set_xticklabels([r["name"] for r in rows], rotation=20, ha="right")
        ax.set_ylabel("VPQ (%)")
        finite = [v for r in rows for v in r["vpq_k"].values() if np.isfinite(v)]
        if finite:
            lo, hi = min(finite), max(finite)
            pad = max(1.0, 0.1 * (hi - lo))
            ax.set_ylim(max(0.0, lo - pad), min(100.0, hi + pad))
        ax.legend(ncol=len(windows) + 1, loc="lower center", bbox_to_anchor=(0.5, 1.0), frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def class_vpq_figure(report_json, path, names=None):
    """Heatmap of per-class VPQ (rows) by window size (columns) from a VPQ report."""
    names = names or {}
    windows = report_json["windows"]
    classes = sorted({int(c) for k in windows for c in report_json["per_window"][str(k)]["classes"]})
    grid = np.full((len(classes), len(windows)), np.nan)
    for j, k in enumerate(windows):
        for c, s in report_json["per_window"][str(k)]["classes"].items():
            if s["vpq"] is not None:
                grid[classes.index(int(c)), j] = 100.0 * s["vpq"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(windows), 0.8 + 0.3 * max(len(classes), 1)))
        im = ax.imshow(grid, vmin=0, vmax=100, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(windows)))
        ax.set_xticklabels([f"k={k}" for k in windows])
        ax.set_yticks(range(len(classes)))
        ax.set_yticklabels([names.get(c, str(c)) for c in classes])
        fig.colorbar(im, ax=ax, label="VPQ (%)")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
