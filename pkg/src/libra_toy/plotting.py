"""Figure rendering for probe reports. Headless (Agg) only."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False, "savefig.dpi": 120}


def heatmap_png(path, grid: np.ndarray, title: str = "", image: np.ndarray | None = None) -> Path:
    """Patch-grid attention heat values, optionally next to the source image."""
    path = Path(path)
    with plt.rc_context(_RC):
        ncols = 2 if image is not None else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 3.0), squeeze=False)
        ax = axes[0, 0]
        if image is not None:
            ax.imshow(np.clip(image, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            ax = axes[0, 1]
        im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def diff_curves_png(path, cross: np.ndarray, inner: np.ndarray) -> Path:
    """Left: per-layer cross-layer difference. Right: per-head inner-layer difference, one line per layer.

    ``cross`` is (samples, layers); ``inner`` is (samples, layers, heads). Sample means are plotted
    with a min/max band.
    """
    path = Path(path)
    layers = np.arange(1, cross.shape[1] + 1)
    heads = np.arange(1, inner.shape[2] + 1)
    with plt.rc_context(_RC):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.0, 3.0))
        a.plot(layers, cross.mean(0), marker="o", color="C0")
        a.fill_between(layers, cross.min(0), cross.max(0), color="C0", alpha=0.2, linewidth=0)
        a.set_xlabel("layer")
        a.set_ylabel("cross-layer difference")
        a.set_xticks(layers)
        for l in range(inner.shape[1]):
            b.plot(heads, inner[:, l].mean(0), marker="o", label=f"layer {l + 1}")
        b.set_xlabel("head")
        b.set_ylabel("inner-layer difference")
        b.set_xticks(heads)
        b.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
