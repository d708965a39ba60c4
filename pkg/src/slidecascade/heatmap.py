"""Score heatmaps with nested top-p overlays and mask contours."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle
from PIL import Image

from .metrics import iou
from .mil import AttentionMap, select_top_p

_OVERLAY_COLORS = ("#ff2d2d", "#2dff5e", "#2da8ff", "#ffd22d")


def score_image(amap: AttentionMap, out_path, upsample: int = 16):
    """Plain grayscale rendering of a score grid, max score = white."""
    grid = amap.grid.astype(np.float64)
    peak = grid.max()
    gray = np.zeros_like(grid) if peak <= 0 else grid / peak
    gray8 = np.round(gray * 255).astype(np.uint8)
    gray8 = np.kron(gray8, np.ones((upsample, upsample), dtype=np.uint8))
    Image.fromarray(gray8, mode="L").save(out_path)


def emit_heatmap(amap: AttentionMap, tissue: np.ndarray, out_path,
                 top_ps: tuple = (1.0, 5.0, 20.0), mask: np.ndarray = None,
                 slide_id: str = "") -> dict:
    """Write one composite heatmap image.

    Scores render as a colormapped grid with non-tissue cells blanked,
    each requested top-p percentage outlines its cells, and the planted
    mask (when given) draws as a dashed contour. Returns the overlap
    stats that were stamped onto the figure.
    """
    if amap.grid.shape != tissue.shape:
        raise ValueError(f"score grid {amap.grid.shape} != tissue {tissue.shape}")
    shown = np.where(tissue, amap.grid, np.nan)
    fig, ax = plt.subplots(figsize=(7, 7))
    cmap = plt.get_cmap("inferno").copy()
    cmap.set_bad("#c8c8c8")
    image = ax.imshow(shown, cmap=cmap, interpolation="nearest")
    fig.colorbar(image, ax=ax, fraction=0.046, label="fused score")

    stats = {}
    for p, color in zip(sorted(top_ps), _OVERLAY_COLORS):
        cells = select_top_p(amap, p, mask=tissue)
        width = 3.5 - 0.8 * sorted(top_ps).index(p)
        for r, c in cells:
            ax.add_patch(Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False,
                                   edgecolor=color, linewidth=max(width, 1.0)))
        ax.plot([], [], color=color, label=f"top {p:g}% ({len(cells)})")
        if mask is not None:
            chosen = np.zeros_like(tissue)
            for r, c in cells:
                chosen[r, c] = True
            stats[f"iou_top{p:g}"] = iou(chosen, mask)

    if mask is not None and mask.any():
        ax.contour(mask.astype(float), levels=[0.5], colors="white",
                   linestyles="dashed", linewidths=1.6)
        ax.plot([], [], color="white", linestyle="dashed", label="planted mask")

    title = slide_id or "slide"
    if stats:
        title += "   " + "  ".join(f"{k}={v:.3f}" for k, v in sorted(stats.items()))
    ax.set_title(title, fontsize=10)
    ax.legend(loc="upper right", fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.savefig(Path(out_path), dpi=110, bbox_inches="tight")
    plt.close(fig)
    return stats


__all__ = ["score_image", "emit_heatmap"]
