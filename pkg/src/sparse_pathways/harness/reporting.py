"""Matplotlib figures written next to the CSV outputs of a run."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..analysis import MaskStats  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
    "figure.autolayout": True,
}

RESULTS_ORDER = ["dense", "small-dense", "lap", "lsp-imp", "lsp-lth", "pathways-random", "pathways-imp",
                "pathways-lth"]


def plot_mask_overlap(stats: Mapping[str, MaskStats], path) -> Path:
    """One IOU heatmap per mask set, union ratio in the panel title."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(stats), figsize=(3.4 * len(stats), 3.2), squeeze=False,
                                 layout="constrained")
        for ax, (name, s) in zip(axes[0], stats.items()):
            im = ax.imshow(s.iou, vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks(range(len(s.names)), s.names)
            ax.set_yticks(range(len(s.names)), s.names)
            for i in range(len(s.names)):
                for j in range(len(s.names)):
                    ax.text(j, i, f"{s.iou[i, j]:.2f}", ha="center", va="center",
                            color="w" if s.iou[i, j] < 0.6 else "k", fontsize=7)
            ax.set_title(f"{name.upper()} masks, UR = {s.union_ratio:.4f}")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="IOU")
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_results(rows: Sequence, path, order: Sequence[str] = RESULTS_ORDER) -> Path:
    """Grouped bars of per-language test loss for the main model variants."""
    by_name = {r.model: r for r in rows}
    names = [n for n in order if n in by_name]
    if not names:
        names = [r.model for r in rows]
    langs = list(by_name[names[0]].per_language)
    x = np.arange(len(names))
    width = 0.8 / (len(langs) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.5, 3.4))
        for i, lang in enumerate(langs):
            ax.bar(x + i * width, [by_name[n].per_language[lang][0] for n in names], width, label=lang)
        ax.bar(x + len(langs) * width, [by_name[n].avg_loss for n in names], width, label="avg", color="k")
        ax.set_xticks(x + width * len(langs) / 2, names, rotation=30, ha="right")
        ax.set_ylabel("test loss (nats)")
        ax.legend(ncol=len(langs) + 1, loc="upper center", bbox_to_anchor=(0.5, 1.15), frameon=False)
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def render_all(ws, rows: Sequence, stats: Mapping[str, MaskStats]) -> list[Path]:
    ws.figures.mkdir(parents=True, exist_ok=True)
    return [
        plot_results(rows, ws.figures / "results.png"),
        plot_mask_overlap(stats, ws.figures / "mask_overlap.png"),
    ]
