"""Figure rendering for evaluation and aggregation reports.

Renders matplotlib figures to files next to the delimited/JSON outputs:
annotated confusion matrices, per-class metric bars, and canonical-space
heatmap panels using the same black-red-yellow-white ramp as the raw
heatmap PNGs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

from .evalharness import ConfusionMatrix, Metrics
from .imaging import heat_lut

_HEAT_CMAP = ListedColormap(heat_lut() / 255.0, name="facexplain-heat")


def confusion_figure(cm: ConfusionMatrix, m: Metrics, path: str | Path) -> None:
    """Annotated confusion matrix with accuracy in the title."""
    k = len(cm.classes)
    fig, ax = plt.subplots(figsize=(1.1 * k + 2.2, 1.1 * k + 1.8))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(k), cm.classes, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.counts.max() / 2 if cm.counts.max() > 0 else 0.5
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(cm.counts[i, j])), ha="center", va="center",
                    color="white" if cm.counts[i, j] > thresh else "black")
    ax.set_title(f"accuracy = {m.accuracy:.3f} (n = {m.total})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_figure(m: Metrics, path: str | Path) -> None:
    """Per-class recall and predicted-share bars."""
    classes = list(m.recall)
    x = np.arange(len(classes))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.2 * len(classes) + 2.5, 3.4))
    ax.bar(x - width / 2, [m.recall[c] for c in classes], width, label="recall")
    ax.bar(x + width / 2, [m.predicted_share[c] for c in classes], width, label="predicted share")
    ax.set_xticks(x, classes)
    ax.set_ylim(0, 1.05)
    ax.axhline(1.0, lw=0.5, color="grey")
    ax.legend()
    ax.set_title(f"accuracy = {m.accuracy:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap_panel(maps: dict[str, np.ndarray], path: str | Path, suptitle: str = "") -> None:
    """One colormapped panel per class, shared scale [0, 1]."""
    names = list(maps)
    fig, axes = plt.subplots(1, len(names), figsize=(3.0 * len(names), 3.4), squeeze=False)
    for ax, name in zip(axes[0], names):
        im = ax.imshow(maps[name], cmap=_HEAT_CMAP, vmin=0.0, vmax=1.0)
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), fraction=0.046)
    if suptitle:
        fig.suptitle(suptitle)
    fig.savefig(path, dpi=120)
    plt.close(fig)
