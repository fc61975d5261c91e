"""Matplotlib figures rendered off-screen and saved as P6 images."""
from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from . import netpbm
from .labeler import BINARY_PALETTE, CLASS_NAMES

# the binary-mask palette has white tundra and a black background; draw
# those two with visible stand-ins on a white canvas
_LINE_COLORS = [tuple(c / 255.0) for c in BINARY_PALETTE[1:]]
_LINE_COLORS[-1] = (0.45, 0.45, 0.45)
_LINE_COLORS[2] = (0.0, 0.7, 0.7)


def _new_figure(width=6.4, height=4.8, dpi=100):
    fig = Figure(figsize=(width, height), dpi=dpi)
    FigureCanvasAgg(fig)
    return fig


def figure_to_rgb(fig) -> np.ndarray:
    fig.canvas.draw()
    return np.asarray(fig.canvas.buffer_rgba())[..., :3].copy()


def save_figure(fig, path) -> None:
    netpbm.write_netpbm(path, figure_to_rgb(fig))


def roc_figure(report):
    fig = _new_figure()
    ax = fig.add_subplot(111)
    for c, curve in report.curves.items():
        ax.plot(curve.fpr, curve.tpr, color=_LINE_COLORS[c], lw=1.5,
                label=f"{CLASS_NAMES[c]} (AUC {report.auc[c]:.3f})")
    ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC per terrain class")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return fig


def auc_histogram_figure(report):
    fig = _new_figure()
    ax = fig.add_subplot(111)
    ax.hist(report.per_image_auc, bins=np.linspace(0, 1, 21), color="tab:blue", edgecolor="k")
    ax.set_xlabel("macro AUC per image")
    ax.set_ylabel("images")
    ax.set_title("Per-image AUC")
    fig.tight_layout()
    return fig


def jaccard_figure(report):
    fig = _new_figure()
    ax = fig.add_subplot(111)
    vals = np.nan_to_num(report.jaccard, nan=0.0)
    ax.bar(range(len(vals)), vals, color=_LINE_COLORS, edgecolor="k")
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(CLASS_NAMES, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("Jaccard index")
    ax.set_title(f"Jaccard per class (mean {report.mean_jaccard:.3f})")
    fig.tight_layout()
    return fig


def training_figure(records):
    fig = _new_figure(8.0, 3.6)
    ax_loss = fig.add_subplot(121)
    ax_acc = fig.add_subplot(122)
    for split, style in (("train", "-"), ("val", "o-")):
        rs = [r for r in records if r.split == split]
        if not rs:
            continue
        ep = [r.epoch for r in rs]
        ax_loss.plot(ep, [r.loss for r in rs], style, label=split, ms=4)
        ax_acc.plot(ep, [r.accuracy for r in rs], style, label=split, ms=4)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend()
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("pixel accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend()
    fig.tight_layout()
    return fig
