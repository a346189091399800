"""Figures for probe reports and edit outputs, written straight to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .formats import to_rgb8  # noqa: E402

COLUMN_WIDTH_IN = 3.4
GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.0,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "ropedit",
}

SET_COLORS = {"P": "#c0392b", "C": "#2471a3", None: "#7f8c8d"}
MARKERS = ["o", "s", "^", "D", "v", "P", "X"]

# strip the version string so reruns on other matplotlib builds stay identical
_PNG_META = {"Software": None}


def figsize(scale=1.0, aspect=GOLDEN):
    w = COLUMN_WIDTH_IN * scale
    return (w, w * aspect)


def save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def layer_dependency(means: dict, path, per_manipulation: dict | None = None, layer_sets=None, title=None):
    """Mean PSNR against layer index; P / C members coloured.

    ``per_manipulation`` maps ``(layer, label) -> psnr`` and adds faint
    per-manipulation markers behind the means.
    """
    layers = sorted(means)
    P = set(layer_sets.P) if layer_sets is not None else set()
    C = set(layer_sets.C) if layer_sets is not None else set()
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(1.4))
        if per_manipulation:
            labels = sorted({m for _, m in per_manipulation})
            for k, label in enumerate(labels):
                xs = [l for l in layers if (l, label) in per_manipulation]
                ax.scatter(xs, [per_manipulation[(l, label)] for l in xs], s=8, alpha=0.35,
                           marker=MARKERS[k % len(MARKERS)], color="0.5", label=label, linewidths=0)
        for group, members in (("P", P), ("C", C), (None, None)):
            if members is None:
                xs = [l for l in layers if l not in P and l not in C]
            else:
                xs = [l for l in layers if l in members]
            if not xs:
                continue
            ax.scatter(xs, [means[l] for l in xs], s=18, color=SET_COLORS[group], zorder=3,
                       label={"P": "position-dependent", "C": "content-dependent", None: "other layers"}[group])
        ax.set_xlabel("layer")
        ax.set_ylabel("mean PSNR (dB)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        save(fig, path)


def edit_panel(x_src, x_edit, path, mask=None, titles=("source", "edit", "mask")):
    panels = [to_rgb8(x_src), to_rgb8(x_edit)]
    if mask is not None:
        panels.append(np.asarray(mask, dtype=float))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=figsize(1.4, 0.45))
        for ax, img, title in zip(np.atleast_1d(axes), panels, titles):
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, interpolation="nearest", vmin=0, vmax=1)
            ax.set_title(title)
            ax.set_axis_off()
        fig.tight_layout()
        save(fig, path)
