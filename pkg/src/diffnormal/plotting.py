"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version stamp, so reruns give identical bytes
_PNG_META = {"Software": None}


def _finish(fig, ax, path, xlabel, ylabel, title=None):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_curves(path, curves: dict, xlabel: str, ylabel: str, title=None, logy: bool = False) -> None:
    """One line per ``label -> (xs, ys)`` entry."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, (xs, ys) in curves.items():
        ax.plot(xs, ys, marker="o", ms=3, label=label)
    if logy:
        ax.set_yscale("symlog", linthresh=1e-12)
    if len(curves) > 1:
        ax.legend(frameon=False)
    _finish(fig, ax, path, xlabel, ylabel, title)


def plot_histogram(path, values, bins: int, xlabel: str, title=None, markers=()) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.hist(np.asarray(values).ravel(), bins=bins, color="tab:blue", alpha=0.8)
    for m in markers:
        ax.axvline(m, color="k", lw=0.8, ls="--")
    _finish(fig, ax, path, xlabel, "count", title)


def plot_normal_map(path, vectors, mask=None, title=None) -> None:
    """Show normals with the usual ``(n + 1) / 2`` colour mapping."""
    img = np.clip((np.asarray(vectors) + 1.0) / 2.0, 0.0, 1.0)
    if mask is not None:
        img = np.where(np.asarray(mask)[..., None], img, 0.0)
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(img, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
