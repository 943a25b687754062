"""Figures written next to the CSV outputs: loss curves, per-superclass IoU
bars, and red/green mask overlays."""
from __future__ import annotations

from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RED = np.array([1.0, 0.0, 0.0])
GREEN = np.array([0.0, 1.0, 0.0])

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def overlay(image, mask, color=RED, alpha=0.5):
    """Blend ``color`` into ``image`` (HxWx3 floats in [0,1]) where ``mask`` is set."""
    m = np.asarray(mask, dtype=np.float32)[..., None] * alpha
    return np.clip(image * (1 - m) + np.asarray(color) * m, 0, 1)


def overlay_uint8(image, mask, color=RED, alpha=0.5):
    return np.rint(overlay(image, mask, color, alpha) * 255).astype(np.uint8)


def plot_loss_trace(trace, path, window=50):
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ep = np.array([t[0] for t in trace])
        loss = np.array([t[1] for t in trace])
        ax.plot(ep, loss, lw=0.5, alpha=0.4, color="0.5", label="episode")
        if len(loss) >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(ep[window - 1:], smooth, lw=1.2, color="C0", label=f"mean of {window}")
        ax.set_xlabel("episode")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_superclass_iou(reports: dict, path, title="Mean IoU by superclass"):
    """Grouped bars, one group per superclass and one bar per report label."""
    labels = list(reports)
    supers = sorted({s for r in reports.values() for s in r.superclasses}) or ["global"]
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(supers) * max(1, len(labels) / 2)), 3.2))
        width = 0.8 / len(labels)
        x = np.arange(len(supers))
        for i, label in enumerate(labels):
            r = reports[label]
            vals = [r.superclasses.get(s, (0, r.global_mean if s == "global" else np.nan))[1]
                    for s in supers]
            ax.bar(x + (i - (len(labels) - 1) / 2) * width, vals, width, label=str(label))
        ax.set_xticks(x)
        ax.set_xticklabels(supers, rotation=45, ha="right")
        ax.set_ylim(0, 1)
        ax.set_ylabel("mean IoU")
        ax.set_title(title)
        if len(labels) > 1:
            ax.legend(frameon=False, ncol=min(4, len(labels)))
        return _save(fig, path)


def plot_distribution(distribution: dict, path):
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(distribution)), 3))
        names = list(distribution)
        ax.bar(range(len(names)), [distribution[n] for n in names], color="C3")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylabel("share of images")
        return _save(fig, path)


def plot_episode(episode, probs, path, threshold=0.5):
    """Supports with their masks in red; each query with prediction (red) and truth (green)."""
    k, q = len(episode.support), len(episode.query_images)
    with mpl.rc_context(STYLE):
        fig, axes = plt.subplots(2, max(k, q), figsize=(2 * max(k, q), 4.2), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for i, pair in enumerate(episode.support):
            axes[0, i].imshow(overlay(pair.image, pair.mask))
            axes[0, i].set_title(f"support {i + 1}")
        for i, (image, truth) in enumerate(zip(episode.query_images, episode.query_truth)):
            pred = np.asarray(probs[i]) >= threshold
            shown = overlay(overlay(image, truth, GREEN, 0.35), pred, RED, 0.45)
            axes[1, i].imshow(shown)
            axes[1, i].set_title(f"query {i + 1}")
        return _save(fig, path)
