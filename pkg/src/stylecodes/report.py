"""Matplotlib figures for training logs, evaluation metrics and sample grids."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datagen import to_uint8  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "stylecodes",
}


def size(scale=1.0, ratio=0.62):
    w = 6.0 * scale
    return (w, w * ratio)


def read_log(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def running_mean(x, window: int = 50) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        window = max(1, len(x))
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    out[window - 1:] = (c[window:] - c[:-window]) / window
    out[:window - 1] = c[1:window] / np.arange(1, window)
    return out


def plot_training(logs: dict, out) -> Path:
    """Loss curves, one line per named JSONL log."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=size(0.9))
        for label, path in logs.items():
            recs = read_log(path)
            steps = [r["step"] for r in recs]
            loss = [r["loss"] for r in recs]
            ax.plot(steps, loss, lw=0.4, alpha=0.3)
            ax.plot(steps, running_mean(loss), lw=1.2, label=label, color=ax.lines[-1].get_color())
        ax.set_xlabel("step")
        ax.set_ylabel("epsilon MSE")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return Path(out)


def plot_retrieval(metrics: dict, out) -> Path:
    """Per-style top-1 retrieval accuracy with the chance level marked."""
    rows = metrics["per_style"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=size(0.9))
        x = np.arange(len(rows))
        ax.bar(x, [r["accuracy"] for r in rows], color="#4c72b0")
        ax.axhline(metrics["chance"], color="k", ls="--", lw=0.8, label="chance")
        ax.axhline(metrics["accuracy"], color="#c44e52", lw=0.8, label=f"mean {metrics['accuracy']:.2f}")
        ax.set_xticks(x)
        ax.set_xticklabels([str(r["style"]) for r in rows], rotation=90)
        ax.set_xlabel("held-out style")
        ax.set_ylabel("top-1 accuracy")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, loc="upper right")
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return Path(out)


def plot_grid(source, images, prompts, out, code: str | None = None) -> Path:
    """Source style image in the first column, one generation per prompt after it."""
    n = len(images) + (source is not None)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.9))
        axes = np.atleast_1d(axes)
        col = 0
        if source is not None:
            axes[0].imshow(to_uint8(source), interpolation="nearest")
            axes[0].set_title(code or "source", fontsize=6)
            col = 1
        for ax, img, p in zip(axes[col:], images, prompts):
            ax.imshow(to_uint8(img), interpolation="nearest")
            ax.set_title(p)
        for ax in axes:
            ax.set_axis_off()
        fig.tight_layout()
        fig.savefig(out)
        plt.close(fig)
    return Path(out)
