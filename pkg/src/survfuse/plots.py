"""Matplotlib figures written next to the delimited report output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

CLASS_NAMES = ("short", "mid", "long")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=140, metadata={})
    plt.close(fig)


def save_confusion_heatmap(confusion, path, class_names=CLASS_NAMES) -> None:
    confusion = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(confusion, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names)
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    vmax = confusion.max() if confusion.size else 1
    for i in range(confusion.shape[0]):
        for j in range(confusion.shape[1]):
            color = "white" if confusion[i, j] > 0.5 * vmax else "black"
            ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center", color=color)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def save_fold_metric_bars(report, path) -> None:
    keys = ("accuracy", "precision", "recall", "f_score")
    n = len(report.folds)
    x = np.arange(n)
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(5.0, 0.8 * n + 2), 3.4))
    for i, key in enumerate(keys):
        vals = [getattr(f, key) for f in report.folds]
        ax.bar(x + (i - 1.5) * width, vals, width, label=key)
    ax.set_xticks(x, [str(i) for i in range(n)])
    ax.set_xlabel("fold")
    ax.set_ylim(0, 1.05)
    ax.axhline(report.mean["accuracy"], color="gray", lw=0.8, ls="--")
    ax.legend(fontsize=8, ncol=2)
    _save(fig, path)


def save_training_curves(histories, path) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3.2))
    for f, history in enumerate(histories):
        epochs = [h.epoch for h in history]
        ax_loss.plot(epochs, [h.train_loss for h in history], lw=0.9, label=f"fold {f}")
        ax_acc.plot(epochs, [h.val_accuracy for h in history], lw=0.9)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("val accuracy")
    ax_acc.set_ylim(0, 1.05)
    if len(histories) <= 10:
        ax_loss.legend(fontsize=7)
    _save(fig, path)


def save_sketch_bench(rows, path) -> None:
    """Error/latency curves for the sketch benchmark; ``rows`` are dicts
    with d, mean_rel_err, p95_rel_err, wall_time_direct, wall_time_fft."""
    ds = [r["d"] for r in rows]
    fig, (ax_err, ax_time) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_err.loglog(ds, [r["mean_rel_err"] for r in rows], "o-", label="mean")
    ax_err.loglog(ds, [r["p95_rel_err"] for r in rows], "s--", label="p95")
    ax_err.set_xlabel("sketch dimension d")
    ax_err.set_ylabel("relative error")
    ax_err.legend(fontsize=8)
    ax_time.loglog(ds, [r["wall_time_direct"] for r in rows], "o-", label="direct")
    ax_time.loglog(ds, [r["wall_time_fft"] for r in rows], "s--", label="fft")
    ax_time.set_xlabel("sketch dimension d")
    ax_time.set_ylabel("seconds per convolution")
    ax_time.legend(fontsize=8)
    _save(fig, path)
