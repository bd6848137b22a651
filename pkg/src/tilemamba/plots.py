"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

from typing import List

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "plot_training_curves",
    "plot_confusion",
    "plot_sweep",
    "plot_heatmap_overlay",
]


def plot_training_curves(history: List[dict], path) -> None:
    epochs = [r["epoch"] for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(epochs, [r["mean_loss"] for r in history], marker=".")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("mean BCE loss")
    axes[1].plot(epochs, [r["lr"] for r in history], marker=".", color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("learning rate")
    axes[1].set_yscale("log")
    axes[2].plot(epochs, [r["val_accuracy"] for r in history], marker=".",
                 label="accuracy")
    axes[2].plot(epochs, [r["val_f1"] for r in history], marker=".", label="F1")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("validation metric")
    axes[2].set_ylim(0.0, 1.02)
    axes[2].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(rates: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    ax.imshow(rates, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{rates[i, j]:.4f}", ha="center", va="center")
    ax.set_xticks([0, 1], ["pred +", "pred -"])
    ax.set_yticks([0, 1], ["actual +", "actual -"])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: List[dict], axis_name: str, path) -> None:
    values = [r["value"] for r in rows]
    numeric = all(isinstance(v, (int, float)) for v in values)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    xs = values if numeric else np.arange(len(values))
    for metric in ("f1", "recall", "accuracy"):
        ax.plot(xs, [r[metric] for r in rows], marker="o", label=metric)
    if numeric and axis_name == "lr":
        ax.set_xscale("log")
    if not numeric:
        ax.set_xticks(xs, [str(v) for v in values], rotation=20)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("test metric")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_heatmap_overlay(image: np.ndarray, heat: np.ndarray, path) -> None:
    """Tile (C,H,W in [0,1]) under a jet-ish activation overlay."""
    rgb = np.clip(np.transpose(image, (1, 2, 0)), 0.0, 1.0)
    fig, axes = plt.subplots(1, 2, figsize=(6.6, 3.2))
    axes[0].imshow(rgb)
    axes[0].set_title("tile")
    axes[1].imshow(rgb)
    axes[1].imshow(heat, cmap="jet", alpha=0.45, vmin=0.0, vmax=1.0)
    axes[1].set_title("activation")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
