"""Report figures rendered to files next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_matrix_heatmap(path: str | Path, values: np.ndarray,
                        labels: list[str] | None = None, title: str = "",
                        annotate: bool = True) -> Path:
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * values.shape[1] + 2), 4.5))
    im = ax.imshow(values, cmap="viridis", aspect="auto")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if labels is not None:
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels, fontsize=8)
    if annotate and values.size <= 400:
        for i in range(values.shape[0]):
            for j in range(values.shape[1]):
                ax.text(j, i, f"{values[i, j]:.2f}", ha="center", va="center",
                        color="w", fontsize=7)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_curve(path: str | Path, xs, ys, xlabel: str, ylabel: str,
               title: str = "", logy: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(xs, ys, marker="o")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_trace(path: str | Path, trace: list[dict], keys: list[str],
               title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(1, len(trace) + 1)
    for key in keys:
        ys = [entry[key] for entry in trace if key in entry]
        if ys:
            ax.plot(xs[:len(ys)], ys, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_shot_curves(path: str | Path, shot_counts: list[int],
                     curves: dict[str, list[float]], title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name, ys in curves.items():
        ax.plot(shot_counts, ys, marker="o", label=name)
    ax.set_xlabel("example images of the novel category")
    ax.set_ylabel("detection accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_plane_grid(path: str | Path, planes: np.ndarray,
                    names: list[str] | None = None, title: str = "") -> Path:
    planes = np.asarray(planes, dtype=float)
    n = planes.shape[0]
    cols = min(n, 5)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows),
                             squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(planes[i], cmap="magma", vmin=0.0, vmax=1.0)
            ax.set_title(names[i] if names else f"plane {i}", fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
