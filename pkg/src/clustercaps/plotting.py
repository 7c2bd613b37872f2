"""Matplotlib figures written next to the CSV and PGM outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, dpi=110, bbox_inches="tight", format=path.suffix.lstrip(".") or "png")
    plt.close(fig)
    tmp.replace(path)
    return path


def training_curves(rows: list[dict], path) -> Path:
    """Train loss and eval error per epoch from metrics rows."""
    epochs = [int(r["epoch"]) for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(epochs, [float(r["train_loss"]) for r in rows], marker="o")
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    b.plot(epochs, [100 * float(r["eval_err"]) for r in rows], marker="o", color="C1")
    b.set_xlabel("epoch")
    b.set_ylabel("eval error (%)")
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(rows: list[dict], path) -> Path:
    seeds = [str(r["seed"]) for r in rows]
    x = np.arange(len(seeds))
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(x - 0.2, [100 * r["data_dependent_acc"] for r in rows], 0.4, label="data-dependent")
    ax.bar(x + 0.2, [100 * r["constant_acc"] for r in rows], 0.4, label="constant")
    ax.set_xticks(x, seeds)
    ax.set_xlabel("seed")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(loc="lower right")
    return _save(fig, path)


def transform_mse_bars(rows: list[tuple[str, float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.bar(range(len(rows)), [m for _, m in rows])
    ax.set_xticks(range(len(rows)), [n for n, _ in rows], rotation=60, ha="right")
    ax.set_ylabel("MSE")
    return _save(fig, path)


def routing_scatter(weights: np.ndarray, labels: np.ndarray, path) -> Path:
    """Routing weights of the first two clusters coloured by class."""
    fig, ax = plt.subplots(figsize=(4, 4))
    y = weights[:, 1] if weights.shape[1] > 1 else np.zeros(len(weights))
    sc = ax.scatter(weights[:, 0], y, c=labels, cmap="tab10", s=8)
    ax.set_xlabel("c[0]")
    ax.set_ylabel("c[1]")
    fig.colorbar(sc, ax=ax, label="class")
    return _save(fig, path)


def image_grid(image: np.ndarray, path, title: str | None = None) -> Path:
    h, w = image.shape
    fig, ax = plt.subplots(figsize=(max(2.0, w / 40), max(1.0, h / 40)))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.axis("off")
    if title:
        ax.set_title(title, fontsize=8)
    return _save(fig, path)


def viewpoint_curves(history: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ep = [r["epoch"] for r in history]
    ax.plot(ep, [100 * r["familiar_acc"] for r in history], marker="o", label="familiar")
    ax.plot(ep, [100 * r["novel_acc"] for r in history], marker="o", label="novel")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    return _save(fig, path)
