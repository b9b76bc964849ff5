"""Figures written next to the CSV/JSON outputs of the CLI."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_NAMES, MetricReport  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.titlesize": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "figure.dpi": 100,
        "savefig.bbox": "tight",
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(log: dict[str, np.ndarray], path, title: str = "") -> Path:
    """Loss components and learning rate against step."""
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True, height_ratios=[3, 1])
    steps = log["step"]
    for key, style in (("total", "-"), ("fus", "--"), ("ssim", ":"), ("smooth", ":"), ("grad", ":")):
        if np.any(log[key]):
            ax.plot(steps, log[key], style, label=key)
    if np.any(log["rec"]):
        ax.plot(steps, log["rec"], "-.", label="rec")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(ncol=3)
    if title:
        ax.set_title(title)
    ax_lr.plot(steps, log["lr"], color="k")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("lr")
    return _save(fig, path)


def plot_metric_report(report: MetricReport, path) -> Path:
    """One panel per metric: per-pair bars with the aggregate as a dashed line."""
    ids = list(report.per_pair)
    fig, axes = plt.subplots(2, 3, figsize=(9, 5))
    x = np.arange(len(ids))
    for ax, name in zip(axes.ravel(), METRIC_NAMES):
        vals = [report.per_pair[i][name] for i in ids]
        ax.bar(x, vals, color="0.6")
        ax.axhline(report.aggregate[name], color="C3", ls="--", lw=1)
        ax.set_title(f"{name} (mean {report.aggregate[name]:.3f})")
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=60, ha="right")
    fig.tight_layout()
    return _save(fig, path)


def plot_structure_pyramid(img: np.ndarray, levels: list[np.ndarray], path) -> Path:
    n = len(levels)
    fig, axes = plt.subplots(1, n + 1, figsize=(2.2 * (n + 1), 2.4))
    axes[0].imshow(img, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input")
    for k, lvl in enumerate(levels):
        axes[k + 1].imshow(lvl, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        axes[k + 1].set_title(f"level {k + 1} ({lvl.shape[0]}x{lvl.shape[1]})")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
