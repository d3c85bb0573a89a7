"""Figures written next to the CSV reports.

Everything renders through the Agg backend with fixed sizes and no
timestamps in the PNG metadata, so identical data gives identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "figure.dpi": 100,
}
PNG_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def plot_training_curves(curves: dict[str, list[dict]], path) -> None:
    """Test accuracy and training loss per epoch, one line per run."""
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(8, 3))
        for name, records in curves.items():
            if not records:
                continue
            ep = [r["epoch"] + 1 for r in records]
            ax_acc.plot(ep, [r["test_acc"] for r in records], marker="o", ms=3, label=name)
            ax_loss.plot(ep, [r["train_loss"] for r in records], marker="o", ms=3, label=name)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("test accuracy")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train cross-entropy")
        ax_acc.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, path)


def plot_consistency(m: np.ndarray, path, mapping=None, title="consistency") -> None:
    """Heat map of the consistency matrix, and of its columns reordered by ``mapping``."""
    panels = [(m, "identity")]
    if mapping is not None:
        c = m.shape[0]
        panels.append((m[np.asarray(mapping)][:, np.arange(c)], "transformed"))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.6 * len(panels), 3.2), squeeze=False)
        vmax = float(np.abs(m).max()) or 1.0
        for ax, (mat, label) in zip(axes[0], panels):
            im = ax.imshow(mat, cmap="RdBu_r", vmin=-vmax, vmax=vmax, interpolation="nearest")
            ax.set_title(f"{title} ({label}), trace={np.trace(mat):.3f}")
            ax.set_xlabel("student channel")
            ax.set_ylabel("teacher channel")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        _save(fig, path)


def plot_class_profiles(profiles: dict[str, np.ndarray], path) -> None:
    """Rows = classes, columns = channels; one panel per model."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(profiles), figsize=(3.2 * len(profiles), 2.6), squeeze=False)
        for ax, (name, mat) in zip(axes[0], profiles.items()):
            ax.imshow(mat, aspect="auto", cmap="viridis", interpolation="nearest")
            ax.set_title(name)
            ax.set_xlabel("channel")
            ax.set_ylabel("class")
        fig.tight_layout()
        _save(fig, path)


def plot_overlap(k_values, series: dict[str, dict[int, float]], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        for name, means in series.items():
            ax.plot(k_values, [100 * means[k] for k in k_values], marker="s", ms=4, label=name)
        ax.set_xlabel("top-k")
        ax.set_ylabel("mean channel overlap (%)")
        ax.set_ylim(0, 105)
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
