"""Report figures written as PNG files next to the CSV/text outputs.

Figures are saved without software/date metadata so re-running a command
reproduces them byte for byte.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from hsfs.dataio import LABEL_NAMES  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
CLASS_COLOURS = ("0.45", "tab:orange", "gold")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_prune_curve(history, initial_acc: float, path) -> Path:
    """Validation accuracy against number of removed bands; retrain points as vertical lines."""
    removed = [0] + [h.step + 1 for h in history]
    acc = [initial_acc] + [h.val_acc for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        for h in history:
            if h.retrained:
                ax.axvline(h.step + 1, color="gold", lw=0.8, zorder=0)
        ax.plot(removed, acc, color="k", lw=1.0, marker=".", ms=3)
        retrained = [(h.step + 1, h.retrained_acc) for h in history if h.retrained]
        if retrained:
            x, y = zip(*retrained)
            ax.plot(x, y, "o", mfc="none", mec="tab:blue", ms=4, label="after retraining")
            ax.legend(loc="lower left", frameon=False)
        ax.set_xlabel("removed bands")
        ax.set_ylabel("validation accuracy")
        fig.tight_layout()
        return _save(fig, path)


def plot_removal_order(order: np.ndarray, path, per_row: int = 16) -> Path:
    """Bands laid out left-to-right, top-to-bottom, shaded by removal step."""
    order = np.asarray(order)
    bands = len(order)
    rows = -(-bands // per_row)
    grid = np.full(rows * per_row, np.nan)
    grid[:bands] = order
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.5 + 0.4 * rows))
        im = ax.imshow(grid.reshape(rows, per_row), cmap="magma", vmin=0, vmax=bands, aspect="equal")
        for k, v in enumerate(order):
            r, c = divmod(k, per_row)
            ax.text(c, r, str(v), ha="center", va="center", fontsize=6,
                    color="w" if v < 0.6 * bands else "k")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, label="removal step", shrink=0.8)
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(confusion: np.ndarray, path) -> Path:
    cm = np.asarray(confusion)
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3))
        ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        for (i, j), v in np.ndenumerate(cm):
            ax.text(j, i, f"{v}\n{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="w" if norm[i, j] > 0.5 else "k")
        ax.set_xticks(range(len(LABEL_NAMES)), LABEL_NAMES)
        ax.set_yticks(range(len(LABEL_NAMES)), LABEL_NAMES)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.tight_layout()
        return _save(fig, path)


def plot_class_spectra(cube: np.ndarray, mask: np.ndarray, path, informative=()) -> Path:
    """Median spectrum per class with planted informative bands marked."""
    spectra = cube.reshape(-1, cube.shape[2])
    labels = mask.reshape(-1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        for k, name in enumerate(LABEL_NAMES):
            if np.any(labels == k):
                ax.plot(np.median(spectra[labels == k], axis=0), color=CLASS_COLOURS[k], label=name)
        for c in informative:
            ax.axvline(c, color="tab:red", lw=0.5, ls=":")
        ax.set_xlabel("band")
        ax.set_ylabel("median intensity")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_training(history: list, path, keys=("train_loss", "val_acc")) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(3 * len(keys), 2.6))
        for ax, key in zip(np.atleast_1d(axes), keys):
            ax.plot([h["epoch"] for h in history], [h.get(key, np.nan) for h in history], color="k", lw=1)
            ax.set_xlabel("epoch")
            ax.set_ylabel(key.replace("_", " "))
        fig.tight_layout()
        return _save(fig, path)


def plot_mask_examples(cubes, targets, preds, path, n: int = 4) -> Path:
    """Rows of (mean intensity, coded truth, prediction, absolute error)."""
    n = min(n, len(targets))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(max(n, 1), 4, figsize=(6, 1.6 * max(n, 1)), squeeze=False)
        titles = ("image", "truth", "prediction", "|error|")
        for i in range(n):
            panels = (cubes[i].mean(axis=2), targets[i], preds[i], np.abs(preds[i] - targets[i]))
            for j, (ax, img) in enumerate(zip(axes[i], panels)):
                kw = {"cmap": "gray"} if j == 0 else {"cmap": "viridis", "vmin": 0, "vmax": 2}
                ax.imshow(img, **kw)
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(titles[j])
        fig.tight_layout()
        return _save(fig, path)


def save_rgb(rgb: np.ndarray, path) -> Path:
    with plt.rc_context(STYLE):
        h, w, _ = rgb.shape
        fig = plt.figure(figsize=(w / 32, h / 32))
        ax = fig.add_axes([0, 0, 1, 1])
        ax.imshow(rgb, interpolation="nearest")
        ax.axis("off")
        return _save(fig, path)
