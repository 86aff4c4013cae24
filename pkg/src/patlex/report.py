"""Figures for evaluation reports. Everything renders off-screen to files."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _grid_array(grid, values):
    arr = np.full(grid.shape, np.nan)
    for i, m in enumerate(grid.temporal_values):
        for j, n in enumerate(grid.phonetic_values):
            if (m, n) in values:
                arr[i, j] = values[(m, n)]
    return arr


def grid_heatmap(path, grid, values, title, label, fmt="{:.3f}", cmap="viridis"):
    """Heatmap of one number per grid point (rows m, columns n)."""
    arr = _grid_array(grid, values)
    fig, ax = plt.subplots(figsize=(1.2 * grid.shape[1] + 2.5, 1.0 * grid.shape[0] + 1.8))
    im = ax.imshow(arr, cmap=cmap, aspect="auto")
    ax.set_xticks(range(grid.shape[1]), [str(n) for n in grid.phonetic_values])
    ax.set_yticks(range(grid.shape[0]), [str(m) for m in grid.temporal_values])
    ax.set_xlabel("patterns per set (n)")
    ax.set_ylabel("states per pattern (m)")
    ax.set_title(title)
    finite = arr[np.isfinite(arr)]
    mid = (finite.min() + finite.max()) / 2 if finite.size else 0.0
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            if np.isfinite(arr[i, j]):
                ax.text(j, i, fmt.format(arr[i, j]), ha="center", va="center", fontsize=8,
                        color="white" if arr[i, j] < mid else "black")
    fig.colorbar(im, ax=ax, label=label)
    return _save(fig, path)


def bar_chart(path, names, values, title, ylabel, reference=None):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(names) + 1.5), 3.2))
    ax.bar(range(len(names)), values, color="0.45")
    ax.set_xticks(range(len(names)), names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if reference is not None:
        ax.axhline(reference, color="C3", lw=1, ls="--")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    return _save(fig, path)


def history_plot(path, history, key="loglik"):
    """One line per grid point over outer iterations."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for point in sorted(history):
        entries = history[point]
        ax.plot([e["iteration"] for e in entries], [e[key] for e in entries],
                marker="o", ms=3, label=f"{point[0]}x{point[1]}")
    ax.set_xlabel("iteration")
    ax.set_ylabel(key)
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
