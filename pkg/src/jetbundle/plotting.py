"""Report figures, rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

VERDICT_COLORS = {"solvable": "tab:green", "unsolvable": "tab:red", "inconclusive": "tab:orange"}
PNG_META = {"Software": None}


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)


def decision_figure(
    path: Path,
    xy: np.ndarray,
    label: str,
    dims: np.ndarray,
    failures: np.ndarray,
    emptied: Sequence[int],
    mean_dims: Sequence[float],
    verdict: str,
) -> None:
    """Final fiber dimensions over the domain and the per-iteration trace."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4.2))
    ok = dims >= 0
    sc = ax0.scatter(xy[ok, 0], xy[ok, 1], c=dims[ok], s=6, cmap="viridis")
    if len(failures):
        ax0.scatter(xy[failures, 0], xy[failures, 1], s=24, marker="x", color="tab:red", label="failure")
        ax0.legend(loc="upper right", fontsize=8)
    fig.colorbar(sc, ax=ax0, label="fiber dimension")
    ax0.set_xlabel(label.split(" / ")[0])
    if " / " in label:
        ax0.set_ylabel(label.split(" / ")[1])
    ax0.set_title(f"final fibers ({verdict})", color=VERDICT_COLORS[verdict])
    its = np.arange(len(emptied))
    ax1.bar(its, emptied, color="tab:red", alpha=0.6, label="newly empty")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("points emptied")
    if mean_dims:
        ax2 = ax1.twinx()
        ax2.plot(np.linspace(0, its[-1], len(mean_dims)), mean_dims, "o-", color="tab:blue")
        ax2.set_ylabel("mean fiber dimension", color="tab:blue")
    ax1.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax1.set_title("refinement trace")
    fig.tight_layout()
    _save(fig, path)


def refinement_figure(path: Path, dims_per_iter: Sequence[Sequence[int]], verdict: str) -> None:
    """Count of points per fiber dimension after each iteration (-1 = empty)."""
    D = np.array(dims_per_iter)
    values = sorted(set(D.ravel().tolist()))
    its = np.arange(len(D))
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(len(D))
    cmap = plt.get_cmap("viridis", max(len(values), 2))
    for k, v in enumerate(values):
        counts = (D == v).sum(axis=1)
        color = "tab:red" if v < 0 else cmap(k)
        ax.bar(its, counts, bottom=bottom, color=color, label="empty" if v < 0 else f"dim {v}")
        bottom += counts
    ax.set_xlabel("iteration")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("points")
    ax.set_title(f"fiber dimensions ({verdict})", color=VERDICT_COLORS[verdict])
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def oracle_figure(path: Path, names: Sequence[str], verdicts: Sequence[dict]) -> None:
    """Verdict grid: one row per problem, one column per method."""
    methods = ["decide", "whitney_fit", "eh_criterion"]
    code = {"solvable": 1.0, "unsolvable": 0.0, "inconclusive": 0.5}
    grid = np.full((len(names), len(methods)), np.nan)
    for i, v in enumerate(verdicts):
        for j, m in enumerate(methods):
            if m in v:
                grid[i, j] = code[v[m]]
    fig, ax = plt.subplots(figsize=(5.5, 0.32 * len(names) + 1.4))
    ax.imshow(grid, cmap="RdYlGn", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(methods)), methods)
    ax.set_yticks(range(len(names)), names, fontsize=8)
    for i, v in enumerate(verdicts):
        if len(set(v.values())) > 1:
            ax.annotate("≠", (len(methods) - 0.4, i), annotation_clip=False, color="tab:red")
    ax.set_title("oracle agreement")
    fig.tight_layout()
    _save(fig, path)
