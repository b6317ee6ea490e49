"""PNG figures written next to the CSV/JSON outputs (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import bitstring  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_solution(sol, path, value: bool = True) -> Path:
    """Value function (or ``phi``) against time, one panel per default state."""
    masks = sorted(sol.tables, key=lambda m: (bin(m).count("1"), m))
    cols = min(4, len(masks))
    rows = int(np.ceil(len(masks) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.6 * rows), squeeze=False)
    t = sol.grid.nodes
    for ax, mask in zip(axes.flat, masks):
        tab = sol.tables[mask]
        y = -(2.0 / sol.theta) * np.log(tab) if value else tab
        for a, lab in enumerate(sol.model.labels):
            ax.plot(t, y[:, a], lw=1, label=f"i={lab}")
        ax.set_title(f"z={bitstring(mask, sol.N)}", fontsize=9)
        ax.set_xlabel("t")
    for ax in list(axes.flat)[len(masks):]:
        ax.axis("off")
    axes[0, 0].set_ylabel("Vbar" if value else "phi")
    if sol.model.n <= 8:
        axes[0, 0].legend(fontsize=7)
    return _save(fig, path)


def plot_strategy(sgrid, path, mask: int = 0) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    t = sgrid.grid.nodes
    pi = sgrid.pi[mask]
    for a, lab in enumerate(sgrid.model.labels[:8]):
        for j in range(sgrid.N):
            ax.plot(t, pi[:, a, j], lw=1, label=f"i={lab}, stock {j + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("pi*")
    ax.set_title(f"optimal allocation, z={bitstring(mask, sgrid.N)}", fontsize=9)
    ax.legend(fontsize=6)
    return _save(fig, path)


def plot_convergence(report: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    levels = report["levels"]
    if report["sup_deltas"]:
        ax.semilogy(levels[1:], report["sup_deltas"], "o-", label="sup delta")
    eb = [report["error_bound"][str(n)] for n in levels]
    ax.semilogy(levels, np.maximum(eb, 1e-300), "s--", label="escape probability")
    ax.set_xlabel("truncation level n")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_log_wealth(logx, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(logx, bins=80, density=True)
    ax.set_xlabel("log X(T)")
    ax.set_ylabel("density")
    return _save(fig, path)
