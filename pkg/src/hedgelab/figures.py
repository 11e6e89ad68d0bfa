"""Matplotlib renderings written by the CLI report path.

Everything here consumes data the analysis layer already emits as CSV; the
figures are a convenience view, not a data source.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def pnl_distribution_figure(
    pnl_by_alpha: dict[float, np.ndarray],
    out_png: str | Path,
    bins: int = 120,
) -> Path:
    """Panel of difference-strategy P&L histograms, one per confidence level."""
    out_png = Path(out_png)
    levels = sorted(pnl_by_alpha)
    n = len(levels)
    ncols = min(n, 4)
    nrows = -(-n // ncols)
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.2 * ncols, 3.2 * nrows), squeeze=False
    )
    for ax in axes.ravel()[n:]:
        ax.set_axis_off()
    for ax, alpha in zip(axes.ravel(), levels):
        pnl = np.asarray(pnl_by_alpha[alpha]).ravel()
        ax.hist(pnl, bins=bins, color="#35618f", edgecolor="none")
        ax.axvline(0.0, color="#888888", lw=0.8)
        ax.axvline(pnl.mean(), color="#b03030", lw=1.2, ls="--",
                   label=f"mean {pnl.mean():.2f}")
        ax.set_title(f"level {alpha:.0%}")
        ax.set_xlabel("terminal value of difference strategy")
        ax.set_ylabel("paths")
        ax.legend(fontsize=8)
    fig.suptitle("P&L distribution of the deep-minus-delta overlay")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def training_curves_figure(
    records_by_alpha: dict[float, list],
    out_png: str | Path,
) -> Path:
    """Train loss and validation risk per epoch for every trained level."""
    out_png = Path(out_png)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 3.6))
    for alpha, records in sorted(records_by_alpha.items()):
        epochs = [r.epoch for r in records]
        ax1.plot(epochs, [r.train_loss for r in records], label=f"{alpha:.0%}")
        ax2.plot(epochs, [r.valid_cvar for r in records], label=f"{alpha:.0%}")
    ax1.set_title("training loss")
    ax2.set_title("validation risk")
    for ax in (ax1, ax2):
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8, title="level")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def delta_surface_figure(surface, out_png: str | Path) -> Path:
    """Hedge-ratio slices across moneyness for a few maturities and vols."""
    out_png = Path(out_png)
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 3.6))
    taus = [surface.tau_grid[-1], surface.tau_grid[surface.tau_grid.size // 2], surface.tau_grid[0]]
    j_mid = surface.vol_grid.size // 2
    for tau in taus:
        k = int(tau) - int(surface.tau_grid[0])
        axes[0].plot(surface.moneyness_grid, surface.values[:, j_mid, k], label=f"tau={int(tau)}d")
    axes[0].set_xlabel("moneyness K/S")
    axes[0].set_ylabel("hedge ratio")
    axes[0].set_title(f"vol = {surface.vol_grid[j_mid]:.4f}/day")
    axes[0].legend(fontsize=8)
    k_last = surface.tau_grid.size - 1
    for j in (0, j_mid, surface.vol_grid.size - 1):
        axes[1].plot(
            surface.moneyness_grid,
            surface.values[:, j, k_last],
            label=f"vol={surface.vol_grid[j]:.4f}",
        )
    axes[1].set_xlabel("moneyness K/S")
    axes[1].set_title(f"tau = {int(surface.tau_grid[-1])}d")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png
