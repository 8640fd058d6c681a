"""Matplotlib figures for training reports; always rendered to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _trailing_mean(v, window):
    from .ablation import smoothed

    return smoothed(v, window)


def plot_reward_curves(curves: dict, path, window: int = 25) -> Path:
    """One panel; a thin line per (strategy, seed) and a bold median per strategy."""
    fig, ax = plt.subplots(figsize=(7, 4))
    strategies = sorted({s for s, _ in curves})
    colors = dict(zip(strategies, plt.rcParams["axes.prop_cycle"].by_key()["color"]))
    for strategy in strategies:
        runs = [np.nan_to_num(np.asarray(v, dtype=float)) for (s, _), v in sorted(curves.items()) if s == strategy]
        for r in runs:
            ax.plot(_trailing_mean(r, window), color=colors[strategy], alpha=0.25, lw=0.8)
        n = min(len(r) for r in runs)
        med = np.median([_trailing_mean(r[:n], window) for r in runs], axis=0)
        ax.plot(med, color=colors[strategy], lw=2, label=f"{strategy} (median of {len(runs)})")
    ax.set_xlabel("outer step")
    ax.set_ylabel(f"mean group reward ({window}-step trailing mean)")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(rows: list[dict], path) -> Path:
    """Training loss plus any validation columns from a supervised metrics.csv."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.array([int(r["step"]) for r in rows if r.get("loss")])
    loss = np.array([float(r["loss"]) for r in rows if r.get("loss")])
    if loss.size:
        ax.plot(steps, _trailing_mean(loss, 50), label="train (50-step mean)", lw=1)
    for key in ("val_text", "val_t2i"):
        pts = [(int(r["step"]), float(r[key])) for r in rows if r.get(key)]
        if pts:
            s, v = zip(*pts)
            ax.plot(s, v, marker="o", ms=3, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("masked-token loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
