"""Likelihood-strategy ablation: same init, task stream and rewards; only the masking differs."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .config import RunConfig, Stage
from .harness import read_metrics, run_dir, run_stage
from .unigrpo import METRIC_FIELDS, STRATEGIES, baseline_llada_loglik, masked_loglik, noise_plan_timesteps

ABLATION_FIELDS = ("seed",) + METRIC_FIELDS
SUMMARY_FIELDS = ("strategy", "seed", "steps_to_threshold", "trailing_variance", "final_reward")


def strategy_config(cfg: RunConfig, strategy: str, seed: int) -> RunConfig:
    """Copy of ``cfg`` for one (strategy, seed) cell; nothing else changes."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    rl = dataclasses.replace(cfg.rl, strategy=strategy)
    out = str(Path(cfg.output_dir) / f"{strategy}_seed{seed}")
    return dataclasses.replace(cfg, stage=Stage.RL, seed=seed, rl=rl, output_dir=out)


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean; the first entries average over what is available."""
    v = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_threshold(rewards: Sequence[float], threshold: float, window: int) -> int:
    """First outer step whose full trailing window averages at least ``threshold``; len(rewards) if never.

    Partial windows at the start of a run are skipped so one lucky early group can't count.
    """
    s = smoothed(rewards, window)
    hit = np.nonzero(s[window - 1 :] >= threshold)[0]
    return int(hit[0]) + window - 1 if hit.size else len(rewards)


def trailing_variance(rewards: Sequence[float], window: int) -> float:
    """Variance of per-step reward around its trailing mean, averaged over the run."""
    v = np.asarray(rewards, dtype=float)
    return float(np.mean((v - smoothed(v, window)) ** 2))


def run_ablation(
    cfg: RunConfig,
    init: str,
    strategies: Sequence[str] | None = None,
    seeds: Sequence[int] | None = None,
) -> Path:
    """Train every (strategy, seed) cell from ``init`` and write the comparison tables.

    Writes ``ablation.csv`` (per-step curves), ``summary.csv`` and
    ``reward_curves.png`` under ``cfg.output_dir``.
    """
    strategies = list(strategies or [s.strip() for s in cfg.ablate.strategies.split(",") if s.strip()])
    seeds = list(range(cfg.ablate.seeds)) if seeds is None else list(seeds)
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    root = run_dir(cfg)
    root.mkdir(parents=True, exist_ok=True)
    curves: dict[tuple[str, int], list[float]] = {}
    rows = []
    for seed in seeds:
        for strategy in strategies:
            rd = run_stage(strategy_config(cfg, strategy, seed), init=init)
            metrics = read_metrics(rd / "metrics.csv")
            curves[(strategy, seed)] = [float(r["mean_reward"]) for r in metrics]
            rows.extend({"seed": seed, **r} for r in metrics)
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_summary(root / "summary.csv", summarize(curves, cfg.ablate.threshold, cfg.ablate.window))
    from .plotting import plot_reward_curves

    plot_reward_curves(curves, root / "reward_curves.png", window=cfg.ablate.window)
    return root


def summarize(curves: dict, threshold: float, window: int) -> list[dict]:
    out = []
    for (strategy, seed), r in sorted(curves.items()):
        r = np.nan_to_num(np.asarray(r, dtype=float), nan=0.0)
        out.append(dict(
            strategy=strategy,
            seed=seed,
            steps_to_threshold=steps_to_threshold(r, threshold, window),
            trailing_variance=trailing_variance(r, window),
            final_reward=float(r[-window:].mean()),
        ))
    return out


def write_summary(path, summary: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def median_by_strategy(summary: list[dict], field: str) -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for row in summary:
        by.setdefault(row["strategy"], []).append(float(row[field]))
    return {k: float(np.median(v)) for k, v in by.items()}


def estimator_equivalence(model, q, o, n: int, T: int, rng: np.random.Generator, vocab):
    """KS test between single-draw LLaDA-style (N=1) and single-step UniGRPO (mu=1) estimates."""
    llada = [baseline_llada_loglik(model, q, o, 1, rng, vocab)[0] for _ in range(n)]
    uni = []
    for _ in range(n):
        t1 = int(np.floor(rng.random() * T))
        (t_n,) = noise_plan_timesteps(T, 1, t1)
        uni.append(masked_loglik(model, q, o, t_n, T, rng, vocab)[1])
    return stats.ks_2samp(llada, uni)
