"""Group-relative policy optimisation for masked diffusion policies.

The likelihood of a frozen completion is approximated from one forward pass
on a partially masked copy of it: the query stays clean, the completion is
masked at ratio ``t_n / T``, and log-probabilities are read off the masked
positions only. Across the ``mu`` inner updates of an outer step, ``t_n``
walks from a random start to ``T`` in uniform strides.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from .diffusion import draw_mask
from .model import token_log_probs
from .rewards import RewardSpec, composite_reward
from .sampling import SamplerConfig, parallel_generate_batch, semi_ar_generate_batch
from .token_space import LayoutSequence, Modality, Vocabulary

log = logging.getLogger(__name__)

STRATEGIES = ("unigrpo", "d1", "llada", "random")
METRIC_FIELDS = ("step", "mean_reward", "kl", "clip_fraction", "loss", "strategy")


@dataclass(frozen=True)
class UniGRPOConfig:
    G: int = 8
    mu: int = 4
    epsilon: float = 0.2
    beta: float = 0.02
    T: int = 1000
    lr: float = 1e-4
    strategy: str = "unigrpo"
    llada_samples: int = 4
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size G must be >= 2")
        if self.epsilon <= 0 or self.beta < 0:
            raise ValueError("need epsilon > 0 and beta >= 0")
        if not self.T >= self.mu >= 1:
            raise ValueError(f"need T >= mu >= 1, got T={self.T}, mu={self.mu}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass(frozen=True)
class NoisePlan:
    T: int
    mu: int
    t_list: tuple[int, ...]

    def __post_init__(self):
        if len(self.t_list) != self.mu:
            raise ValueError("t_list must have mu entries")
        if any(not 0 <= t <= self.T for t in self.t_list):
            raise ValueError("timesteps must lie in [0, T]")
        if any(b < a for a, b in zip(self.t_list, self.t_list[1:])):
            raise ValueError("timesteps must be non-decreasing")


def noise_plan_timesteps(T: int, mu: int, t1: int) -> tuple[int, ...]:
    """t_1 followed by mu-1 uniform strides up to T (floored).

    Integer arithmetic keeps the floor exact where float division would land
    just below a whole number.
    """
    if mu == 1:
        return (t1,)
    return (t1,) + tuple(t1 + (n - 1) * (T - t1) // (mu - 1) for n in range(2, mu + 1))


def make_noise_plan(T: int, mu: int, rng: np.random.Generator) -> NoisePlan:
    if not T >= mu >= 1:
        raise ValueError(f"need T >= mu >= 1, got T={T}, mu={mu}")
    t1 = math.floor(rng.random() * T)
    return NoisePlan(T, mu, noise_plan_timesteps(T, mu, t1))


def compute_advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / std with population std; a flat group gets all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std < eps:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass
class RolloutGroup:
    query: LayoutSequence
    completions: list[LayoutSequence]
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    plans: list[NoisePlan] = field(default_factory=list)

    def __post_init__(self):
        if len(self.completions) < 2:
            raise ValueError("a rollout group needs G >= 2 completions")


def sample_group(
    policy_old,
    q: LayoutSequence,
    G: int,
    sampler_cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    sampler: str = "semi_ar",
) -> RolloutGroup:
    """G completions from the old policy; they stay fixed for the outer step."""
    if sampler == "semi_ar":
        full = semi_ar_generate_batch(policy_old, [q] * G, sampler_cfg, vocab, rng)
    elif sampler == "parallel":
        full = parallel_generate_batch(policy_old, [q] * G, sampler_cfg, vocab, rng, Modality.IMAGE)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return RolloutGroup(q, [s.response for s in full])


# -- masked likelihoods ----------------------------------------------------------


@dataclass
class MaskedBatch:
    noisy: torch.Tensor  # (B, L)
    clean: torch.Tensor  # (B, L)
    mask: torch.Tensor  # (B, L) bool
    row_of: np.ndarray  # completion index for each row


def _stack(q: LayoutSequence, completions: Sequence[LayoutSequence], rows: Sequence[int]):
    P = len(q)
    clean = np.array([q.tokens + completions[i].tokens for i in rows], dtype=np.int64)
    return clean, P


def build_masked_batch(
    q: LayoutSequence,
    completions: Sequence[LayoutSequence],
    answer_ratios: Sequence[float],
    rng: np.random.Generator,
    vocab: Vocabulary,
    rows: Sequence[int] | None = None,
    question_ratios: Sequence[float] | None = None,
) -> MaskedBatch:
    """Mask each row's answer at its ratio (at least one token); the question only if asked."""
    rows = list(range(len(completions))) if rows is None else list(rows)
    clean, P = _stack(q, completions, rows)
    mask = np.zeros_like(clean, dtype=bool)
    n_ans = clean.shape[1] - P
    for b, ratio in enumerate(answer_ratios):
        if question_ratios is not None:
            mask[b, :P] = rng.random(P) < question_ratios[b]
        mask[b, P:] = draw_mask(n_ans, ratio, rng)
    clean_t = torch.from_numpy(clean)
    mask_t = torch.from_numpy(mask)
    return MaskedBatch(clean_t.masked_fill(mask_t, vocab.MASK), clean_t, mask_t, np.asarray(rows))


def answer_mask(mb: MaskedBatch, prompt_len: int) -> torch.Tensor:
    m = mb.mask.clone()
    m[:, :prompt_len] = False
    return m


def batch_token_logps(model, mb: MaskedBatch) -> torch.Tensor:
    return token_log_probs(model(mb.noisy), mb.clean)


def _masked_mean(lp: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    m = m.to(lp.dtype)
    return (lp * m).sum(dim=-1) / m.sum(dim=-1)


@torch.no_grad()
def masked_loglik(model, q, o, t_n: int, T: int, rng, vocab: Vocabulary):
    """Log-probs at masked answer positions for ratio t_n/T, and their mean.

    A ratio of 0 still masks one uniformly chosen answer token.
    """
    mb = build_masked_batch(q, [o], [t_n / T], rng, vocab)
    lp = batch_token_logps(model, mb)[0]
    m = answer_mask(mb, len(q))[0]
    vals = lp[m]
    return vals, float(vals.mean())


@torch.no_grad()
def baseline_d1_loglik(model, q, o, rng, vocab: Vocabulary, question_ratio: float | None = None):
    """Randomly masked question, fully masked answer; scored on the answer."""
    qr = rng.random() if question_ratio is None else question_ratio
    mb = build_masked_batch(q, [o], [1.0], rng, vocab, question_ratios=[qr])
    lp = batch_token_logps(model, mb)[0]
    m = answer_mask(mb, len(q))[0]
    vals = lp[m]
    return vals, float(vals.mean())


@torch.no_grad()
def baseline_llada_loglik(model, q, o, N: int, rng, vocab: Vocabulary, chunk: int = 512):
    """Monte-Carlo mean over N mask ratios drawn from U(0,1); returns (estimate, std error)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    draws = []
    for start in range(0, N, chunk):
        n = min(chunk, N - start)
        ratios = rng.random(n)
        mb = build_masked_batch(q, [o], ratios, rng, vocab, rows=[0] * n)
        lp = batch_token_logps(model, mb)
        draws.append(_masked_mean(lp, answer_mask(mb, len(q))))
    d = torch.cat(draws).double()
    se = float(d.std(unbiased=True) / math.sqrt(N)) if N > 1 else float("nan")
    return float(d.mean()), se


# -- objective --------------------------------------------------------------------


@dataclass
class ObjectiveResult:
    loss: torch.Tensor
    kl: float
    clip_fraction: float
    mean_ratio: float


def strategy_masks(
    strategy: str,
    group: RolloutGroup,
    n: int,
    cfg: UniGRPOConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
) -> MaskedBatch:
    """Masked inputs for inner step ``n`` (1-based) under a likelihood strategy."""
    G = len(group.completions)
    if strategy == "unigrpo":
        ratios = [p.t_list[n - 1] / p.T for p in group.plans]
        return build_masked_batch(group.query, group.completions, ratios, rng, vocab)
    if strategy == "random":
        ratios = [math.floor(rng.random() * cfg.T) / cfg.T for _ in range(G)]
        return build_masked_batch(group.query, group.completions, ratios, rng, vocab)
    if strategy == "d1":
        qr = rng.random(G)
        return build_masked_batch(
            group.query, group.completions, [1.0] * G, rng, vocab, question_ratios=qr
        )
    if strategy == "llada":
        rows = [i for i in range(G) for _ in range(cfg.llada_samples)]
        ratios = rng.random(len(rows))
        return build_masked_batch(group.query, group.completions, ratios, rng, vocab, rows=rows)
    raise ValueError(f"unknown strategy {strategy!r}")


def clipped_objective(
    logp: torch.Tensor,
    old_logp: torch.Tensor,
    ref_logp: torch.Tensor,
    mask: torch.Tensor,
    advantages: torch.Tensor,
    epsilon: float,
    beta: float,
    row_of: np.ndarray | None = None,
) -> ObjectiveResult:
    """Negated clipped surrogate minus k3 KL, averaged per completion then over the group.

    Rows that are repeated Monte-Carlo draws of one completion (``row_of``)
    are averaged together before the group mean.
    """
    ratio = torch.exp(logp - old_logp)
    m = mask.to(logp.dtype)
    if not bool(torch.isfinite(ratio[mask]).all()):
        bad = int((~torch.isfinite(ratio[mask])).sum())
        raise FloatingPointError(
            f"{bad} non-finite importance ratios; max |logp - old| = "
            f"{float((logp - old_logp)[mask].abs().max()):.3g}"
        )
    A = advantages.to(logp.dtype).unsqueeze(1)
    surr = torch.minimum(ratio * A, ratio.clamp(1 - epsilon, 1 + epsilon) * A)
    log_r = ref_logp - logp
    kl = torch.exp(log_r) - log_r - 1
    per_tok = surr - beta * kl
    per_row = (per_tok * m).sum(1) / m.sum(1)
    if row_of is not None and len(np.unique(row_of)) != len(row_of):
        idx = torch.as_tensor(row_of)
        G = int(idx.max()) + 1
        sums = torch.zeros(G, dtype=per_row.dtype).index_add(0, idx, per_row)
        per_seq = sums / torch.bincount(idx, minlength=G).to(per_row.dtype)
    else:
        per_seq = per_row
    loss = -per_seq.mean()
    with torch.no_grad():
        clipped = ((ratio - 1).abs() > epsilon) & mask
        clip_fraction = float(clipped.sum() / mask.sum())
        kl_mean = float(_masked_mean(kl, mask).mean())
        mean_ratio = float(ratio[mask].mean())
    return ObjectiveResult(loss, kl_mean, clip_fraction, mean_ratio)


def unigrpo_objective(
    theta,
    old,
    ref,
    group: RolloutGroup,
    n: int,
    cfg: UniGRPOConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    strategy: str | None = None,
    mb: MaskedBatch | None = None,
) -> ObjectiveResult:
    """Loss at inner step ``n``; theta, old and ref all see the same masked batch."""
    if group.advantages is None:
        raise ValueError("advantages must be computed before the objective")
    if mb is None:
        mb = strategy_masks(strategy or cfg.strategy, group, n, cfg, vocab, rng)
    m = answer_mask(mb, len(group.query))
    with torch.no_grad():
        old_lp = batch_token_logps(old, mb)
        ref_lp = batch_token_logps(ref, mb)
    logp = batch_token_logps(theta, mb)
    adv = torch.as_tensor(group.advantages[mb.row_of])
    return clipped_objective(logp, old_lp, ref_lp, m, adv, cfg.epsilon, cfg.beta, mb.row_of)


# -- training loop ----------------------------------------------------------------


def unigrpo_train(
    policy,
    ref,
    task_fn: Callable[[np.random.Generator], object],
    cfg: UniGRPOConfig,
    sampler_cfg: SamplerConfig,
    reward_spec: RewardSpec,
    vocab: Vocabulary,
    steps: int,
    seed: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    rngs: dict | None = None,
    start_step: int = 0,
    sampler: str = "semi_ar",
) -> Iterator[dict]:
    """Run ``steps`` outer iterations, yielding one metrics row per outer step.

    Tasks, rollouts and masks draw from separate streams so that strategies
    compared on one seed see the same task sequence.
    """
    if optimizer is None:
        optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    if rngs is None:
        rngs = make_rl_rngs(seed)
    ref.eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    for step in range(start_step, start_step + steps):
        old = copy.deepcopy(policy).eval()
        task = task_fn(rngs["task"])
        group = sample_group(old, task.prompt, cfg.G, sampler_cfg, vocab, rngs["sample"], sampler)
        ctx = {"gold": task.gold, "vocab": vocab, "prompt_text": task.prompt_text}
        try:
            rewards = np.array([composite_reward(reward_spec, c, ctx) for c in group.completions])
        except Exception as exc:
            log.warning("reward scoring failed at step %d, skipping group: %s", step, exc)
            yield _row(step, float("nan"), 0.0, 0.0, 0.0, cfg.strategy)
            continue
        group.rewards = rewards
        group.advantages = compute_advantages(rewards)
        group.plans = [make_noise_plan(cfg.T, cfg.mu, rngs["noise"]) for _ in group.completions]
        if not group.advantages.any():
            yield _row(step, float(rewards.mean()), 0.0, 0.0, 0.0, cfg.strategy)
            continue
        kls, clips, losses = [], [], []
        policy.train()
        for n in range(1, cfg.mu + 1):
            res = unigrpo_objective(policy, old, ref, group, n, cfg, vocab, rngs["noise"])
            optimizer.zero_grad(set_to_none=True)
            res.loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
            optimizer.step()
            kls.append(res.kl)
            clips.append(res.clip_fraction)
            losses.append(float(res.loss.detach()))
        yield _row(
            step, float(rewards.mean()), float(np.mean(kls)), float(np.mean(clips)),
            float(np.mean(losses)), cfg.strategy,
        )


def make_rl_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: np.random.default_rng(s) for name, s in zip(("task", "sample", "noise"), children)}


def _row(step, mean_reward, kl, clip_fraction, loss, strategy) -> dict:
    return dict(
        step=step, mean_reward=mean_reward, kl=kl, clip_fraction=clip_fraction,
        loss=loss, strategy=strategy,
    )
