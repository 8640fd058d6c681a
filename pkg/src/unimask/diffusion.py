"""Forward corruption, mask-and-replace transition matrices and unmasking schedules.

Transition matrices follow the column-stochastic convention
``Q[i, j] = q(x_t = i | x_{t-1} = j)`` with the MASK state at index ``K``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .token_space import LayoutSequence

T_MIN = 1e-3


class Scope(enum.Enum):
    ALL = "all"
    RESPONSE_ONLY = "response_only"


class UnreachableStateError(ValueError):
    """Posterior requested for a corruption state with zero probability."""


@dataclass(frozen=True)
class MaskedSample:
    clean: LayoutSequence
    noisy: LayoutSequence
    t: float
    mask_positions: tuple[int, ...]


def draw_mask(n: int, t: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(t) mask over ``n`` slots conditioned on at least one hit.

    Equivalent in distribution to redrawing until something is masked, but
    bounded in time for tiny ``t``. ``t == 0`` degenerates to one uniformly
    chosen slot.
    """
    if n <= 0:
        raise ValueError("cannot mask an empty span")
    mask = rng.random(n) < t
    if mask.any():
        return mask
    if t <= 0.0:
        mask[rng.integers(n)] = True
        return mask
    # first hit k has P(k) ∝ (1-t)^k; slots after k are fresh Bernoulli(t)
    weights = np.exp(np.arange(n) * math.log1p(-t)) if t < 1 else np.eye(1, n)[0]
    k = rng.choice(n, p=weights / weights.sum())
    mask = np.zeros(n, dtype=bool)
    mask[k] = True
    mask[k + 1 :] = rng.random(n - k - 1) < t
    return mask


def sample_t(rng: np.random.Generator, low: float = T_MIN) -> float:
    return float(rng.uniform(low, 1.0))


def forward_mask(
    x0: LayoutSequence,
    t: float,
    scope: Scope,
    rng: np.random.Generator,
    mask_id: int,
) -> MaskedSample:
    """Absorbing-state corruption: each in-scope token becomes MASK w.p. ``t``."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"mask ratio t={t} outside (0, 1]")
    start = x0.prompt_len if scope == Scope.RESPONSE_ONLY else 0
    span = len(x0) - start
    if span <= 0:
        raise ValueError("no in-scope positions to corrupt")
    hit = draw_mask(span, t, rng)
    positions = tuple(int(i) + start for i in np.flatnonzero(hit))
    noisy = list(x0.tokens)
    for i in positions:
        noisy[i] = mask_id
    return MaskedSample(x0, x0.replace_tokens(noisy), float(t), positions)


# -- general mask-and-replace chain ---------------------------------------


@dataclass(frozen=True)
class TransitionSpec:
    K: int
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    gamma: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not len(self.alpha) == len(self.beta) == len(self.gamma):
            raise ValueError("alpha, beta, gamma must have equal length")
        for s, (a, b, g) in enumerate(zip(self.alpha, self.beta, self.gamma), start=1):
            if min(a, b, g) < 0:
                raise ValueError(f"negative probability at step {s}")
            if abs(a + self.K * b + g - 1.0) > 1e-12:
                raise ValueError(f"alpha + K*beta + gamma != 1 at step {s}")

    @property
    def T(self) -> int:
        return len(self.alpha)

    @classmethod
    def random(cls, K: int, T: int, rng: np.random.Generator) -> "TransitionSpec":
        """Random valid spec, handy for oracle tests."""
        alpha, beta, gamma = [], [], []
        for _ in range(T):
            w = rng.dirichlet(np.ones(3))
            alpha.append(w[0])
            beta.append(w[1] / K)
            gamma.append(1.0 - w[0] - K * (w[1] / K))
        return cls(K, tuple(alpha), tuple(beta), tuple(max(g, 0.0) for g in gamma))


def build_transition_matrix(spec: TransitionSpec, step: int) -> np.ndarray:
    """(K+1)x(K+1) one-step matrix for 1-based ``step``."""
    if not 1 <= step <= spec.T:
        raise ValueError(f"step {step} outside 1..{spec.T}")
    K = spec.K
    a, b, g = spec.alpha[step - 1], spec.beta[step - 1], spec.gamma[step - 1]
    Q = np.zeros((K + 1, K + 1))
    Q[:K, :K] = b
    Q[np.arange(K), np.arange(K)] = a + b
    Q[K, :K] = g
    Q[K, K] = 1.0
    return Q


def marginal_transition(spec: TransitionSpec, up_to: int) -> np.ndarray:
    """Q_bar = Q_{up_to} ... Q_1; ``up_to = 0`` gives the identity."""
    if not 0 <= up_to <= spec.T:
        raise ValueError(f"up_to {up_to} outside 0..{spec.T}")
    Qbar = np.eye(spec.K + 1)
    for s in range(1, up_to + 1):
        Qbar = build_transition_matrix(spec, s) @ Qbar
    return Qbar


def posterior(x_t: int, x_0: int, spec: TransitionSpec, step: int) -> np.ndarray:
    """q(x_{step-1} | x_step = x_t, x_0) as a length K+1 vector."""
    Q = build_transition_matrix(spec, step)
    prev = marginal_transition(spec, step - 1)
    denom = marginal_transition(spec, step)[x_t, x_0]
    if denom <= 0.0:
        raise UnreachableStateError(
            f"q(x_{step}={x_t} | x_0={x_0}) = 0; corruption state unreachable"
        )
    probs = Q[x_t, :] * prev[:, x_0] / denom
    return probs


# -- unmasking schedules ---------------------------------------------------


class ScheduleKind(enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind
    steps: int

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")


def masked_fraction(sch: Schedule, s: int) -> float:
    if not 0 <= s <= sch.steps:
        raise ValueError(f"step {s} outside 0..{sch.steps}")
    u = s / sch.steps
    if sch.kind == ScheduleKind.LINEAR:
        m = 1.0 - u
    else:
        m = math.cos(0.5 * math.pi * u)
    if s == sch.steps:
        m = 0.0  # cos(pi/2) is 6e-17, not 0
    return min(1.0, max(0.0, m))

