"""Masked-token objectives: unified pretraining loss and mixed CoT SFT loss.

Both are ``-(1/t) * sum_{masked i} log p(x0_i | x_t)``, averaged over batch
items with ``t`` drawn per item. They differ only in which positions may be
corrupted: everything, or the response segment with the prompt kept clean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .diffusion import Scope, draw_mask, sample_t
from .model import token_log_probs
from .token_space import LayoutSequence, Vocabulary


@dataclass
class LossReport:
    value: torch.Tensor
    masked_count: int
    t_used: float | list[float]
    per_position: dict[int, float] | None = None

    def item(self) -> float:
        return float(self.value.detach())


@dataclass
class CorruptedBatch:
    noisy: torch.Tensor  # (B, L) long
    clean: torch.Tensor  # (B, L) long, prompt possibly swapped for the null prompt
    mask: torch.Tensor  # (B, L) bool
    t: np.ndarray  # (B,)


def null_prompt_tokens(prompt_len: int, vocab: Vocabulary) -> list[int]:
    """Unconditional stand-in for a prompt: one NULL_PROMPT, left-padded to keep positions."""
    if prompt_len == 0:
        return []
    return [vocab.PAD] * (prompt_len - 1) + [vocab.NULL_PROMPT]


def corrupt_batch(
    seqs: Sequence[LayoutSequence],
    rng: np.random.Generator,
    vocab: Vocabulary,
    scope: Scope,
    prompt_dropout: float = 0.0,
    t: float | Sequence[float] | None = None,
) -> CorruptedBatch:
    """Draw (prompt drop, t, mask) per item, in that order, from ``rng``."""
    if not seqs:
        raise ValueError("empty batch")
    L = len(seqs[0])
    if any(len(s) != L for s in seqs):
        raise ValueError("batch items must share a length")
    if L == 0:
        raise ValueError("cannot corrupt an empty sequence")
    clean = np.empty((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    ts = np.empty(len(seqs))
    for b, seq in enumerate(seqs):
        if vocab.MASK in seq.tokens:
            raise ValueError("clean sequence already contains MASK")
        tokens = list(seq.tokens)
        p = seq.prompt_len
        if prompt_dropout > 0 and p > 0 and rng.random() < prompt_dropout:
            tokens[:p] = null_prompt_tokens(p, vocab)
        if t is None:
            tb = sample_t(rng)
        else:
            tb = float(t[b]) if np.ndim(t) else float(t)
        if not 0.0 < tb <= 1.0:
            raise ValueError(f"mask ratio t={tb} outside (0, 1]")
        start = p if scope == Scope.RESPONSE_ONLY else 0
        if L - start <= 0:
            raise ValueError("no positions in scope (empty response?)")
        mask[b, start:] = draw_mask(L - start, tb, rng)
        clean[b] = tokens
        ts[b] = tb
    clean_t = torch.from_numpy(clean)
    mask_t = torch.from_numpy(mask)
    noisy = clean_t.masked_fill(mask_t, vocab.MASK)
    return CorruptedBatch(noisy, clean_t, mask_t, ts)


def per_item_loss(model, batch: CorruptedBatch) -> torch.Tensor:
    """(1/t_b) * sum over masked positions of -log p, one value per item."""
    logits = model(batch.noisy)
    lp = token_log_probs(logits, batch.clean)
    t = torch.as_tensor(batch.t, dtype=lp.dtype)
    return -(lp * batch.mask.to(lp.dtype)).sum(dim=1) / t


def batch_loss(
    model,
    seqs: Sequence[LayoutSequence],
    rng: np.random.Generator,
    vocab: Vocabulary,
    scope: Scope,
    prompt_dropout: float = 0.0,
) -> LossReport:
    """Mean per-item loss over a batch that may mix sequence lengths."""
    groups: dict[int, list[LayoutSequence]] = {}
    for s in seqs:
        groups.setdefault(len(s), []).append(s)
    losses, ts, count = [], [], 0
    for length in sorted(groups):
        cb = corrupt_batch(groups[length], rng, vocab, scope, prompt_dropout)
        losses.append(per_item_loss(model, cb))
        ts.extend(cb.t.tolist())
        count += int(cb.mask.sum())
    value = torch.cat(losses).mean()
    return LossReport(value, count, ts)


def _single(model, x0, rng, vocab, scope, t) -> LossReport:
    cb = corrupt_batch([x0], rng, vocab, scope, 0.0, t)
    logits = model(cb.noisy)
    lp = token_log_probs(logits, cb.clean)[0]
    m = cb.mask[0]
    t_used = float(cb.t[0])
    value = -(lp * m.to(lp.dtype)).sum() / t_used
    positions = torch.nonzero(m).flatten().tolist()
    per_position = {i: -float(lp[i].detach()) / t_used for i in positions}
    return LossReport(value, len(positions), t_used, per_position)


def unified_loss(
    model,
    x0: LayoutSequence,
    rng: np.random.Generator,
    vocab: Vocabulary,
    t: float | None = None,
    scope: Scope = Scope.ALL,
) -> LossReport:
    """Corrupt every position (or only the response) with ratio t and score the masked ones."""
    if len(x0) == 0:
        raise ValueError("unified_loss needs a non-empty sequence")
    return _single(model, x0, rng, vocab, scope, t)


def mixed_sft_loss(
    model,
    p0: LayoutSequence,
    r0: LayoutSequence,
    rng: np.random.Generator,
    vocab: Vocabulary,
    t: float | None = None,
) -> LossReport:
    """Keep the prompt, corrupt only the response, score masked response tokens."""
    if len(r0) == 0:
        raise ValueError("mixed_sft_loss needs a non-empty response")
    return _single(model, p0.as_prompt() + r0.as_response(), rng, vocab, Scope.RESPONSE_ONLY, t)
