"""Confidence-ranked unmasking samplers.

All three entry points share one denoising core: at each step the model
predicts every masked position of the active region, and the most confident
predictions are committed. Committed tokens are never re-masked.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .diffusion import Schedule, ScheduleKind, masked_fraction
from .objectives import null_prompt_tokens
from .token_space import LayoutSequence, Modality, Segment, Vocabulary

log = logging.getLogger(__name__)

PAPER_TEXT_SAMPLER = dict(length=1024, steps=512, block_size=64, unmask_k=2)
PAPER_IMAGE_SAMPLER = dict(length=1024, steps=50, schedule="cosine", guidance_scale=3.5)


class SamplerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """``unmask_k=None`` derives per-step commit counts from ``schedule``."""

    length: int
    steps: int
    block_size: int | None = None
    schedule: ScheduleKind = ScheduleKind.LINEAR
    unmask_k: int | None = None
    guidance_scale: float = 0.0
    temperature: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "schedule", ScheduleKind(self.schedule))
        if self.length < 1 or self.steps < 1:
            raise SamplerConfigError("length and steps must be positive")
        if self.unmask_k is not None and self.unmask_k < 1:
            raise SamplerConfigError("unmask_k must be positive")
        if self.guidance_scale < 0 or self.temperature < 0:
            raise SamplerConfigError("guidance_scale and temperature must be >= 0")

    @property
    def block(self) -> int:
        return self.length if self.block_size is None else self.block_size

    def check_semi_ar(self) -> None:
        N, B = self.length, self.block
        if B < 1 or N % B:
            raise SamplerConfigError(f"length {N} not divisible by block size {B}")
        if self.unmask_k is not None:
            k = self.unmask_k
            if B % k:
                raise SamplerConfigError(f"block size {B} not divisible by unmask_k {k}")
            if self.steps * k != N:
                raise SamplerConfigError(f"steps {self.steps} != length/unmask_k = {N}/{k}")
        elif self.steps % (N // B):
            raise SamplerConfigError(f"steps {self.steps} not divisible by block count {N // B}")


def commit_counts(n: int, steps: int, unmask_k: int | None, kind: ScheduleKind) -> list[int]:
    """Tokens committed at each of ``steps`` steps; sums to ``n``."""
    if unmask_k is not None:
        counts = []
        left = n
        for _ in range(steps):
            c = min(unmask_k, left)
            counts.append(c)
            left -= c
        if left:
            raise SamplerConfigError(f"{steps} steps of {unmask_k} cannot commit {n} tokens")
        return counts
    sch = Schedule(kind, steps)

    def remaining(s):
        # ceiling keeps at least the scheduled fraction masked; tolerance absorbs 1 - s/S rounding
        return 0 if s == steps else math.ceil(n * masked_fraction(sch, s) - 1e-9)

    return [remaining(s - 1) - remaining(s) for s in range(1, steps + 1)]


def allowed_token_mask(modality: Sequence[Modality], vocab: Vocabulary) -> torch.Tensor:
    """(L, V) bool: which ids a position of the given modality may take."""
    V = vocab.total_size
    text = torch.zeros(V, dtype=torch.bool)
    text[: len(vocab.charset)] = True
    for name in ("EOS", "THINK_OPEN", "THINK_CLOSE", "DELIM"):
        text[vocab.special_ids[name]] = True
    image = torch.zeros(V, dtype=torch.bool)
    image[vocab.image_ids.start : vocab.image_ids.stop] = True
    rows = [image if m == Modality.IMAGE else text for m in modality]
    return torch.stack(rows) if rows else torch.zeros(0, V, dtype=torch.bool)


def _gumbel(shape, rng: np.random.Generator, dtype) -> torch.Tensor:
    u = rng.random(shape)
    return torch.as_tensor(-np.log(-np.log(np.clip(u, 1e-20, 1.0))), dtype=dtype)


@torch.no_grad()
def _denoise(
    model,
    x: torch.Tensor,
    prompt_len: int,
    modality: Sequence[Modality],
    regions: list[list[int]],
    counts: list[list[int]],
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator | None,
    trace: list | None,
) -> torch.Tensor:
    """Fill MASK positions region by region following per-step commit counts."""
    x = x.clone()
    allowed = allowed_token_mask(modality, vocab)
    w = cfg.guidance_scale
    null = torch.tensor(null_prompt_tokens(prompt_len, vocab), dtype=torch.long)
    if cfg.temperature > 0 and rng is None:
        raise ValueError("temperature > 0 needs an rng")
    was_training = model.training
    model.eval()
    try:
        for region, region_counts in zip(regions, counts):
            pos = torch.tensor(region, dtype=torch.long)
            for n_commit in region_counts:
                logits = model(x)
                if w > 0 and prompt_len > 0:
                    xu = x.clone()
                    xu[:, :prompt_len] = null
                    logits = (1 + w) * logits - w * model(xu)
                lg = logits[:, pos].masked_fill(~allowed[pos], float("-inf"))
                probs = lg.softmax(dim=-1)
                if cfg.temperature > 0:
                    noisy = lg / cfg.temperature + _gumbel(lg.shape, rng, lg.dtype)
                    cand = noisy.argmax(dim=-1)
                else:
                    cand = lg.argmax(dim=-1)
                conf = probs.gather(-1, cand.unsqueeze(-1)).squeeze(-1)
                still = x[:, pos] == vocab.MASK
                conf = conf.masked_fill(~still, float("-inf"))
                if n_commit:
                    order = torch.sort(conf, dim=-1, descending=True, stable=True).indices
                    chosen = order[:, :n_commit]
                    rows = torch.arange(x.shape[0]).unsqueeze(1)
                    if not bool(still[rows, chosen].all()):
                        raise RuntimeError("commit count exceeds masked positions in region")
                    x[rows, pos[chosen]] = cand[rows, chosen]
                if trace is not None:
                    trace.append(x.clone())
    finally:
        model.train(was_training)
    return x


def _start(prompts: Sequence[LayoutSequence], length: int, modality: Modality, vocab: Vocabulary):
    P = len(prompts[0])
    if any(len(p) != P for p in prompts):
        raise ValueError("prompts in a batch must share a length")
    x = torch.full((len(prompts), P + length), vocab.MASK, dtype=torch.long)
    for b, p in enumerate(prompts):
        x[b, :P] = torch.tensor(p.tokens, dtype=torch.long)
    mods = tuple(prompts[0].modality) + (modality,) * length
    return x, P, mods


def _wrap(x: torch.Tensor, prompts, modality: Sequence[Modality]) -> list[LayoutSequence]:
    out = []
    for b, p in enumerate(prompts):
        P = len(p)
        segs = tuple(p.segment) + (Segment.RESPONSE,) * (x.shape[1] - P)
        out.append(LayoutSequence(tuple(x[b].tolist()), segs, tuple(modality)))
    return out


def _as_prompt(prompt: LayoutSequence) -> LayoutSequence:
    if any(s != Segment.PROMPT for s in prompt.segment):
        prompt = prompt.as_prompt()
    return prompt


def semi_ar_generate_batch(
    model,
    prompts: Sequence[LayoutSequence],
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
    response_modality: Modality = Modality.TEXT,
    trace: list | None = None,
) -> list[LayoutSequence]:
    """Left-to-right blocks; inside a block, confidence-ranked parallel unmasking."""
    cfg.check_semi_ar()
    prompts = [_as_prompt(p) for p in prompts]
    x, P, mods = _start(prompts, cfg.length, response_modality, vocab)
    n_blocks = cfg.length // cfg.block
    per_block = cfg.steps // n_blocks
    regions = [list(range(P + i * cfg.block, P + (i + 1) * cfg.block)) for i in range(n_blocks)]
    counts = [commit_counts(cfg.block, per_block, cfg.unmask_k, cfg.schedule)] * n_blocks
    x = _denoise(model, x, P, mods, regions, counts, cfg, vocab, rng, trace)
    return _wrap(x, prompts, mods)


def semi_ar_generate(model, prompt, cfg, vocab, rng=None, response_modality=Modality.TEXT, trace=None):
    return semi_ar_generate_batch(model, [prompt], cfg, vocab, rng, response_modality, trace)[0]


def _check_parallel(cfg: SamplerConfig, n: int) -> list[int]:
    if cfg.unmask_k is not None and cfg.steps != math.ceil(n / cfg.unmask_k):
        raise SamplerConfigError(
            f"steps {cfg.steps} != ceil({n}/{cfg.unmask_k}) for fixed-k parallel decoding"
        )
    return commit_counts(n, cfg.steps, cfg.unmask_k, cfg.schedule)


def parallel_generate_batch(
    model,
    prompts: Sequence[LayoutSequence],
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
    response_modality: Modality | Sequence[Modality] = Modality.IMAGE,
    trace: list | None = None,
) -> list[LayoutSequence]:
    """Whole response as one block; commit counts follow the schedule, with optional CFG."""
    counts = _check_parallel(cfg, cfg.length)
    prompts = [_as_prompt(p) for p in prompts]
    if isinstance(response_modality, Modality):
        x, P, mods = _start(prompts, cfg.length, response_modality, vocab)
    else:
        if len(response_modality) != cfg.length:
            raise ValueError("response modality template must have cfg.length entries")
        x, P, mods = _start(prompts, cfg.length, Modality.TEXT, vocab)
        mods = tuple(prompts[0].modality) + tuple(response_modality)
    regions = [list(range(P, P + cfg.length))]
    x = _denoise(model, x, P, mods, regions, [counts], cfg, vocab, rng, trace)
    return _wrap(x, prompts, mods)


def parallel_generate(model, prompt, cfg, vocab, rng=None, response_modality=Modality.IMAGE, trace=None):
    return parallel_generate_batch(model, [prompt], cfg, vocab, rng, response_modality, trace)[0]


def inpaint(
    model,
    partial: LayoutSequence,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> LayoutSequence:
    """Fill only the MASK positions of ``partial``; every given token is kept.

    ``cfg.length`` is ignored; the masked count plays its role.
    """
    masked = [i for i, t in enumerate(partial.tokens) if t == vocab.MASK]
    if not masked:
        log.warning("inpaint called without MASK tokens; returning input unchanged")
        return partial
    counts = _check_parallel(cfg, len(masked))
    x = torch.tensor([partial.tokens], dtype=torch.long)
    x = _denoise(
        model, x, partial.prompt_len, partial.modality, [masked], [counts], cfg, vocab, rng, trace
    )
    return partial.replace_tokens(x[0].tolist())
