"""Rule-based rewards: answer correctness, think-block format and image alignment.

Neural scorers (CLIP, human-preference models) are replaced by synthetic
constraint scorers over the toy ``count=n color=c shape=s`` prompt grammar.
Any callable ``(grid, prompt) -> float`` can be registered in their place.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import ndimage

from .token_space import (
    LayoutSequence,
    Modality,
    TokenizeError,
    Vocabulary,
    decode_text,
    parse_cot,
)

log = logging.getLogger(__name__)


class TaskKind(enum.Enum):
    TEXT_REASONING = "text_reasoning"
    MM_REASONING = "mm_reasoning"
    T2I = "t2i"


REWARD_WEIGHTS = {
    "correctness": 2.0,
    "format": 0.5,
    "clip": 0.1,
    "image_reward": 0.1,
}

DEFAULT_COMPONENTS = {
    TaskKind.TEXT_REASONING: ("correctness", "format"),
    TaskKind.MM_REASONING: ("correctness", "format", "clip"),
    TaskKind.T2I: ("clip", "image_reward"),
}

# -- toy image grammar -----------------------------------------------------

GRID_SIDE = 8
BACKGROUND = 0
COLORS = ("red", "green", "blue", "gold")
SHAPES = {
    "dot": np.ones((1, 1), dtype=bool),
    "bar": np.ones((1, 2), dtype=bool),
    "col": np.ones((2, 1), dtype=bool),
    "box": np.ones((2, 2), dtype=bool),
}
MAX_RAW_SCORE = 10.0

_PROMPT_RE = re.compile(r"^\s*count=(\d+)\s+color=(\w+)\s+shape=(\w+)\s*$")


def color_codes(color: str, codebook_size: int) -> range:
    """Contiguous code range for a color; code 0 is background."""
    width = (codebook_size - 1) // len(COLORS)
    if width < 1:
        raise ValueError(f"codebook of size {codebook_size} too small for {len(COLORS)} colors")
    j = COLORS.index(color)
    return range(1 + j * width, 1 + (j + 1) * width)


def parse_t2i_prompt(prompt: str) -> tuple[int, str, str]:
    m = _PROMPT_RE.match(prompt)
    if not m:
        raise ValueError(f"prompt {prompt!r} does not follow 'count=n color=c shape=s'")
    count, color, shape = int(m.group(1)), m.group(2), m.group(3)
    if color not in COLORS or shape not in SHAPES:
        raise ValueError(f"unknown color/shape in {prompt!r}")
    return count, color, shape


def _components(grid: np.ndarray):
    labels, n = ndimage.label(grid != BACKGROUND)
    return [labels == k for k in range(1, n + 1)]


def _footprint(component: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(component.any(axis=1))
    cols = np.flatnonzero(component.any(axis=0))
    return component[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def _matches(component: np.ndarray, shape: str) -> bool:
    fp = _footprint(component)
    target = SHAPES[shape]
    return fp.shape == target.shape and bool(np.array_equal(fp, target))


def constraint_score(grid, prompt: str, codebook_size: int = 64) -> float:
    """Stand-in for CLIP: 10 x fraction of {count, color, shape} constraints met."""
    grid = np.asarray(grid)
    count, color, shape = parse_t2i_prompt(prompt)
    comps = _components(grid)
    codes = color_codes(color, codebook_size)
    fg = grid[grid != BACKGROUND]
    met = [
        len(comps) == count,
        fg.size > 0 and bool(np.all((fg >= codes.start) & (fg < codes.stop))),
        bool(comps) and all(_matches(c, shape) for c in comps),
    ]
    return MAX_RAW_SCORE * sum(met) / len(met)


def tidiness_score(grid, prompt: str, codebook_size: int = 64) -> float:
    """Stand-in for a preference model: share of foreground in clean, single-color motifs."""
    grid = np.asarray(grid)
    comps = _components(grid)
    if not comps:
        return 0.0
    good = 0
    for comp in comps:
        if not any(_matches(comp, s) for s in SHAPES):
            continue
        vals = grid[comp]
        if any(int(vals.min()) in color_codes(c, codebook_size) and int(vals.max()) in color_codes(c, codebook_size) for c in COLORS):
            good += int(comp.sum())
    return MAX_RAW_SCORE * good / int((grid != BACKGROUND).sum())


# -- text rewards ------------------------------------------------------------


def canonicalize_answer(s: str) -> str:
    s = s.strip().casefold()
    m = re.fullmatch(r"([+-]?)0*(\d+)", s)
    if m:
        sign = "-" if m.group(1) == "-" and m.group(2) != "0" else ""
        return sign + m.group(2)
    return s


def extract_answer(completion: LayoutSequence, vocab: Vocabulary) -> str | None:
    response = completion.response if completion.prompt_len else completion
    parts = parse_cot(response, vocab)
    if parts is None:
        return None
    try:
        return decode_text(parts[1], vocab)
    except TokenizeError:
        return None


def is_correct(completion: LayoutSequence, gold: str, vocab: Vocabulary, parser=extract_answer) -> bool:
    answer = parser(completion, vocab)
    return answer is not None and canonicalize_answer(answer) == canonicalize_answer(gold)


def correctness_reward(completion: LayoutSequence, gold: str, vocab: Vocabulary, parser=extract_answer) -> float:
    return REWARD_WEIGHTS["correctness"] * is_correct(completion, gold, vocab, parser)


def is_well_formatted(completion: LayoutSequence, vocab: Vocabulary) -> bool:
    response = completion.response if completion.prompt_len else completion
    toks = response.tokens
    if toks.count(vocab.THINK_OPEN) != 1 or toks.count(vocab.THINK_CLOSE) != 1:
        return False
    parts = parse_cot(response, vocab)
    if parts is None:
        return False
    reasoning = parts[0].tokens
    return (
        vocab.THINK_OPEN in reasoning
        and vocab.THINK_CLOSE in reasoning
        and reasoning.index(vocab.THINK_OPEN) < reasoning.index(vocab.THINK_CLOSE)
    )


def format_reward(completion: LayoutSequence, vocab: Vocabulary) -> float:
    return REWARD_WEIGHTS["format"] * is_well_formatted(completion, vocab)


# -- image rewards -----------------------------------------------------------


def alignment_reward(image, prompt: str, scorer: Callable[..., float], weight: float | None = None) -> float:
    """Scaled alignment score; a failing scorer yields 0 with a warning."""
    weight = REWARD_WEIGHTS["clip"] if weight is None else weight
    try:
        return weight * float(scorer(image, prompt))
    except Exception as exc:  # scorers are user-pluggable
        log.warning("alignment scorer failed: %s", exc)
        return 0.0


def completion_grid(completion: LayoutSequence, vocab: Vocabulary, side: int = GRID_SIDE) -> np.ndarray | None:
    """The image part of a completion as a code grid, or None if absent/incomplete."""
    response = completion.response if completion.prompt_len else completion
    toks = [t for t, m in zip(response.tokens, response.modality) if m == Modality.IMAGE]
    if len(toks) != side * side or not all(vocab.is_image(t) for t in toks):
        return None
    codes = np.asarray(toks) - vocab.image_ids.start
    return codes.reshape(side, side)


# -- composite -----------------------------------------------------------------

RawScorer = Callable[[LayoutSequence, Mapping], float]


def _raw_correctness(completion, ctx):
    return float(is_correct(completion, ctx["gold"], ctx["vocab"]))


def _raw_format(completion, ctx):
    return float(is_well_formatted(completion, ctx["vocab"]))


def _image_scorer(fn):
    def raw(completion, ctx):
        vocab = ctx["vocab"]
        grid = ctx.get("image")
        if grid is None:
            grid = completion_grid(completion, vocab)
        if grid is None:
            return 0.0
        return alignment_reward(
            grid, ctx["prompt_text"], lambda g, p: fn(g, p, vocab.codebook_size), weight=1.0
        )

    return raw


SCORERS: dict[str, RawScorer] = {
    "correctness": _raw_correctness,
    "format": _raw_format,
    "clip": _image_scorer(constraint_score),
    "image_reward": _image_scorer(tidiness_score),
}


def register_scorer(name: str, fn: RawScorer) -> None:
    SCORERS[name] = fn


@dataclass(frozen=True)
class RewardSpec:
    task_kind: TaskKind
    components: tuple[tuple[str, float], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if not self.components:
            comps = tuple((name, REWARD_WEIGHTS[name]) for name in DEFAULT_COMPONENTS[self.task_kind])
            object.__setattr__(self, "components", comps)
        for name, _ in self.components:
            if name not in SCORERS:
                raise ValueError(f"unknown scorer {name!r}; registered: {sorted(SCORERS)}")

    @classmethod
    def default(cls, task_kind: TaskKind) -> "RewardSpec":
        return cls(task_kind)


def composite_reward(spec: RewardSpec, completion: LayoutSequence, context: Mapping) -> float:
    return float(sum(w * SCORERS[name](completion, context) for name, w in spec.components))
