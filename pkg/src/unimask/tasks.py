"""Synthetic task generators: integer arithmetic with CoT traces and toy text-to-image grids."""

from __future__ import annotations

import ast
import operator
from dataclasses import dataclass

import numpy as np

from .rewards import (
    BACKGROUND,
    COLORS,
    GRID_SIDE,
    SHAPES,
    TaskKind,
    color_codes,
)
from .token_space import (
    LayoutSequence,
    Segment,
    Vocabulary,
    encode_text,
    grid_to_tokens,
    pad_to,
    wrap_cot,
)

# fixed slot lengths per difficulty so batches stack without attention masks
ARITH_PROMPT_LEN = {1: 12, 2: 24, 3: 28}
ARITH_RESPONSE_LEN = {1: 16, 2: 40, 3: 48}
T2I_PROMPT_LEN = 32
T2I_REASONING_WIDTH = 12
MAX_COUNT = 3


@dataclass(frozen=True)
class TaskInstance:
    prompt: LayoutSequence
    gold: str | np.ndarray
    kind: TaskKind
    response: LayoutSequence  # CoT-formatted target
    plain_response: LayoutSequence  # target without the CoT wrapper
    prompt_text: str

    @property
    def sft_sequence(self) -> LayoutSequence:
        return self.prompt + self.response

    @property
    def pretrain_sequence(self) -> LayoutSequence:
        return self.prompt + self.plain_response


def format_prompt(text: str, length: int, vocab: Vocabulary) -> LayoutSequence:
    """Left-padded prompt slot, the layout every generator (and the CLI) uses."""
    return pad_to(encode_text(text, vocab, Segment.PROMPT), length, vocab.PAD, left=True)


def _cot_response(reasoning: str, result: LayoutSequence, length: int | None, vocab: Vocabulary):
    body = wrap_cot(encode_text(reasoning, vocab), result, vocab)
    return body if length is None else pad_to(body, length, vocab.EOS)


# -- arithmetic -------------------------------------------------------------


def gen_arithmetic_task(rng: np.random.Generator, difficulty: int, vocab: Vocabulary) -> TaskInstance:
    """Integer expression, its stepwise CoT trace and answer.

    difficulty 1: ``a+b`` / ``a-b``; 2: ``(a-b)*(c+d)``; 3: ``(a-b)*(c+d)/e``.
    Operands never exceed ``max_operand(difficulty)``.
    """
    if difficulty not in ARITH_PROMPT_LEN:
        raise ValueError(f"difficulty must be one of {sorted(ARITH_PROMPT_LEN)}")
    hi = max_operand(difficulty)
    if difficulty == 1:
        a, b = (int(v) for v in rng.integers(0, hi + 1, size=2))
        if rng.random() < 0.5:
            expr, steps, answer = f"{a}+{b}", [f"{a}+{b}={a + b}"], a + b
        else:
            a, b = max(a, b), min(a, b)
            expr, steps, answer = f"{a}-{b}", [f"{a}-{b}={a - b}"], a - b
    else:
        a, b, c, d = (int(v) for v in rng.integers(1, hi + 1, size=4))
        a, b = max(a, b), min(a, b)
        x, y = a - b, c + d
        z = x * y
        expr = f"({a}-{b})*({c}+{d})"
        steps = [f"{a}-{b}={x}", f"{c}+{d}={y}", f"{x}*{y}={z}"]
        answer = z
        if difficulty == 3:
            divisors = [e for e in range(1, hi + 1) if z % e == 0]
            e = int(divisors[rng.integers(len(divisors))])
            expr += f"/{e}"
            steps.append(f"{z}/{e}={z // e}")
            answer = z // e
    gold = str(answer)
    result = encode_text(gold, vocab)
    reasoning = "<think>" + ",".join(steps) + "</think>"
    return TaskInstance(
        prompt=format_prompt(f"compute {expr}", ARITH_PROMPT_LEN[difficulty], vocab),
        gold=gold,
        kind=TaskKind.TEXT_REASONING,
        response=_cot_response(reasoning, result, ARITH_RESPONSE_LEN[difficulty], vocab),
        plain_response=pad_to(result, ARITH_RESPONSE_LEN[difficulty], vocab.EOS),
        prompt_text=f"compute {expr}",
    )


def max_operand(difficulty: int) -> int:
    return 9 * difficulty


_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
}


def eval_expression(expr: str):
    """Exact evaluation of + - * / over integer literals (no names, no calls)."""

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -ev(node.operand)
        raise ValueError(f"unsupported expression element {ast.dump(node)}")

    return ev(ast.parse(expr, mode="eval"))


def verify_trace(trace: str, gold: str) -> bool:
    """Every ``lhs=rhs`` step evaluates correctly and the last step yields ``gold``."""
    body = trace.removeprefix("<think>").removesuffix("</think>")
    last = None
    for step in body.split(","):
        lhs, _, rhs = step.partition("=")
        if eval_expression(lhs) != int(rhs):
            return False
        last = rhs
    return last == gold


# -- text to image -------------------------------------------------------------


def gen_t2i_task(rng: np.random.Generator, vocab: Vocabulary) -> TaskInstance:
    """``count=n color=c shape=s`` prompt with a gold 8x8 grid of separated motifs."""
    count = int(rng.integers(1, MAX_COUNT + 1))
    color = COLORS[int(rng.integers(len(COLORS)))]
    shape = list(SHAPES)[int(rng.integers(len(SHAPES)))]
    grid = render_motifs(rng, count, color, shape, vocab.codebook_size)
    text = f"count={count} color={color} shape={shape}"
    reasoning = "<think>" + f"{count} {color} {shape}".ljust(T2I_REASONING_WIDTH) + "</think>"
    image = grid_to_tokens(grid, vocab)
    return TaskInstance(
        prompt=format_prompt(text, T2I_PROMPT_LEN, vocab),
        gold=grid,
        kind=TaskKind.T2I,
        response=_cot_response(reasoning, image, None, vocab),
        plain_response=image,
        prompt_text=text,
    )


def render_motifs(rng, count, color, shape, codebook_size, side=GRID_SIDE) -> np.ndarray:
    """Place ``count`` motifs with a one-cell gap between them (rejection sampling)."""
    fp = SHAPES[shape]
    codes = color_codes(color, codebook_size)
    for _ in range(1000):
        grid = np.full((side, side), BACKGROUND, dtype=np.int64)
        taken = np.zeros((side + 2, side + 2), dtype=bool)  # padded halo
        ok = True
        for _ in range(count):
            h, w = fp.shape
            r = int(rng.integers(0, side - h + 1))
            c = int(rng.integers(0, side - w + 1))
            # reject if the motif or any neighbouring cell touches an earlier one
            if taken[r : r + h + 2, c : c + w + 2].any():
                ok = False
                break
            grid[r : r + h, c : c + w][fp] = int(rng.integers(codes.start, codes.stop))
            taken[r + 1 : r + h + 1, c + 1 : c + w + 1] |= fp
        if ok:
            return grid
    raise RuntimeError("could not place motifs")
