"""Joint text/image token space, toy tokenizers and the CoT sequence format."""

from __future__ import annotations

import enum
import json
import string
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

VOCAB_FORMAT = "unimask-vocab/1"

SPECIAL_NAMES = (
    "MASK",
    "EOS",
    "PAD",
    "BOS",
    "THINK_OPEN",
    "THINK_CLOSE",
    "DELIM",
    "NULL_PROMPT",
)

# surface forms rendered by decode_text; DELIM has none on purpose
THINK_OPEN_TEXT = "<think>"
THINK_CLOSE_TEXT = "</think>"

DEFAULT_CHARSET = (
    string.ascii_letters + string.digits + " +-*/()=<>.,:;?!_'"
)


class Segment(enum.IntEnum):
    PROMPT = 0
    RESPONSE = 1


class Modality(enum.IntEnum):
    TEXT = 0
    IMAGE = 1


class TokenizeError(ValueError):
    """Raised for characters or codes outside the vocabulary."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class Vocabulary:
    """Layout of the joint id space: text chars, then image codes, then specials."""

    charset: str = DEFAULT_CHARSET
    codebook_size: int = 64

    def __post_init__(self):
        if len(set(self.charset)) != len(self.charset):
            raise ValueError("charset contains duplicate characters")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be positive")

    @property
    def text_ids(self) -> range:
        return range(0, len(self.charset))

    @property
    def image_ids(self) -> range:
        start = len(self.charset)
        return range(start, start + self.codebook_size)

    @cached_property
    def special_ids(self) -> dict[str, int]:
        start = len(self.charset) + self.codebook_size
        return {name: start + i for i, name in enumerate(SPECIAL_NAMES)}

    @property
    def total_size(self) -> int:
        return len(self.charset) + self.codebook_size + len(SPECIAL_NAMES)

    def __getattr__(self, name):
        # MASK, EOS, ... as attributes
        if name in SPECIAL_NAMES:
            return self.special_ids[name]
        raise AttributeError(name)

    def is_image(self, tok: int) -> bool:
        return tok in self.image_ids

    def is_text(self, tok: int) -> bool:
        return tok in self.text_ids

    def is_special(self, tok: int) -> bool:
        return self.total_size - len(SPECIAL_NAMES) <= tok < self.total_size

    # -- serialization -------------------------------------------------

    def dumps(self) -> str:
        lines = [
            f"format = {VOCAB_FORMAT}",
            f"charset = {json.dumps(self.charset)}",
            f"text = {self.text_ids.start} {self.text_ids.stop}",
            f"image = {self.image_ids.start} {self.image_ids.stop}",
        ]
        lines += [f"{name} = {i}" for name, i in self.special_ids.items()]
        lines.append(f"total_size = {self.total_size}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        fields = {}
        for raw in text.splitlines():
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            key, _, value = raw.partition("=")
            fields[key.strip()] = value.strip()
        if fields.get("format") != VOCAB_FORMAT:
            raise ValueError(f"unsupported vocabulary format {fields.get('format')!r}")
        charset = json.loads(fields["charset"])
        start, stop = (int(x) for x in fields["image"].split())
        vocab = cls(charset=charset, codebook_size=stop - start)
        # the stored ranges must agree with the layout we rebuild
        if vocab.dumps() != cls._canonical(fields):
            raise ValueError("vocabulary file is inconsistent with its charset/codebook")
        return vocab

    @staticmethod
    def _canonical(fields: dict[str, str]) -> str:
        order = ["format", "charset", "text", "image", *SPECIAL_NAMES, "total_size"]
        return "\n".join(f"{k} = {fields.get(k)}" for k in order) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


@dataclass(frozen=True)
class LayoutSequence:
    """Token ids with per-position segment and modality tags."""

    tokens: tuple[int, ...]
    segment: tuple[Segment, ...]
    modality: tuple[Modality, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "segment", tuple(Segment(s) for s in self.segment))
        object.__setattr__(self, "modality", tuple(Modality(m) for m in self.modality))
        n = len(self.tokens)
        if len(self.segment) != n or len(self.modality) != n:
            raise ValueError("tag lengths must match token length")
        seen_response = False
        for s in self.segment:
            if s == Segment.RESPONSE:
                seen_response = True
            elif seen_response:
                raise ValueError("PROMPT tag after RESPONSE tag")

    @classmethod
    def build(cls, tokens: Sequence[int], segment: Segment, modality: Modality):
        n = len(tokens)
        return cls(tuple(tokens), (segment,) * n, (modality,) * n)

    @classmethod
    def empty(cls) -> "LayoutSequence":
        return cls((), (), ())

    def __len__(self) -> int:
        return len(self.tokens)

    def __add__(self, other: "LayoutSequence") -> "LayoutSequence":
        return LayoutSequence(
            self.tokens + other.tokens,
            self.segment + other.segment,
            self.modality + other.modality,
        )

    @property
    def prompt_len(self) -> int:
        return sum(1 for s in self.segment if s == Segment.PROMPT)

    @property
    def prompt(self) -> "LayoutSequence":
        p = self.prompt_len
        return LayoutSequence(self.tokens[:p], self.segment[:p], self.modality[:p])

    @property
    def response(self) -> "LayoutSequence":
        p = self.prompt_len
        return LayoutSequence(self.tokens[p:], self.segment[p:], self.modality[p:])

    def with_segment(self, segment: Segment) -> "LayoutSequence":
        return LayoutSequence(self.tokens, (segment,) * len(self), self.modality)

    def as_prompt(self) -> "LayoutSequence":
        return self.with_segment(Segment.PROMPT)

    def as_response(self) -> "LayoutSequence":
        return self.with_segment(Segment.RESPONSE)

    def replace_tokens(self, tokens: Iterable[int]) -> "LayoutSequence":
        return LayoutSequence(tuple(tokens), self.segment, self.modality)

    def array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64)

    def validate(self, vocab: Vocabulary) -> None:
        """Check every id against the modality its tag claims."""
        for i, (tok, mod) in enumerate(zip(self.tokens, self.modality)):
            if not 0 <= tok < vocab.total_size:
                raise TokenizeError(f"id {tok} out of range at {i}", i)
            if tok == vocab.MASK:
                continue
            if mod == Modality.IMAGE and not vocab.is_image(tok):
                raise TokenizeError(f"IMAGE-tagged id {tok} is not an image code at {i}", i)
            if mod == Modality.TEXT and vocab.is_image(tok):
                raise TokenizeError(f"TEXT-tagged id {tok} is an image code at {i}", i)


@dataclass(frozen=True)
class GridShape:
    height_tokens: int
    width_tokens: int
    source_pixels: tuple[int, int] | None = None
    downsample: int | None = None

    @classmethod
    def from_pixels(cls, height: int, width: int, downsample: int) -> "GridShape":
        if height % downsample or width % downsample:
            raise ValueError(
                f"{height}x{width} pixels not divisible by downsample factor {downsample}"
            )
        return cls(height // downsample, width // downsample, (height, width), downsample)

    @property
    def num_tokens(self) -> int:
        return self.height_tokens * self.width_tokens


# -- text ---------------------------------------------------------------


def encode_text(
    s: str, vocab: Vocabulary, segment: Segment = Segment.RESPONSE
) -> LayoutSequence:
    """Char-level encoding; ``<think>``/``</think>`` map to their special ids."""
    lookup = {c: i for i, c in enumerate(vocab.charset)}
    tokens = []
    i = 0
    while i < len(s):
        if s.startswith(THINK_OPEN_TEXT, i):
            tokens.append(vocab.THINK_OPEN)
            i += len(THINK_OPEN_TEXT)
            continue
        if s.startswith(THINK_CLOSE_TEXT, i):
            tokens.append(vocab.THINK_CLOSE)
            i += len(THINK_CLOSE_TEXT)
            continue
        try:
            tokens.append(lookup[s[i]])
        except KeyError:
            raise TokenizeError(f"unsupported character {s[i]!r} at position {i}", i) from None
        i += 1
    return LayoutSequence.build(tokens, segment, Modality.TEXT)


def decode_text(seq: LayoutSequence | Sequence[int], vocab: Vocabulary) -> str:
    tokens = seq.tokens if isinstance(seq, LayoutSequence) else seq
    out = []
    for tok in tokens:
        if vocab.is_text(tok):
            out.append(vocab.charset[tok])
        elif tok == vocab.THINK_OPEN:
            out.append(THINK_OPEN_TEXT)
        elif tok == vocab.THINK_CLOSE:
            out.append(THINK_CLOSE_TEXT)
        else:
            raise TokenizeError(f"id {tok} has no text rendering")
    return "".join(out)


# -- image --------------------------------------------------------------


def grid_to_tokens(
    grid, vocab: Vocabulary, segment: Segment = Segment.RESPONSE
) -> LayoutSequence:
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {arr.shape}")
    flat = arr.reshape(-1)
    bad = np.flatnonzero((flat < 0) | (flat >= vocab.codebook_size))
    if bad.size:
        raise TokenizeError(
            f"code {int(flat[bad[0]])} outside codebook of size {vocab.codebook_size}",
            int(bad[0]),
        )
    tokens = (flat + vocab.image_ids.start).tolist()
    return LayoutSequence.build(tokens, segment, Modality.IMAGE)


def tokens_to_grid(seq: LayoutSequence | Sequence[int], shape: GridShape, vocab: Vocabulary):
    tokens = np.asarray(seq.tokens if isinstance(seq, LayoutSequence) else seq, dtype=np.int64)
    if tokens.size != shape.num_tokens:
        raise ValueError(f"expected {shape.num_tokens} tokens, got {tokens.size}")
    codes = tokens - vocab.image_ids.start
    if np.any((codes < 0) | (codes >= vocab.codebook_size)):
        raise TokenizeError("sequence contains non-image ids")
    return codes.reshape(shape.height_tokens, shape.width_tokens)


# -- CoT format -----------------------------------------------------------


def wrap_cot(
    reasoning: LayoutSequence, result: LayoutSequence, vocab: Vocabulary
) -> LayoutSequence:
    """DELIM reasoning DELIM result, all tagged RESPONSE."""
    for part in (reasoning, result):
        if any(s != Segment.RESPONSE for s in part.segment):
            raise ValueError("wrap_cot expects pure-RESPONSE inputs")
    if vocab.DELIM in reasoning.tokens:
        raise ValueError("reasoning contains DELIM; the CoT split would be ambiguous")
    delim = LayoutSequence.build([vocab.DELIM], Segment.RESPONSE, Modality.TEXT)
    return delim + reasoning + delim + result


def parse_cot(
    seq: LayoutSequence, vocab: Vocabulary
) -> tuple[LayoutSequence, LayoutSequence] | None:
    """Split a CoT response into (reasoning, result), or None if malformed.

    Trailing EOS/PAD after the result is dropped; the result stops at the
    first EOS.
    """
    toks = seq.tokens
    if not toks or toks[0] != vocab.DELIM:
        return None
    try:
        second = toks.index(vocab.DELIM, 1)
    except ValueError:
        return None
    end = len(toks)
    for j in range(second + 1, len(toks)):
        if toks[j] in (vocab.EOS, vocab.PAD):
            end = j
            break

    def part(a, b):
        return LayoutSequence(toks[a:b], seq.segment[a:b], seq.modality[a:b])

    return part(1, second), part(second + 1, end)


def pad_to(seq: LayoutSequence, length: int, token: int, left: bool = False) -> LayoutSequence:
    """Pad with ``token`` (tagged like the sequence's own segment) up to ``length``."""
    extra = length - len(seq)
    if extra < 0:
        raise ValueError(f"sequence of length {len(seq)} exceeds {length}")
    if extra == 0:
        return seq
    seg = seq.segment[0] if len(seq) else Segment.RESPONSE
    filler = LayoutSequence.build([token] * extra, seg, Modality.TEXT)
    return filler + seq if left else seq + filler
