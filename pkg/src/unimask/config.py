"""Flat ``key = value`` run configuration with typed parsing.

Nested sections use dotted keys (``model.layers = 2``). Unknown keys are
rejected so that a config file can't silently drift from the code.
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field


class Stage(enum.Enum):
    PRETRAIN = "pretrain"
    SFT = "sft"
    RL = "rl"
    SAMPLE = "sample"
    ABLATE = "ablate"


@dataclass
class ModelSection:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 256
    prompt_dropout: float = 0.1


@dataclass
class SamplerSection:
    length: int = 16
    steps: int = 8
    block_size: int | None = 8
    schedule: str = "linear"
    unmask_k: int | None = 2
    guidance_scale: float = 0.0
    temperature: float = 0.0


@dataclass
class RLSection:
    G: int = 8
    mu: int = 4
    epsilon: float = 0.2
    beta: float = 0.02
    T: int = 1000
    lr: float = 1e-4
    strategy: str = "unigrpo"
    llada_samples: int = 4
    grad_clip: float = 1.0
    temperature: float = 1.0
    eval_prompts: int = 32
    eval_every: int = 0


@dataclass
class RewardSection:
    task_kind: str = "text_reasoning"
    components: str = ""  # "name:weight,..."; empty selects the defaults for task_kind


@dataclass
class AblateSection:
    strategies: str = "unigrpo,d1,random"
    seeds: int = 5
    threshold: float = 1.0  # reward level for steps-to-threshold
    window: int = 25  # trailing window for smoothing and variance


@dataclass
class RunConfig:
    stage: Stage = Stage.PRETRAIN
    seed: int = 0
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    output_dir: str = "runs/default"
    ckpt_every: int = 500
    eval_every: int = 100
    difficulty: int = 1
    t2i_ratio: float = 0.5
    fixed_pool: int = 0
    codebook_size: int = 64
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    rl: RLSection = field(default_factory=RLSection)
    reward: RewardSection = field(default_factory=RewardSection)
    ablate: AblateSection = field(default_factory=AblateSection)


class ConfigError(ValueError):
    pass


def _hints(cls):
    return typing.get_type_hints(cls)


def _is_section(tp) -> bool:
    return dataclasses.is_dataclass(tp)


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _parse_value(raw, args[0], key)
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(raw.lower())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    # deep-copy sections so the base object stays untouched
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            setattr(cfg, f.name, dataclasses.replace(v))
    top = _hints(RunConfig)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        section, _, name = key.partition(".")
        if name:
            if section not in top or not _is_section(top[section]):
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            hints = _hints(top[section])
            if name not in hints:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(getattr(cfg, section), name, _parse_value(raw, hints[name], key))
        else:
            if key not in top or _is_section(top[key]):
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _parse_value(raw, top[key], key))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {_format_value(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
