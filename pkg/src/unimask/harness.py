"""Three-stage training pipeline, persistence and the masking-strategy ablation.

Run directory layout::

    <output_dir>/config.lock   frozen copy of the run config
    <output_dir>/vocab.txt
    <output_dir>/ckpt/step_XXXXXX.pt, ckpt/final.pt
    <output_dir>/metrics.csv
    <output_dir>/eval.csv      (RL only)
"""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import RunConfig, Stage, ConfigError, dump_config
from .diffusion import Scope
from .model import MaskPredictor, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import batch_loss
from .rewards import RewardSpec, TaskKind, composite_reward
from .sampling import SamplerConfig
from .tasks import TaskInstance, gen_arithmetic_task, gen_t2i_task
from .token_space import Vocabulary
from .unigrpo import METRIC_FIELDS, UniGRPOConfig, make_rl_rngs, sample_group, unigrpo_train

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "UNIMASK_OUTPUT_ROOT"
SUPERVISED_FIELDS = ("step", "loss", "masked_count", "val_text", "val_t2i")
EVAL_FIELDS = ("step", "eval_reward")
REQUIRED_INIT = {Stage.SFT: ("pretrain", "sft"), Stage.RL: ("sft", "rl")}


# -- builders ---------------------------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def run_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    return p if p.is_absolute() else output_root() / p


def build_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary(codebook_size=cfg.codebook_size)


def build_model_config(cfg: RunConfig, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig(**asdict(cfg.model)).for_vocab(vocab)


def build_model(cfg: RunConfig, vocab: Vocabulary) -> MaskPredictor:
    torch.manual_seed(cfg.seed)
    return MaskPredictor(build_model_config(cfg, vocab))


def build_sampler_config(cfg: RunConfig, **overrides) -> SamplerConfig:
    fields = asdict(cfg.sampler)
    fields.update(overrides)
    return SamplerConfig(**fields)


def build_rl_config(cfg: RunConfig, **overrides) -> UniGRPOConfig:
    r = cfg.rl
    fields = dict(
        G=r.G, mu=r.mu, epsilon=r.epsilon, beta=r.beta, T=r.T, lr=r.lr,
        strategy=r.strategy, llada_samples=r.llada_samples, grad_clip=r.grad_clip,
    )
    fields.update(overrides)
    return UniGRPOConfig(**fields)


def build_reward_spec(cfg: RunConfig) -> RewardSpec:
    kind = TaskKind(cfg.reward.task_kind)
    if not cfg.reward.components.strip():
        return RewardSpec.default(kind)
    comps = []
    for item in cfg.reward.components.split(","):
        name, _, weight = item.partition(":")
        comps.append((name.strip(), float(weight)))
    return RewardSpec(kind, tuple(comps))


# -- data ----------------------------------------------------------------------------


def make_task(kind: TaskKind, rng: np.random.Generator, cfg: RunConfig, vocab: Vocabulary) -> TaskInstance:
    if kind == TaskKind.T2I:
        return gen_t2i_task(rng, vocab)
    return gen_arithmetic_task(rng, cfg.difficulty, vocab)


def batch_composition(batch_size: int, t2i_ratio: float) -> tuple[int, int]:
    """(text items, image items) for one mixed batch."""
    n_img = int(round(t2i_ratio * batch_size))
    return batch_size - n_img, n_img


class TaskSource:
    """Fresh tasks per draw, or a fixed pool when ``cfg.fixed_pool > 0``."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary):
        self.cfg = cfg
        self.vocab = vocab
        self.pool = None
        if cfg.fixed_pool > 0:
            prng = np.random.default_rng([cfg.seed, 7919])
            n_txt, n_img = batch_composition(cfg.fixed_pool, cfg.t2i_ratio)
            self.pool = {
                TaskKind.TEXT_REASONING: [make_task(TaskKind.TEXT_REASONING, prng, cfg, vocab) for _ in range(n_txt)],
                TaskKind.T2I: [make_task(TaskKind.T2I, prng, cfg, vocab) for _ in range(n_img)],
            }

    def draw(self, kind: TaskKind, rng: np.random.Generator) -> TaskInstance:
        if self.pool is None:
            return make_task(kind, rng, self.cfg, self.vocab)
        items = self.pool[kind]
        return items[int(rng.integers(len(items)))]

    def batch(self, rng: np.random.Generator) -> list[TaskInstance]:
        n_txt, n_img = batch_composition(self.cfg.batch_size, self.cfg.t2i_ratio)
        if self.pool is not None:
            n_txt = n_txt if self.pool[TaskKind.TEXT_REASONING] else 0
            n_img = self.cfg.batch_size - n_txt if self.pool[TaskKind.T2I] else 0
        return [self.draw(TaskKind.TEXT_REASONING, rng) for _ in range(n_txt)] + [
            self.draw(TaskKind.T2I, rng) for _ in range(n_img)
        ]


def validation_sets(cfg: RunConfig, vocab: Vocabulary, n: int = 16) -> dict[str, list[TaskInstance]]:
    vrng = np.random.default_rng([cfg.seed, 104729])
    return {
        "text": [make_task(TaskKind.TEXT_REASONING, vrng, cfg, vocab) for _ in range(n)],
        "t2i": [make_task(TaskKind.T2I, vrng, cfg, vocab) for _ in range(n)],
    }


@torch.no_grad()
def validation_loss(model, tasks: Sequence[TaskInstance], stage: Stage, vocab: Vocabulary, seed: int) -> float:
    """Same masks on every call (fixed seed), so values are comparable across steps."""
    rng = np.random.default_rng([seed, 1299709])
    seqs, scope = _sequences(tasks, stage)
    return batch_loss(model, seqs, rng, vocab, scope).item()


def _sequences(tasks, stage: Stage):
    if stage == Stage.PRETRAIN:
        return [t.pretrain_sequence if t.kind == TaskKind.T2I else t.sft_sequence for t in tasks], Scope.ALL
    return [t.sft_sequence for t in tasks], Scope.RESPONSE_ONLY


# -- persistence helpers ------------------------------------------------------------------


def _ckpt_path(rd: Path, step: int) -> Path:
    return rd / "ckpt" / f"step_{step:06d}.pt"


def latest_checkpoint(rd: Path) -> Path | None:
    ckpts = sorted((rd / "ckpt").glob("step_*.pt"))
    return ckpts[-1] if ckpts else None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    def __init__(self, path: Path, fields: Sequence[str], keep_before: int | None):
        self.path = path
        self.fields = list(fields)
        rows = []
        if keep_before is not None and path.exists():
            with open(path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) < keep_before]
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=self.fields, lineterminator="\n")
        self.writer.writeheader()
        self.writer.writerows(rows)

    def write(self, row: dict) -> None:
        self.writer.writerow({k: _fmt(row.get(k)) for k in self.fields})
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _prepare_dir(cfg: RunConfig, resume: bool) -> tuple[Path, Path | None]:
    rd = run_dir(cfg)
    lock = rd / "config.lock"
    ckpt = latest_checkpoint(rd) if resume else None
    if ckpt is not None and lock.exists() and lock.read_text() != dump_config(cfg):
        raise ConfigError(f"{rd}: config differs from the locked config of the run being resumed")
    if not resume and rd.exists():
        for old in (rd / "ckpt").glob("*.pt"):
            old.unlink()
    rd.mkdir(parents=True, exist_ok=True)
    lock.write_text(dump_config(cfg))
    return rd, ckpt


def _load_init(cfg: RunConfig, vocab: Vocabulary, init: str | None):
    path = init or None
    required = REQUIRED_INIT.get(cfg.stage)
    if path is None:
        if required:
            raise ConfigError(f"stage {cfg.stage.value} needs an initial checkpoint from {required[0]}")
        return None, None
    if not Path(path).exists():
        raise ConfigError(f"initial checkpoint {path} not found")
    model, _, payload = load_checkpoint(path, vocab)
    if required and payload.get("stage") not in required:
        raise ConfigError(
            f"stage {cfg.stage.value} needs a {'/'.join(required)} checkpoint, got {payload.get('stage')!r}"
        )
    if asdict(model.cfg) != asdict(build_model_config(cfg, vocab)):
        raise ConfigError("initial checkpoint model config differs from run config")
    return model, payload


# -- stages -------------------------------------------------------------------------------


def run_stage(cfg: RunConfig, init: str | None = None, resume: bool = False) -> Path:
    """Run one training stage; returns the run directory."""
    if cfg.stage in (Stage.PRETRAIN, Stage.SFT):
        return _run_supervised(cfg, init, resume)
    if cfg.stage == Stage.RL:
        return _run_rl(cfg, init, resume)
    raise ConfigError(f"run_stage does not handle stage {cfg.stage.value}; use the CLI")


def _run_supervised(cfg: RunConfig, init: str | None, resume: bool) -> Path:
    vocab = build_vocab(cfg)
    init_model, _ = _load_init(cfg, vocab, init)
    rd, ckpt = _prepare_dir(cfg, resume)
    vocab.save(rd / "vocab.txt")
    model = init_model if init_model is not None else build_model(cfg, vocab)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if ckpt is not None:
        model, _, payload = load_checkpoint(ckpt, vocab)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        opt.load_state_dict(payload["optimizer"])
        rng.bit_generator.state = payload["rng"]
        start = payload["step"]
    source = TaskSource(cfg, vocab)
    val = validation_sets(cfg, vocab)
    scope = Scope.ALL if cfg.stage == Stage.PRETRAIN else Scope.RESPONSE_ONLY
    writer = MetricsWriter(rd / "metrics.csv", SUPERVISED_FIELDS, start if ckpt else None)
    model.train()
    try:
        for step in range(start, cfg.steps):
            row = {"step": step}
            if cfg.eval_every and step % cfg.eval_every == 0:
                row.update(_val_row(model, val, cfg, vocab))
            tasks = source.batch(rng)
            seqs, _ = _sequences(tasks, cfg.stage)
            rep = batch_loss(model, seqs, rng, vocab, scope, cfg.model.prompt_dropout)
            opt.zero_grad(set_to_none=True)
            rep.value.backward()
            opt.step()
            row.update(loss=rep.item(), masked_count=rep.masked_count)
            writer.write(row)
            if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0 and step + 1 < cfg.steps:
                _save(rd, step + 1, model, vocab, cfg, optimizer=opt.state_dict(), rng=rng.bit_generator.state)
        if cfg.eval_every:
            writer.write({"step": cfg.steps, **_val_row(model, val, cfg, vocab)})
    finally:
        writer.close()
    _save(rd, cfg.steps, model, vocab, cfg, final=True)
    return rd


def _val_row(model, val, cfg, vocab) -> dict:
    model.eval()
    out = {f"val_{k}": validation_loss(model, tasks, cfg.stage, vocab, cfg.seed) for k, tasks in val.items()}
    model.train()
    return out


def _save(rd, step, model, vocab, cfg, final=False, **extra) -> Path:
    path = rd / "ckpt" / "final.pt" if final else _ckpt_path(rd, step)
    save_checkpoint(path, model, vocab, stage=cfg.stage.value, step=step, **extra)
    return path


def rl_task_kind(cfg: RunConfig) -> TaskKind:
    kind = TaskKind(cfg.reward.task_kind)
    return TaskKind.T2I if kind == TaskKind.T2I else TaskKind.TEXT_REASONING


def rl_sampler(cfg: RunConfig) -> tuple[SamplerConfig, str]:
    if rl_task_kind(cfg) == TaskKind.T2I:
        return build_sampler_config(cfg, temperature=cfg.rl.temperature), "parallel"
    return build_sampler_config(cfg, temperature=cfg.rl.temperature), "semi_ar"


def eval_tasks(cfg: RunConfig, vocab: Vocabulary) -> list[TaskInstance]:
    """Held-out prompts, or the training pool itself when RL runs on a fixed pool."""
    if cfg.fixed_pool > 0:
        return TaskSource(cfg, vocab).pool[rl_task_kind(cfg)][: cfg.rl.eval_prompts]
    erng = np.random.default_rng([cfg.seed, 15485863])
    return [make_task(rl_task_kind(cfg), erng, cfg, vocab) for _ in range(cfg.rl.eval_prompts)]


def evaluate_policy(model, tasks, cfg: RunConfig, vocab: Vocabulary, seed: int = 0) -> float:
    """Mean reward over G sampled completions for each evaluation prompt (fixed sampling seed)."""
    spec = build_reward_spec(cfg)
    scfg, sampler = rl_sampler(cfg)
    rng = np.random.default_rng([seed, 32452843])
    total = []
    for task in tasks:
        group = sample_group(model, task.prompt, cfg.rl.G, scfg, vocab, rng, sampler)
        ctx = {"gold": task.gold, "vocab": vocab, "prompt_text": task.prompt_text}
        total.extend(composite_reward(spec, c, ctx) for c in group.completions)
    return float(np.mean(total))


def _run_rl(cfg: RunConfig, init: str | None, resume: bool) -> Path:
    vocab = build_vocab(cfg)
    policy, _ = _load_init(cfg, vocab, init)
    rd, ckpt = _prepare_dir(cfg, resume)
    vocab.save(rd / "vocab.txt")
    ref = copy.deepcopy(policy)
    rl_cfg = build_rl_config(cfg)
    opt = torch.optim.Adam(policy.parameters(), lr=rl_cfg.lr)
    rngs = make_rl_rngs(cfg.seed)
    start = 0
    if ckpt is not None:
        policy, _, payload = load_checkpoint(ckpt, vocab)
        ref.load_state_dict(payload["ref_state"])
        opt = torch.optim.Adam(policy.parameters(), lr=rl_cfg.lr)
        opt.load_state_dict(payload["optimizer"])
        for name, state in payload["rngs"].items():
            rngs[name].bit_generator.state = state
        start = payload["step"]
    scfg, sampler = rl_sampler(cfg)
    spec = build_reward_spec(cfg)
    source = TaskSource(cfg, vocab)
    kind = rl_task_kind(cfg)
    etasks = eval_tasks(cfg, vocab) if cfg.rl.eval_every else []
    writer = MetricsWriter(rd / "metrics.csv", METRIC_FIELDS, start if ckpt else None)
    # an eval row at step s describes the checkpointed state after s steps, so it survives a resume from s
    ewriter = MetricsWriter(rd / "eval.csv", EVAL_FIELDS, start + 1 if ckpt else None) if etasks else None
    stream = unigrpo_train(
        policy, ref, lambda r: source.draw(kind, r), rl_cfg, scfg, spec, vocab,
        steps=cfg.steps - start, rngs=rngs, optimizer=opt, start_step=start, sampler=sampler,
    )
    try:
        if ewriter and start == 0:
            ewriter.write({"step": 0, "eval_reward": evaluate_policy(policy, etasks, cfg, vocab, cfg.seed)})
        for row in stream:
            writer.write(row)
            done = row["step"] + 1
            if ewriter and done % cfg.rl.eval_every == 0:
                ewriter.write({"step": done, "eval_reward": evaluate_policy(policy, etasks, cfg, vocab, cfg.seed)})
            if cfg.ckpt_every and done % cfg.ckpt_every == 0 and done < cfg.steps:
                _save(
                    rd, done, policy, vocab, cfg, optimizer=opt.state_dict(),
                    rngs={k: g.bit_generator.state for k, g in rngs.items()},
                    ref_state=ref.state_dict(),
                )
    finally:
        writer.close()
        if ewriter:
            ewriter.close()
    _save(rd, cfg.steps, policy, vocab, cfg, final=True)
    return rd


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

