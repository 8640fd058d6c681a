"""Command-line entry point: training stages, sampling, inpainting, ablation and reports."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, Stage, load_config, parse_config
from .rewards import parse_t2i_prompt
from .sampling import SamplerConfig, SamplerConfigError, inpaint, parallel_generate, semi_ar_generate
from .tasks import ARITH_PROMPT_LEN, T2I_PROMPT_LEN, format_prompt
from .token_space import GridShape, LayoutSequence, Modality, Segment, TokenizeError, Vocabulary, encode_text, tokens_to_grid

log = logging.getLogger("unimask")

MASK_CHAR = "#"


def _load(args):
    cfg = load_config(args.config)
    if args.set:
        cfg = parse_config("\n".join(args.set), base=cfg)
    return cfg


def render(seq: LayoutSequence, vocab: Vocabulary) -> str:
    """Human-readable tokens; specials in angle-bar brackets, image codes as [n]."""
    names = {i: n for n, i in vocab.special_ids.items()}
    out = []
    for t in seq.tokens:
        if vocab.is_text(t):
            out.append(vocab.charset[t])
        elif vocab.is_image(t):
            out.append(f"[{t - vocab.image_ids.start}]")
        elif t == vocab.THINK_OPEN:
            out.append("<think>")
        elif t == vocab.THINK_CLOSE:
            out.append("</think>")
        else:
            out.append(f"<|{names[t]}|>")
    return "".join(out)


def _sampler_from_args(args, length: int) -> SamplerConfig:
    return SamplerConfig(
        length=length,
        steps=args.steps,
        block_size=args.block_size,
        schedule=args.schedule,
        unmask_k=args.unmask_k,
        guidance_scale=args.guidance,
        temperature=args.temperature,
    )


def _write_grid(grid: np.ndarray, out: Path) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out.with_suffix(".csv"), grid, fmt="%d", delimiter=",")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(grid, cmap="tab20", interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.savefig(out.with_suffix(".png"), dpi=100, bbox_inches="tight")
    plt.close(fig)


# -- commands -----------------------------------------------------------------------


def cmd_stage(args, stage: Stage) -> int:
    from .harness import run_stage

    cfg = dataclasses.replace(_load(args), stage=stage)
    rd = run_stage(cfg, init=getattr(args, "init", None), resume=args.resume)
    print(rd)
    return 0


def cmd_sample(args) -> int:
    from .model import load_checkpoint

    model, vocab, _ = load_checkpoint(args.ckpt)
    image = args.mode == "image"
    if image:
        parse_t2i_prompt(args.prompt)  # reject prompts outside the grammar early
    plen = args.prompt_len or (T2I_PROMPT_LEN if image else _arith_slot(args.prompt))
    prompt = format_prompt(args.prompt, plen, vocab)
    rng = np.random.default_rng(args.seed)
    if image:
        shape = GridShape(args.grid_side, args.grid_side)
        cfg = _sampler_from_args(args, shape.num_tokens)
        out = parallel_generate(model, prompt, cfg, vocab, rng, Modality.IMAGE)
        grid = tokens_to_grid(out.response, shape, vocab)
        if args.out:
            _write_grid(grid, Path(args.out))
        csv.writer(sys.stdout).writerows(grid.tolist())
    else:
        cfg = _sampler_from_args(args, args.length)
        out = semi_ar_generate(model, prompt, cfg, vocab, rng)
        print(render(out.response, vocab))
    return 0


def _arith_slot(text: str) -> int:
    for n in sorted(ARITH_PROMPT_LEN.values()):
        if len(text) <= n:
            return n
    return len(text)


def cmd_inpaint(args) -> int:
    from .model import load_checkpoint

    model, vocab, _ = load_checkpoint(args.ckpt)
    rng = np.random.default_rng(args.seed)
    if args.grid:
        grid = np.loadtxt(args.grid, delimiter=",", dtype=np.int64, ndmin=2)
        shape = GridShape(*grid.shape)
        toks = [vocab.MASK if c < 0 else vocab.image_ids.start + int(c) for c in grid.flatten()]
        partial = LayoutSequence.build(toks, Segment.RESPONSE, Modality.IMAGE)
    else:
        pieces = args.text.split(MASK_CHAR)
        toks = []
        for k, piece in enumerate(pieces):
            toks.extend(encode_text(piece, vocab).tokens)
            if k < len(pieces) - 1:
                toks.append(vocab.MASK)
        partial = LayoutSequence.build(toks, Segment.RESPONSE, Modality.TEXT)
    n_masked = partial.tokens.count(vocab.MASK)
    steps = args.steps or (n_masked if args.unmask_k is None else -(-n_masked // args.unmask_k))
    cfg = SamplerConfig(max(n_masked, 1), max(steps, 1), None, args.schedule, args.unmask_k,
                        args.guidance, args.temperature)
    out = inpaint(model, partial, cfg, vocab, rng)
    if args.grid:
        filled = tokens_to_grid(out, shape, vocab)
        if args.out:
            _write_grid(filled, Path(args.out))
        csv.writer(sys.stdout).writerows(filled.tolist())
    else:
        print(render(out, vocab))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    cfg = dataclasses.replace(_load(args), stage=Stage.ABLATE)
    strategies = [s.strip() for s in args.strategies.split(",")] if args.strategies else None
    seeds = list(range(args.seeds)) if args.seeds is not None else None
    root = run_ablation(cfg, args.init, strategies, seeds)
    with open(root / "summary.csv") as fh:
        sys.stdout.write(fh.read())
    return 0


def cmd_report(args) -> int:
    from .harness import read_metrics
    from .plotting import plot_loss_curves, plot_reward_curves

    rd = Path(args.run)
    rows = read_metrics(rd / "metrics.csv")
    if rows and "mean_reward" in rows[0]:
        curve = [float(r["mean_reward"]) for r in rows]
        path = plot_reward_curves({(rows[0]["strategy"], 0): curve}, rd / "reward_curve.png", window=args.window)
    else:
        path = plot_loss_curves(rows, rd / "loss_curve.png")
    print(path)
    return 0


# -- parser -----------------------------------------------------------------------


def _sampler_args(p, steps_default=None):
    p.add_argument("--steps", type=int, default=steps_default)
    p.add_argument("--block-size", type=int, default=None)
    p.add_argument("--schedule", choices=["linear", "cosine"], default="linear")
    p.add_argument("--unmask-k", type=int, default=None)
    p.add_argument("--guidance", type=float, default=0.0)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unimask", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, needs_init in (("train", False), ("sft", True), ("rl", True)):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True)
        p.add_argument("--init", required=needs_init, help="checkpoint from the previous stage")
        p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("sample", help="generate from a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--mode", choices=["text", "image"], default="text")
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--prompt-len", type=int, default=None)
    p.add_argument("--grid-side", type=int, default=8)
    p.add_argument("--out", default=None, help="image mode: write <out>.csv and <out>.png")
    _sampler_args(p, steps_default=8)

    p = sub.add_parser("inpaint", help=f"fill masked positions ('{MASK_CHAR}' in text, -1 in a grid CSV)")
    p.add_argument("--ckpt", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text")
    src.add_argument("--grid")
    p.add_argument("--out", default=None)
    _sampler_args(p)

    p = sub.add_parser("ablate", help="compare likelihood strategies from one checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--strategies", default=None, help="comma list, e.g. unigrpo,d1,random")
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("report", help="render a run's metrics.csv to a figure")
    p.add_argument("--run", required=True)
    p.add_argument("--window", type=int, default=25)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            return cmd_stage(args, Stage.PRETRAIN)
        if args.command == "sft":
            return cmd_stage(args, Stage.SFT)
        if args.command == "rl":
            return cmd_stage(args, Stage.RL)
        return {"sample": cmd_sample, "inpaint": cmd_inpaint, "ablate": cmd_ablate, "report": cmd_report}[
            args.command
        ](args)
    except (ConfigError, SamplerConfigError, TokenizeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
