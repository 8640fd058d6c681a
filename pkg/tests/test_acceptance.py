"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 7, 8 and 10 share one pretrain -> SFT pipeline built from the shipped
configs (about ten minutes on one CPU core).
"""

import dataclasses
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import torch

from helpers import (
    TINY_VOCAB,
    UniformModel,
    brute_force_posterior,
    gradient_rel_error,
    random_seq,
    report_criterion,
    sampler_sweep,
    simulate_chain,
    tiny_model,
)
from unimask.ablation import median_by_strategy, run_ablation
from unimask.config import dump_config, load_config, parse_config
from unimask.diffusion import Scope, TransitionSpec, UnreachableStateError, marginal_transition, posterior
from unimask.harness import TaskSource, latest_checkpoint, read_metrics, run_stage
from unimask.model import MaskPredictor, ModelConfig, load_checkpoint
from unimask.objectives import corrupt_batch, mixed_sft_loss, unified_loss
from unimask.sampling import (
    PAPER_IMAGE_SAMPLER,
    PAPER_TEXT_SAMPLER,
    SamplerConfig,
    commit_counts,
    inpaint,
    semi_ar_generate_batch,
)
from unimask.rewards import REWARD_WEIGHTS, TaskKind
from unimask.tasks import gen_arithmetic_task
from unimask.token_space import LayoutSequence, Modality, Segment, Vocabulary
from unimask.unigrpo import (
    RolloutGroup,
    UniGRPOConfig,
    baseline_llada_loglik,
    compute_advantages,
    make_noise_plan,
    unigrpo_objective,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
V = TINY_VOCAB


def shipped(name, out, **extra):
    """A shipped config with its output directory (and any extra keys) overridden."""
    lines = [f"output_dir = {out}"] + [f"{k} = {v}" for k, v in extra.items()]
    return parse_config("\n".join(lines), base=load_config(CONFIGS / f"{name}.cfg"))


@pytest.fixture(scope="module")
def sft_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    pt = run_stage(shipped("pretrain", root / "pretrain"))
    sft = run_stage(shipped("sft", root / "sft"), init=str(pt / "ckpt" / "final.pt"))
    return root, str(sft / "ckpt" / "final.pt")


# -- 1 -----------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"unified": 0.0, "sft": 0.0}
    n_params = tiny_model().num_parameters()
    for objective in worst:
        for draw in range(100):
            model = tiny_model(seed=draw)
            n_prompt = int(rng.integers(1, 5))
            seq = random_seq(rng, n_prompt, int(rng.integers(2, 16 - n_prompt)))
            seed = int(rng.integers(1 << 31))
            if objective == "unified":
                rep = unified_loss(model, seq, np.random.default_rng(seed), V)
                cb = corrupt_batch([seq], np.random.default_rng(seed), V, Scope.ALL)
            else:
                rep = mixed_sft_loss(model, seq.prompt, seq.response, np.random.default_rng(seed), V)
                cb = corrupt_batch([seq], np.random.default_rng(seed), V, Scope.RESPONSE_ONLY)
            worst[objective] = max(worst[objective], gradient_rel_error(model, rep, cb))
    elapsed = time.perf_counter() - start
    ok = n_params <= 1000 and max(worst.values()) < 1e-4 and elapsed < 60
    detail = (f"{n_params} params, worst rel err unified {worst['unified']:.2e} sft {worst['sft']:.2e} "
              f"over 100 draws each (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert report_criterion(1, "gradient fidelity", ok, detail)


# -- 2 -----------------------------------------------------------------------------


def test_criterion_02_diffusion_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    worst_analytic, mc_violations, mc_cells, unreachable_ok = 0.0, 0, 0, True
    n = 400_000
    for K, T in ((2, 5), (3, 4), (4, 5)):
        spec = TransitionSpec.random(K, T, rng)
        for step in range(1, T + 1):
            Qbar = marginal_transition(spec, step)
            for x0 in range(K + 1):
                # brute-force posterior over every trajectory x_1..x_step
                for xt in range(K + 1):
                    oracle = brute_force_posterior(spec, xt, x0, step)
                    if oracle is None:
                        try:
                            posterior(xt, x0, spec, step)
                            unreachable_ok = False
                        except UnreachableStateError:
                            pass
                        continue
                    worst_analytic = max(worst_analytic, float(np.abs(posterior(xt, x0, spec, step) - oracle).max()))
                if step in (1, T):
                    x = simulate_chain(spec, x0, step, n, rng)
                    freq = np.bincount(x, minlength=K + 1) / n
                    sigma = np.sqrt(Qbar[:, x0] * (1 - Qbar[:, x0]) / n)
                    mc_violations += int(np.sum(np.abs(freq - Qbar[:, x0]) > 3 * sigma + 1e-12))
                    mc_cells += K + 1
    elapsed = time.perf_counter() - start
    ok = worst_analytic < 1e-10 and mc_violations == 0 and unreachable_ok and elapsed < 120
    detail = (f"posterior max |err| {worst_analytic:.1e} (< 1e-10), marginal MC {mc_violations}/{mc_cells} "
              f"cells outside 3 sigma, {elapsed:.1f}s (< 120s)")
    assert report_criterion(2, "diffusion oracle equivalence", ok, detail)


# -- 3 -----------------------------------------------------------------------------


def test_criterion_03_closed_form_loss():
    model = UniformModel(V.total_size)
    rng = np.random.default_rng(3)
    lnV = math.log(V.total_size)
    worst = 0.0
    for _ in range(50):
        seq = random_seq(rng, int(rng.integers(1, 5)), int(rng.integers(1, 12)))
        t = float(rng.uniform(1e-3, 1.0))
        for rep in (
            unified_loss(model, seq, rng, V, t=t),
            mixed_sft_loss(model, seq.prompt, seq.response, rng, V, t=t),
        ):
            worst = max(worst, abs(rep.item() - rep.masked_count * lnV / t))
    ok = worst < 1e-9
    assert report_criterion(3, "closed-form loss", ok, f"max |loss - m ln V / t| = {worst:.1e} over 50 draws x 2 objectives (< 1e-9)")


# -- 4 -----------------------------------------------------------------------------


def test_criterion_04_overfit_reconstruction(tmp_path):
    start = time.perf_counter()
    cfg = shipped(
        "pretrain", tmp_path / "overfit", steps=2000, batch_size=8, fixed_pool=8, t2i_ratio=0.0,
        ckpt_every=0, eval_every=0, **{"model.max_len": 32},
    )
    rd = run_stage(cfg)
    model, vocab, _ = load_checkpoint(rd / "ckpt" / "final.pt")
    tasks = TaskSource(cfg, vocab).pool[TaskKind.TEXT_REASONING]
    assert len(tasks) == 8
    scfg = SamplerConfig(length=16, steps=8, block_size=8, unmask_k=2, temperature=0.0)
    outs = semi_ar_generate_batch(model, [t.prompt for t in tasks], scfg, vocab)
    exact = np.mean([o.response.tokens == t.response.tokens for o, t in zip(outs, tasks)])
    hits = []
    for task in tasks:
        seq = task.sft_sequence
        for i, tok in enumerate(seq.tokens):
            if tok == vocab.PAD:
                continue
            toks = list(seq.tokens)
            toks[i] = vocab.MASK
            hits.append(inpaint(model, seq.replace_tokens(toks), SamplerConfig(1, 1), vocab).tokens[i] == tok)
    elapsed = time.perf_counter() - start
    ok = exact >= 0.9 and np.mean(hits) >= 0.95 and elapsed < 600
    detail = (f"exact responses {exact:.0%} (>= 90%), single-token inpaint {np.mean(hits):.1%} of {len(hits)} "
              f"(>= 95%), {elapsed:.0f}s (< 600s)")
    assert report_criterion(4, "overfit reconstruction", ok, detail)


# -- 5 -----------------------------------------------------------------------------


def test_criterion_05_sampler_contracts():
    violations = sampler_sweep(1000, seed=5)
    text = SamplerConfig(**PAPER_TEXT_SAMPLER)
    text.check_semi_ar()
    image = SamplerConfig(**PAPER_IMAGE_SAMPLER)
    fixtures = (
        text.block == 64 and text.unmask_k == 2 and text.steps == text.length // 2
        and image.schedule.value == "cosine" and image.steps == 50 and image.guidance_scale == 3.5
        and sum(commit_counts(image.length, image.steps, None, image.schedule)) == image.length
    )
    ok = sum(violations.values()) == 0 and fixtures
    assert report_criterion(5, "sampler contracts", ok, f"1000 cases, violations {violations}, paper fixtures {'ok' if fixtures else 'broken'}")


# -- 6 -----------------------------------------------------------------------------


def _toy_group(rng, G=4):
    def seq(n, segment):
        return LayoutSequence(tuple(int(t) for t in rng.integers(0, 11, n)), (segment,) * n, (Modality.TEXT,) * n)

    group = RolloutGroup(seq(4, Segment.PROMPT), [seq(6, Segment.RESPONSE) for _ in range(G)])
    group.rewards = rng.choice([0.0, 0.5, 2.0, 2.5], size=G)
    group.advantages = compute_advantages(group.rewards)
    group.plans = [make_noise_plan(1000, 4, rng) for _ in range(G)]
    return group


def test_criterion_06_unigrpo_mechanics():
    rng = np.random.default_rng(6)
    adv_mean, adv_std = 0.0, 0.0
    for _ in range(2000):
        r = rng.choice([0.0, 0.5, 2.0, 2.5], size=int(rng.integers(2, 17)))
        a = compute_advantages(r)
        adv_mean = max(adv_mean, abs(a.mean()))
        if r.std() >= 1e-8:
            adv_std = max(adv_std, abs(a.std() - 1))
    plan_violations = 0
    for _ in range(10_000):
        T = int(rng.integers(1, 5000))
        mu = int(rng.integers(1, min(T, 12) + 1))
        plan = make_noise_plan(T, mu, rng)
        t1 = plan.t_list[0]
        expect = [t1] + [math.floor(Fraction(n - 1, mu - 1) * (T - t1) + t1) for n in range(2, mu + 1)]
        plan_violations += list(plan.t_list) != expect or not all(0 <= t <= T for t in plan.t_list)
    model = tiny_model()
    worst_loss, worst_clip = 0.0, 0.0
    for _ in range(50):
        group = _toy_group(rng)
        for n in range(1, 5):
            res = unigrpo_objective(model, model, model, group, n, UniGRPOConfig(), V, rng)
            worst_loss = max(worst_loss, abs(float(res.loss.detach())))
            worst_clip = max(worst_clip, res.clip_fraction)
    ok = adv_mean < 1e-9 and adv_std < 1e-6 and plan_violations == 0 and worst_loss < 1e-12 and worst_clip == 0.0
    detail = (f"adv |mean| {adv_mean:.1e} (< 1e-9), |std-1| {adv_std:.1e} (< 1e-6), NoisePlan violations "
              f"{plan_violations}/10000, fixed-point |loss| {worst_loss:.1e} (< 1e-12, i.e. zero up to rounding of mean(A)), clip fraction {worst_clip}")
    assert report_criterion(6, "UniGRPO mechanics", ok, detail)


# -- 7 -----------------------------------------------------------------------------


def test_criterion_07_rl_improvement(sft_checkpoint):
    root, init = sft_checkpoint
    start = time.perf_counter()
    improved, pairs = 0, []
    for seed in range(5):
        rd = run_stage(shipped("rl", root / f"rl_seed{seed}", seed=seed), init=init)
        evals = {int(r["step"]): float(r["eval_reward"]) for r in read_metrics(rd / "eval.csv")}
        before, after = evals[0], evals[300]
        improved += after > before
        pairs.append(f"{before:.3f}->{after:.3f}")
    elapsed = time.perf_counter() - start
    ok = improved >= 4 and elapsed < 1800 and REWARD_WEIGHTS["correctness"] == 2.0 and REWARD_WEIGHTS["format"] == 0.5
    detail = f"{improved}/5 seeds improve (>= 4): {', '.join(pairs)}, {elapsed:.0f}s (< 1800s)"
    assert report_criterion(7, "RL improvement", ok, detail)


# -- 8 -----------------------------------------------------------------------------


def test_criterion_08_ablation_direction(sft_checkpoint):
    root, init = sft_checkpoint
    cfg = shipped("ablate", root / "ablate")
    out = run_ablation(cfg, init)
    summary = read_metrics(out / "summary.csv")
    steps = median_by_strategy(summary, "steps_to_threshold")
    var = median_by_strategy(summary, "trailing_variance")
    ok = steps["unigrpo"] <= steps["d1"] and var["random"] > var["unigrpo"]
    detail = (f"median steps-to-{cfg.ablate.threshold} unigrpo {steps['unigrpo']:.0f} vs d1 {steps['d1']:.0f}; "
              f"median trailing variance random {var['random']:.4f} vs unigrpo {var['unigrpo']:.4f}")
    assert report_criterion(8, "ablation direction", ok, detail)


# -- 9 -----------------------------------------------------------------------------


def test_criterion_09_llada_convergence():
    vocab = Vocabulary()
    torch.manual_seed(9)
    model = MaskPredictor(ModelConfig(layers=1, model_dim=32, heads=2, ffn_dim=64, max_len=64).for_vocab(vocab)).eval()
    rng = np.random.default_rng(9)
    worst, within = 0.0, 0
    for _ in range(20):
        task = gen_arithmetic_task(rng, 1, vocab)
        small, se = baseline_llada_loglik(model, task.prompt, task.response, 128, rng, vocab)
        large, _ = baseline_llada_loglik(model, task.prompt, task.response, 4096, rng, vocab)
        z = abs(small - large) / se
        worst = max(worst, z)
        within += z <= 3
    ok = within == 20
    detail = f"{within}/20 pairs with |N128 - N4096| <= 3 SE(N128), worst {worst:.2f} SE"
    assert report_criterion(9, "likelihood estimator convergence", ok, detail)


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_reproducibility(sft_checkpoint, tmp_path):
    _, init = sft_checkpoint
    checks = {}
    for stage, name, init_ in (("pretrain", "pretrain", None), ("rl", "rl", init)):
        extra = {"steps": 40, "ckpt_every": 20, "eval_every": 10} if stage == "pretrain" else {
            "steps": 40, "ckpt_every": 20, "rl.eval_every": 20, "rl.eval_prompts": 4}
        a = run_stage(shipped(name, tmp_path / f"{stage}_a", **extra), init=init_)
        b = run_stage(shipped(name, tmp_path / f"{stage}_b", **extra), init=init_)
        # interrupted run: stop after the first checkpoint, then resume to the end
        cfg = shipped(name, tmp_path / f"{stage}_c", **extra)
        c = run_stage(dataclasses.replace(cfg, steps=30), init=init_)
        (c / "ckpt" / "final.pt").unlink()
        assert latest_checkpoint(c).name == "step_000020.pt"
        (c / "config.lock").write_text(dump_config(cfg))
        run_stage(cfg, init=init_, resume=True)
        files = ["metrics.csv"] + (["eval.csv"] if stage == "rl" else [])
        checks[stage] = all(
            (a / f).read_bytes() == (b / f).read_bytes() == (c / f).read_bytes() for f in files
        )
    ok = all(checks.values())
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in checks.items()) + " (two runs + resume)"
    assert report_criterion(10, "reproducibility", ok, detail)
