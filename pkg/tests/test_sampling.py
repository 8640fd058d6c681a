import math

import numpy as np
import pytest
import torch

from helpers import TINY_VOCAB, TableModel, sampler_sweep, tiny_model
from unimask.diffusion import ScheduleKind
from unimask.sampling import (
    PAPER_IMAGE_SAMPLER,
    PAPER_TEXT_SAMPLER,
    SamplerConfig,
    SamplerConfigError,
    allowed_token_mask,
    commit_counts,
    inpaint,
    parallel_generate,
    semi_ar_generate,
)
from unimask.token_space import LayoutSequence, Modality, Segment, encode_text

V = TINY_VOCAB


def prompt_of(text):
    return encode_text(text, V, Segment.PROMPT)


def test_commit_counts_fixed_k():
    assert commit_counts(8, 4, 2, ScheduleKind.LINEAR) == [2, 2, 2, 2]
    with pytest.raises(SamplerConfigError):
        commit_counts(8, 3, 2, ScheduleKind.LINEAR)


@pytest.mark.parametrize("n,steps", [(1, 1), (7, 3), (16, 16), (10, 4), (1024, 50), (5, 9)])
def test_linear_counts_match_exact_rational_ceiling(n, steps):
    counts = commit_counts(n, steps, None, ScheduleKind.LINEAR)
    left = n
    for s, c in enumerate(counts, start=1):
        left -= c
        assert left == -(-n * (steps - s) // steps)  # integer ceil(n (1 - s/S))
    assert sum(counts) == n and min(counts) >= 0


def test_cosine_counts_sum_and_front_loading():
    counts = commit_counts(1024, 50, None, ScheduleKind.COSINE)
    assert sum(counts) == 1024
    # cos is flat near s=0, so early steps commit fewer tokens than late ones
    assert counts[0] < counts[-1]


def test_paper_text_sampler_fixture():
    cfg = SamplerConfig(**PAPER_TEXT_SAMPLER)
    cfg.check_semi_ar()
    assert cfg.block == 64 and cfg.unmask_k == 2 and cfg.steps == cfg.length // 2


def test_paper_image_sampler_fixture():
    cfg = SamplerConfig(**PAPER_IMAGE_SAMPLER)
    assert cfg.schedule == ScheduleKind.COSINE and cfg.steps == 50 and cfg.guidance_scale == 3.5
    assert sum(commit_counts(cfg.length, cfg.steps, None, cfg.schedule)) == 1024


def test_config_validation():
    with pytest.raises(SamplerConfigError):
        SamplerConfig(8, 4, 3, unmask_k=2).check_semi_ar()
    with pytest.raises(SamplerConfigError):
        SamplerConfig(8, 3, 4, unmask_k=2).check_semi_ar()
    with pytest.raises(SamplerConfigError):
        SamplerConfig(8, 4, 4, unmask_k=3).check_semi_ar()
    with pytest.raises(SamplerConfigError):
        SamplerConfig(0, 1)
    with pytest.raises(SamplerConfigError):
        SamplerConfig(4, 1, temperature=-1)


def test_single_block_single_step():
    model = tiny_model(dtype=torch.float32)
    cfg = SamplerConfig(1, 1, 1, unmask_k=1)
    out = semi_ar_generate(model, prompt_of("1+2"), cfg, V)
    assert len(out.response) == 1 and V.MASK not in out.tokens


def test_modality_restriction():
    allowed = allowed_token_mask([Modality.TEXT, Modality.IMAGE], V)
    assert not allowed[0, V.image_ids.start] and allowed[1, V.image_ids.start]
    assert not allowed[0, V.MASK] and not allowed[1, V.MASK]
    model = tiny_model(dtype=torch.float32)
    out = parallel_generate(model, prompt_of("12"), SamplerConfig(4, 2, unmask_k=2), V)
    assert all(V.is_image(t) for t in out.response.tokens)


def test_confidence_order_and_stable_ties():
    # constant logits give equal confidence everywhere; ties break left to right
    table = np.zeros(V.total_size)
    table[3] = 5.0
    model = TableModel(table)
    trace = []
    semi_ar_generate(model, prompt_of("1"), SamplerConfig(4, 2, 4, unmask_k=2), V, trace=trace)
    first = trace[0][0].tolist()
    assert first[1:] == [3, 3, V.MASK, V.MASK]


def test_guidance_zero_equals_plain():
    model = tiny_model(dtype=torch.float32)
    p = prompt_of("3+4")
    a = parallel_generate(model, p, SamplerConfig(6, 3, unmask_k=2), V, response_modality=Modality.TEXT)
    b = parallel_generate(model, p, SamplerConfig(6, 3, unmask_k=2, guidance_scale=0.0), V,
                          response_modality=Modality.TEXT)
    assert a == b


def test_guidance_uses_null_prompt_and_mixing_formula():
    calls = []

    class Spy(torch.nn.Module):
        def forward(self, x):
            calls.append(x.clone())
            out = torch.zeros(*x.shape, V.total_size)
            cond = bool((x[:, 0] != V.PAD).all())
            out[..., 1] = 1.0 if cond else 3.0
            out[..., 2] = 0.5
            return out

    # w=1: (1+w)*cond - w*uncond at id 1 is 2*1-3 = -1 < id 2's 0.5, so guidance flips the choice
    cfg = SamplerConfig(2, 1, unmask_k=2, guidance_scale=1.0)
    out = parallel_generate(Spy(), prompt_of("12"), cfg, V, response_modality=Modality.TEXT)
    assert out.response.tokens == (2, 2)
    assert calls[1][0, :2].tolist() == [V.PAD, V.NULL_PROMPT]


def test_temperature_reproducible_with_seed():
    model = tiny_model(dtype=torch.float32)
    cfg = SamplerConfig(8, 4, 4, unmask_k=2, temperature=1.0)
    a = semi_ar_generate(model, prompt_of("7"), cfg, V, np.random.default_rng(3))
    b = semi_ar_generate(model, prompt_of("7"), cfg, V, np.random.default_rng(3))
    assert a == b
    with pytest.raises(ValueError):
        semi_ar_generate(model, prompt_of("7"), cfg, V, None)


def test_temperature_one_matches_softmax_frequencies():
    table = np.log(np.array([0.5, 0.3, 0.2]))
    full = np.full(V.total_size, -np.inf)
    full[:3] = table
    model = TableModel(np.where(np.isinf(full), -1e9, full))
    rng = np.random.default_rng(0)
    cfg = SamplerConfig(1, 1, unmask_k=1, temperature=1.0)
    n = 6000
    draws = [parallel_generate(model, prompt_of("1"), cfg, V, rng, Modality.TEXT).tokens[-1] for _ in range(n)]
    freq = np.bincount(draws, minlength=3)[:3] / n
    assert np.all(np.abs(freq - [0.5, 0.3, 0.2]) < 4 * np.sqrt(0.25 / n))


def test_inpaint_preserves_given_tokens():
    model = tiny_model(dtype=torch.float32)
    base = encode_text("12+34", V)
    toks = list(base.tokens)
    toks[1] = toks[3] = V.MASK
    partial = base.replace_tokens(toks)
    out = inpaint(model, partial, SamplerConfig(1, 2, unmask_k=1), V)
    assert V.MASK not in out.tokens
    assert [out.tokens[i] for i in (0, 2, 4)] == [toks[0], toks[2], toks[4]]


def test_inpaint_without_mask_returns_input(caplog):
    model = tiny_model(dtype=torch.float32)
    seq = encode_text("12", V)
    assert inpaint(model, seq, SamplerConfig(1, 1), V) is seq
    assert "without MASK" in caplog.text


def test_inpaint_all_masked_equals_parallel():
    model = tiny_model(dtype=torch.float32)
    p = prompt_of("5+")
    partial = p + LayoutSequence.build([V.MASK] * 4, Segment.RESPONSE, Modality.TEXT)
    cfg = SamplerConfig(4, 2, unmask_k=2)
    assert inpaint(model, partial, cfg, V) == parallel_generate(model, p, cfg, V, response_modality=Modality.TEXT)


def test_sampler_contract_sweep_small():
    assert sampler_sweep(150, seed=1) == dict(prompt=0, monotone=0, termination=0, equivalence=0)


def test_paper_configs_run_end_to_end():
    model = tiny_model(dtype=torch.float32, max_len=1030)
    p = prompt_of("1+1")
    text = semi_ar_generate(model, p, SamplerConfig(**PAPER_TEXT_SAMPLER), V)
    assert V.MASK not in text.tokens and len(text.response) == 1024
    trace = []
    img = parallel_generate(model, p, SamplerConfig(**PAPER_IMAGE_SAMPLER), V, trace=trace)
    assert len(trace) == 50 and all(V.is_image(t) for t in img.response.tokens)
    masked = [int((s == V.MASK).sum()) for s in trace]
    expect = [math.ceil(1024 * math.cos(math.pi / 2 * s / 50) - 1e-9) for s in range(1, 50)] + [0]
    assert masked == expect
