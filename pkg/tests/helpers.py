"""Small shared fixtures for the test-suite."""

import itertools
import math

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call, vmap

from unimask.model import MaskPredictor, ModelConfig
from unimask.diffusion import build_transition_matrix
from unimask.token_space import LayoutSequence, Modality, Segment, Vocabulary

TINY_VOCAB = Vocabulary(charset="0123456789+", codebook_size=4)


def tiny_model(seed=0, dtype=torch.float64, max_len=16, vocab=TINY_VOCAB):
    torch.manual_seed(seed)
    cfg = ModelConfig(layers=1, model_dim=8, heads=2, ffn_dim=16, max_len=max_len).for_vocab(vocab)
    return MaskPredictor(cfg).to(dtype)


class UniformModel(nn.Module):
    """Outputs all-zero logits, i.e. p(v) = 1/V everywhere."""

    def __init__(self, vocab_size):
        super().__init__()
        self.vocab_size = vocab_size
        self.dummy = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, tokens):
        return torch.zeros(*tokens.shape, self.vocab_size, dtype=torch.float64) + 0 * self.dummy


class TableModel(nn.Module):
    """Position-independent fixed logits: logits[v] = table[v] at every position."""

    def __init__(self, table):
        super().__init__()
        self.table = nn.Parameter(torch.as_tensor(table, dtype=torch.float64))

    def forward(self, tokens):
        return self.table.expand(*tokens.shape, self.table.shape[0])


# -- sampler contract sweep ----------------------------------------------------


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def random_sampler_case(rng):
    """A random valid semi-AR configuration plus prompt length."""
    from unimask.diffusion import ScheduleKind
    from unimask.sampling import SamplerConfig

    N = int(rng.choice([1, 2, 4, 6, 8, 12]))
    B = int(rng.choice(_divisors(N)))
    temperature = float(rng.choice([0.0, 1.0]))
    guidance = float(rng.choice([0.0, 0.0, 1.5]))
    if rng.random() < 0.5:
        k = int(rng.choice(_divisors(B)))
        cfg = SamplerConfig(N, N // k, B, ScheduleKind.LINEAR, k, guidance, temperature)
    else:
        per_block = int(rng.integers(1, B + 2))
        kind = ScheduleKind(rng.choice(["linear", "cosine"]))
        cfg = SamplerConfig(N, per_block * (N // B), B, kind, None, guidance, temperature)
    return cfg, int(rng.integers(0, 5))


def sampler_sweep(n_cases, seed=0):
    """Returns violation counts for the four sampler contracts."""
    import numpy as np
    import torch

    from unimask.sampling import SamplerConfig, parallel_generate_batch, semi_ar_generate_batch
    from unimask.token_space import LayoutSequence, Modality, Segment

    vocab = TINY_VOCAB
    model = tiny_model(seed=seed, dtype=torch.float32, max_len=32)
    rng = np.random.default_rng(seed)
    v = dict(prompt=0, monotone=0, termination=0, equivalence=0)
    for _ in range(n_cases):
        cfg, P = random_sampler_case(rng)
        toks = tuple(int(t) for t in rng.integers(0, len(vocab.charset), size=P))
        prompt = LayoutSequence(toks, (Segment.PROMPT,) * P, (Modality.TEXT,) * P)
        trace = []
        seed_i = int(rng.integers(1 << 31))
        out = semi_ar_generate_batch(model, [prompt], cfg, vocab, np.random.default_rng(seed_i), trace=trace)[0]
        if out.tokens[:P] != prompt.tokens or any(int(s[0, :P].ne(torch.tensor(toks, dtype=torch.long)).sum()) for s in trace):
            v["prompt"] += 1
        prev = torch.full((P + cfg.length,), vocab.MASK)
        prev[:P] = torch.tensor(toks, dtype=torch.long)
        for snap in trace:
            snap = snap[0]
            committed = prev != vocab.MASK
            if not torch.equal(snap[committed], prev[committed]):
                v["monotone"] += 1
                break
            prev = snap
        if len(trace) != cfg.steps or vocab.MASK in out.tokens:
            v["termination"] += 1
        # a single block spanning the response must match parallel decoding with the linear schedule
        whole = SamplerConfig(cfg.length, cfg.steps, None, "linear", cfg.unmask_k, cfg.guidance_scale, cfg.temperature)
        a = semi_ar_generate_batch(model, [prompt], whole, vocab, np.random.default_rng(seed_i))[0]
        b = parallel_generate_batch(model, [prompt], whole, vocab, np.random.default_rng(seed_i), Modality.TEXT)[0]
        if a.tokens != b.tokens:
            v["equivalence"] += 1
    return v


# -- gradient check ------------------------------------------------------------


def random_seq(rng, n_prompt, n_resp, V=TINY_VOCAB):
    """Random non-special tokens with modality tags matching their id range."""
    toks = rng.integers(0, V.total_size - len(V.special_ids), size=n_prompt + n_resp)
    mods = [Modality.IMAGE if V.is_image(int(t)) else Modality.TEXT for t in toks]
    seg = [Segment.PROMPT] * n_prompt + [Segment.RESPONSE] * n_resp
    return LayoutSequence(tuple(int(t) for t in toks), tuple(seg), tuple(mods))


def fd_gradient_check(model, cb, h=1e-6):
    """Relative error between autograd and full-coordinate central differences."""
    names = [n for n, _ in model.named_parameters()]
    shapes = [p.shape for _, p in model.named_parameters()]
    flat0 = torch.cat([p.detach().flatten() for p in model.parameters()])

    def loss_of(flat):
        params, k = {}, 0
        for n, s in zip(names, shapes):
            size = math.prod(s)
            params[n] = flat[k:k + size].view(s)
            k += size
        logits = functional_call(model, params, (cb.noisy,))
        lp = logits.log_softmax(-1).gather(-1, cb.clean.unsqueeze(-1)).squeeze(-1)
        t = torch.as_tensor(cb.t, dtype=lp.dtype)
        return (-(lp * cb.mask.to(lp.dtype)).sum(1) / t).mean()

    eye = torch.eye(flat0.numel(), dtype=flat0.dtype) * h
    plus = vmap(loss_of)(flat0 + eye)
    minus = vmap(loss_of)(flat0 - eye)
    fd = (plus - minus) / (2 * h)
    return fd


def gradient_rel_error(model, rep, cb):
    """Norm-based relative error of autograd vs finite differences for one loss draw."""
    model.zero_grad()
    rep.value.backward()
    analytic = torch.cat([p.grad.flatten() for p in model.parameters()])
    fd = fd_gradient_check(model, cb)
    denom = max(analytic.norm(), fd.norm(), 1e-12)
    return float((analytic - fd).norm() / denom)


# -- diffusion oracles ---------------------------------------------------------


def simulate_chain(spec, x0, up_to, n, rng):
    """Sample x_{up_to} for n independent chains started at x0."""
    K = spec.K
    x = np.full(n, x0)
    for s in range(up_to):
        a, b, g = spec.alpha[s], spec.beta[s], spec.gamma[s]
        u = rng.random(n)
        new = x.copy()
        live = x < K
        keep = u < a
        to_mask = (u >= a) & (u < a + g)
        uniform = u >= a + g  # uniform over the K ordinary categories
        new[live & to_mask] = K
        cats = rng.integers(0, K, size=n)
        new[live & uniform] = cats[live & uniform]
        new[live & keep] = x[live & keep]
        x = new
    return x


def brute_force_posterior(spec, x_t, x_0, step):
    """Sum path probabilities over every trajectory x_1..x_step."""
    K = spec.K
    Qs = [build_transition_matrix(spec, s) for s in range(1, step + 1)]
    joint = np.zeros(K + 1)
    for path in itertools.product(range(K + 1), repeat=step):
        if path[-1] != x_t:
            continue
        p, prev = 1.0, x_0
        for s, cur in enumerate(path):
            p *= Qs[s][cur, prev]
            prev = cur
        before = path[-2] if step > 1 else x_0
        joint[before] += p
    total = joint.sum()
    if total == 0:
        return None
    return joint / total


# -- acceptance reporting -------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number, name, ok, detail):
    """Record and print one PASS/FAIL line; the terminal summary repeats them all."""
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok
