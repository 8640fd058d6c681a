"""Bidirectional transformer mask predictor over the joint vocabulary."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .token_space import LayoutSequence, Vocabulary

CKPT_FORMAT = "unimask-ckpt/1"


@dataclass
class ModelConfig:
    vocab_size: int = 0  # 0 until bound to a Vocabulary
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 256
    prompt_dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ValueError("prompt_dropout must be a probability")

    def for_vocab(self, vocab: Vocabulary) -> "ModelConfig":
        return replace(self, vocab_size=vocab.total_size)


@dataclass
class PredictorOutput:
    logits: torch.Tensor  # (L, V) or (B, L, V)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.model_dim
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.proj = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, cfg.ffn_dim, bias=False)
        self.fc2 = nn.Linear(cfg.ffn_dim, d, bias=False)

    def forward(self, x):
        B, L, D = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(D, dim=-1)
        q = q.view(B, L, self.heads, -1).transpose(1, 2)
        k = k.view(B, L, self.heads, -1).transpose(1, 2)
        v = v.view(B, L, self.heads, -1).transpose(1, 2)
        # full attention: every position sees every other, MASK included
        att = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, D)
        x = x + self.proj(y)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class MaskPredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size < 1:
            raise ValueError("ModelConfig.vocab_size is unset; bind it with for_vocab()")
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.model_dim))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.apply(self._init)
        nn.init.normal_(self.pos_emb, std=0.02)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        L = tokens.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"input length {L} exceeds max_len {self.cfg.max_len}")
        x = self.tok_emb(tokens) + self.pos_emb[:L]
        for block in self.blocks:
            x = block(x)
        logits = self.ln_f(x) @ self.tok_emb.weight.T  # tied head
        return logits[0] if squeeze else logits

    def predict(self, seq: LayoutSequence) -> PredictorOutput:
        tokens = torch.tensor(seq.tokens, dtype=torch.long)
        if tokens.numel() and int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(f"token id {int(tokens.max())} >= vocab_size {self.cfg.vocab_size}")
        return PredictorOutput(self(tokens))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def log_probs_at(output: PredictorOutput | torch.Tensor, positions, targets) -> torch.Tensor:
    """log softmax(logits[p])[target] for each (p, target) pair."""
    logits = output.logits if isinstance(output, PredictorOutput) else output
    positions = torch.as_tensor(positions, dtype=torch.long)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if positions.shape != targets.shape:
        raise ValueError("positions and targets must have the same length")
    rows = logits[positions]
    return rows.log_softmax(dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def token_log_probs(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batched log p(target) at every position; shape of ``targets``."""
    return logits.log_softmax(dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, model: MaskPredictor, vocab: Vocabulary, **extra) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "config": asdict(model.cfg),
        "vocab": vocab.dumps(),
        "state": model.state_dict(),
        **extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, vocab: Vocabulary | None = None):
    """Returns (model, vocab, payload). A vocabulary mismatch is an error."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    stored = Vocabulary.loads(payload["vocab"])
    if vocab is not None and vocab != stored:
        raise ValueError(f"{path}: checkpoint vocabulary does not match the requested one")
    cfg = ModelConfig(**payload["config"])
    if cfg.vocab_size != stored.total_size:
        raise ValueError(f"{path}: vocab_size {cfg.vocab_size} != vocabulary size {stored.total_size}")
    dtype = next(iter(payload["state"].values())).dtype
    model = MaskPredictor(cfg).to(dtype)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, stored, payload
