"""Causal transformer language model used for shallow fusion and transcript filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..layers import FeedForward, LayerNorm, Linear, MultiHeadAttention
from ..numcore import Module, Optimizer, OptimizerConfig, Tensor, init_param, make_rng, no_grad
from ..numcore import functional as F

SENT_ID = 2


class LmError(ValueError):
    pass


@dataclass(frozen=True)
class FusionParams:
    """Shallow-fusion weights: ``lam`` scales LM log-probs, ``beta`` rewards each emitted token."""

    lam: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.beta)):
            raise LmError("fusion parameters must be finite")


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    n_layers: int = 2
    model_dim: int = 64
    n_heads: int = 4
    relative_positional: bool = True
    context_len: int = 64
    ff_mult: int = 4

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise LmError("model_dim must be divisible by n_heads")

    @classmethod
    def full_scale(cls, vocab_size: int = 1024) -> "LmConfig":
        """Eight layers at width 1024 (about 103M parameters with a 1k vocabulary)."""
        return cls(vocab_size, n_layers=8, model_dim=1024, n_heads=16, context_len=256)


def sinusoid_positions(n: int, d: int, start: int = 0) -> np.ndarray:
    pos = np.arange(start, start + n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10_000 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class _Block(Module):
    def __init__(self, cfg: LmConfig, rng):
        super().__init__()
        self.norm = LayerNorm(cfg.model_dim, rng)
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.n_heads, rng,
                                       relative=cfg.relative_positional, max_rel=cfg.context_len)
        self.ffn = FeedForward(cfg.model_dim, rng, cfg.ff_mult)

    def __call__(self, x, key_mask=None, cache=None):
        if cache is None:
            x = x + self.attn(self.norm(x), key_mask=key_mask, causal=True)
            return x + self.ffn(x)
        a, cache = self.attn(self.norm(x), key_mask=key_mask, causal=True, cache=cache)
        x = x + a
        return x + self.ffn(x), cache


@dataclass(frozen=True)
class LmState:
    """Per-hypothesis incremental state: layer caches and next-token log-probs."""

    caches: tuple
    length: int
    logprobs: np.ndarray


class TransformerLM(Module):
    def __init__(self, config: LmConfig, rng):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.embed = init_param(rng, (config.vocab_size, d), fan_in=d)
        self.blocks = [_Block(config, rng) for _ in range(config.n_layers)]
        self.final_norm = LayerNorm(d, rng)
        self.out = Linear(d, config.vocab_size, rng)

    def _embed(self, tokens: np.ndarray, start: int = 0) -> Tensor:
        x = F.embedding(self.embed, tokens)
        if not self.config.relative_positional:
            x = x + Tensor(sinusoid_positions(tokens.shape[1], self.config.model_dim, start))
        return x

    def __call__(self, tokens, key_mask: np.ndarray | None = None) -> Tensor:
        """Next-token logits (B, L, V) for token ids (B, L)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= self.config.vocab_size:
            raise LmError("token id outside the vocabulary")
        x = self._embed(tokens)
        for blk in self.blocks:
            x = blk(x, key_mask=key_mask)
        return self.out(self.final_norm(x))

    def log_probs(self, tokens, key_mask=None) -> Tensor:
        return F.log_softmax(self(tokens, key_mask))

    # -- incremental scoring -------------------------------------------------
    def begin(self) -> LmState:
        return self._advance(LmState(tuple({} for _ in self.blocks), 0, np.zeros(0)), SENT_ID)

    def advance(self, state: LmState, token: int) -> LmState:
        if not 0 <= token < self.config.vocab_size:
            raise LmError(f"token id {token} outside the vocabulary")
        return self._advance(state, token)

    def _advance(self, state: LmState, token: int) -> LmState:
        with no_grad():
            x = self._embed(np.array([[token]]), start=state.length)
            caches = []
            for blk, cache in zip(self.blocks, state.caches):
                x, c = blk(x, cache=dict(cache))
                caches.append(c)
            logits = self.out(self.final_norm(x)).data[0, -1]
        lp = logits - logits.max()
        lp = lp - np.log(np.exp(lp).sum())
        return LmState(tuple(caches), state.length + 1, lp)


def lm_score(lm: TransformerLM, tokens: Sequence[int], eos: bool = False) -> float:
    """Sum of log P(token | <s>, previous tokens)."""
    toks = [int(t) for t in tokens]
    for t in toks:
        if not 0 <= t < lm.config.vocab_size:
            raise LmError(f"token id {t} outside the vocabulary")
    seq = [SENT_ID] + toks
    targets = toks + ([SENT_ID] if eos else [])
    if not targets:
        return 0.0
    with no_grad():
        lp = lm.log_probs(np.array([seq[:len(targets)]])).data[0]
    return float(lp[np.arange(len(targets)), targets].sum())


def lm_score_incremental(lm: TransformerLM, tokens: Sequence[int]) -> float:
    state = lm.begin()
    total = 0.0
    for t in tokens:
        total += float(state.logprobs[int(t)])
        state = lm.advance(state, int(t))
    return total


def log_perplexity(lm: TransformerLM, tokens: Sequence[int]) -> float:
    """Per-token negative log-likelihood."""
    if len(tokens) == 0:
        raise LmError("empty transcript")
    return -lm_score(lm, tokens) / len(tokens)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


def lm_loss(lm: TransformerLM, seqs: Sequence[Sequence[int]], eos: bool = True) -> Tensor:
    """Mean next-token cross-entropy over a batch of token sequences."""
    inputs = [[SENT_ID] + list(s) for s in seqs]
    targets = [list(s) + [SENT_ID] for s in seqs] if eos else [list(s) + [0] for s in seqs]
    x, mask = pad_batch(inputs)
    y, _ = pad_batch(targets)
    if not eos:
        for i, s in enumerate(seqs):
            mask[i, len(s)] = False
    lp = lm.log_probs(x)
    b, n = x.shape
    picked = lp[np.arange(b)[:, None], np.arange(n)[None, :], y]
    w = mask.astype(np.float64)
    return -(picked * Tensor(w)).sum() * (1.0 / w.sum())


def train_lm(lm: TransformerLM, corpus: Sequence[Sequence[int]], steps: int, batch_size: int = 32,
             config: OptimizerConfig | None = None, seed: int = 0) -> list[float]:
    """Adam on shuffled mini-batches; returns the loss trajectory."""
    config = config or OptimizerConfig(kind="adam", peak_lr=3e-3, warmup_steps=max(1, steps // 10),
                                       beta1=0.9, beta2=0.98, grad_norm_cap=5.0)
    opt = Optimizer(lm.parameters(), config)
    rng = make_rng(seed, "train_lm")
    corpus = [list(s) for s in corpus if len(s) > 0]
    order = rng.permutation(len(corpus))
    pos = 0
    losses = []
    lm.train()
    for _ in range(steps):
        if pos + batch_size > len(order):
            order = rng.permutation(len(corpus))
            pos = 0
        batch = [corpus[i] for i in order[pos:pos + batch_size]]
        pos += batch_size
        opt.zero_grad()
        loss = lm_loss(lm, batch)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    lm.eval()
    return losses
