"""Layers shared by the conformer encoder and the transformer language model."""

from __future__ import annotations

import numpy as np

from .numcore import Module, Tensor, concat, einsum, init_param, swish, where
from .numcore import functional as F


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        super().__init__()
        self.weight = init_param(rng, (d_in, d_out), fan_in=d_in)
        self.bias = init_param(rng, (d_out,), kind="const") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, rng):
        super().__init__()
        self.gamma = init_param(rng, (d,), kind="const", value=1.0)
        self.beta = init_param(rng, (d,), kind="const")

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    """Channel-last batch norm whose batch statistics skip padded frames."""

    def __init__(self, d: int, rng, momentum: float = 0.99):
        super().__init__()
        self.gamma = init_param(rng, (d,), kind="const", value=1.0)
        self.beta = init_param(rng, (d,), kind="const")
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(d))
        self.register_buffer("running_var", np.ones(d))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.buffer("running_mean"),
                            self.buffer("running_var"), mask=mask, training=self.training,
                            momentum=self.momentum)


class FeedForward(Module):
    """Pre-norm position-wise feed-forward with Swish."""

    def __init__(self, d: int, rng, mult: int = 4):
        super().__init__()
        self.norm = LayerNorm(d, rng)
        self.w1 = Linear(d, mult * d, rng)
        self.w2 = Linear(mult * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(swish(self.w1(self.norm(x))))


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention.

    With ``relative=True`` each layer learns one key-side embedding per clipped
    relative distance ``j - i`` in ``[-max_rel, max_rel]`` (shared by heads), so
    scores depend on offsets between frames rather than their buffer indices.
    Supports an incremental key/value cache for causal decoding.
    """

    def __init__(self, d: int, n_heads: int, rng, relative: bool = False, max_rel: int = 64):
        super().__init__()
        if d % n_heads:
            raise ValueError("model dim must be divisible by the number of heads")
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.relative = relative
        self.max_rel = max_rel
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.rel_key = init_param(rng, (2 * max_rel + 1, self.d_head), fan_in=self.d_head) if relative else None
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, causal: bool = False,
                 cache: dict | None = None, positions: np.ndarray | None = None):
        """Attend from ``x`` (B, T, D) to itself plus any cached keys.

        Args:
            key_mask: (B, T_total) bool, true for keys that may be attended.
            causal: forbid keys after the query position.
            cache: ``{'k', 'v', 'len'}`` from a previous call; when given, the
                updated cache is returned alongside the output.
            positions: query positions (defaults to ``cache_len + arange(T)``).
        """
        b, t, _ = x.shape
        h = self.n_heads
        q = _split_heads(self.wq(x), h)
        k = _split_heads(self.wk(x), h)
        v = _split_heads(self.wv(x), h)
        past = 0
        if cache is not None and cache.get("len", 0) > 0:
            past = cache["len"]
            k = concat([Tensor(cache["k"]), k], axis=2)
            v = concat([Tensor(cache["v"]), v], axis=2)
        qpos = np.arange(past, past + t) if positions is None else positions
        kpos = np.arange(past + t)
        scale = 1.0 / np.sqrt(self.d_head)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if self.relative:
            dist = np.clip(kpos[None, :] - qpos[:, None], -self.max_rel, self.max_rel) + self.max_rel
            rel = F.embedding(self.rel_key, dist)
            scores = scores + einsum("bhid,ijd->bhij", q, rel) * scale
        blocked = np.zeros((b, 1, t, past + t), dtype=bool)
        if key_mask is not None:
            blocked |= ~np.asarray(key_mask, bool)[:, None, None, :]
        if causal:
            blocked |= (kpos[None, :] > qpos[:, None])[None, None]
        if blocked.any():
            scores = where(blocked, Tensor(np.full((), F.NEG_INF)), scores)
        attn = F.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, h * self.d_head)
        out = self.wo(out)
        if cache is None:
            return out
        return out, {"k": k.data, "v": v.data, "len": past + t}
