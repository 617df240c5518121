"""Fused neural-network primitives with hand-written gradients."""

from __future__ import annotations

import numpy as np

from .tensor import (
    DTYPE,
    Tensor,
    _unbroadcast,
    as_tensor,
    concat,
    make_op,
    matmul,
    sigmoid,
    tanh,
    tsum,
    where,
)

NEG_INF = -1e30


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - s),)

    return make_op(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mask: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Batch normalization over every axis except the last (channels).

    In training mode statistics come from the cells where ``mask`` is true;
    ``running_mean`` / ``running_var`` are updated in place. Masked-out cells
    never influence statistics, which keeps padded frames inert.
    """
    c = x.shape[-1]
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        return (x - running_mean) * Tensor(inv) * gamma + beta
    if mask is None:
        w = np.ones(x.shape[:-1] + (1,), dtype=DTYPE)
    else:
        w = np.asarray(mask, dtype=DTYPE).reshape(x.shape[:-1] + (1,))
    count = max(w.sum(), 1.0)
    wt = Tensor(w)
    axes = tuple(range(x.ndim - 1))
    mean = tsum(x * wt, axes, keepdims=True) * (1.0 / count)
    xc = x - mean
    var = tsum(xc * xc * wt, axes, keepdims=True) * (1.0 / count)
    out = xc / (var + eps).sqrt() * gamma + beta
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean.data.reshape(c)
    running_var *= momentum
    running_var += (1.0 - momentum) * var.data.reshape(c)
    return out


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    n = x.shape[axis] // 2
    ax = axis % x.ndim
    idx_a = [slice(None)] * x.ndim
    idx_b = [slice(None)] * x.ndim
    idx_a[ax] = slice(0, n)
    idx_b[ax] = slice(n, 2 * n)
    a = x.data[tuple(idx_a)]
    s = 1.0 / (1.0 + np.exp(-x.data[tuple(idx_b)]))
    out = a * s

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=ax),)

    return make_op(out, (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        out = np.zeros(weight.shape, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return make_op(weight.data[ids], (weight,), backward)


def depthwise_conv1d(x: Tensor, weight: Tensor, pad_left: int, pad_right: int) -> Tensor:
    """Per-channel convolution along time.

    Args:
        x: (B, T, C) input.
        weight: (K, C) kernel.
        pad_left, pad_right: zero frames added on each side; output length is
            ``T + pad_left + pad_right - K + 1``.
    """
    k = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right), (0, 0)))
    t_out = xp.shape[1] - k + 1
    out = np.zeros((x.shape[0], t_out, x.shape[2]), dtype=DTYPE)
    for i in range(k):
        out += xp[:, i:i + t_out, :] * weight.data[i]

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.stack([(xp[:, i:i + t_out, :] * g).sum(axis=(0, 1)) for i in range(k)])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i:i + t_out, :] += g * weight.data[i]
            gx = gxp[:, pad_left:pad_left + x.shape[1], :]
        return gx, gw

    return make_op(out, (x, weight), backward)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: tuple[int, int],
    padding: tuple[tuple[int, int], tuple[int, int]],
) -> Tensor:
    """2-D convolution in channels-last layout.

    Args:
        x: (B, H, W, Cin).
        weight: (kh, kw, Cin, Cout).
        stride: (sh, sw).
        padding: ((top, bottom), (left, right)) zero padding.
    """
    kh, kw, cin, cout = weight.shape
    sh, sw = stride
    xp = np.pad(x.data, ((0, 0), padding[0], padding[1], (0, 0)))
    b, hp, wp, _ = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = cols[:, ::sh, ::sw][:, :ho, :wo]  # (B, Ho, Wo, Cin, kh, kw)
    wmat = weight.data.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    flat = cols.reshape(b * ho * wo, cin * kh * kw)
    out = (flat @ wmat).reshape(b, ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(b * ho * wo, cout)
        gx = gw = None
        if weight.requires_grad:
            gw = (flat.T @ g2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(b, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += gcols[..., i, j]
            gx = gxp[:, padding[0][0]:padding[0][0] + x.shape[1],
                     padding[1][0]:padding[1][0] + x.shape[2], :]
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 1, 2)))
        return tuple(res)

    return make_op(out, parents, backward)


def lstm_cell(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    w_x: Tensor,
    w_h: Tensor,
    bias: Tensor,
) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order is input, forget, cell, output."""
    gates = matmul(x, w_x) + matmul(h, w_h) + bias
    n = h.shape[-1]
    i = sigmoid(gates[..., 0:n])
    f = sigmoid(gates[..., n:2 * n])
    g = tanh(gates[..., 2 * n:3 * n])
    o = sigmoid(gates[..., 3 * n:4 * n])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace cells where ``mask`` is true by a constant."""
    return where(mask, Tensor(np.full((), value)), x)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-24) -> Tensor:
    na = (tsum(a * a, axis, keepdims=True) + eps).sqrt()
    nb = (tsum(b * b, axis, keepdims=True) + eps).sqrt()
    return tsum((a / na) * (b / nb), axis)


__all__ = [
    "NEG_INF",
    "batch_norm",
    "concat",
    "conv2d",
    "cosine_similarity",
    "depthwise_conv1d",
    "embedding",
    "glu",
    "layer_norm",
    "linear",
    "log_softmax",
    "logsumexp",
    "lstm_cell",
    "masked_fill",
    "softmax",
]
