"""Exact transducer loss by forward-backward recursion over the alignment lattice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import Tensor, make_op
from .model import BLANK_ID, TransducerError

NEG = -np.inf


@dataclass
class LatticeScores:
    """Forward/backward variables for a padded batch.

    ``alpha[b, t, u]`` is the log-probability of reaching node (t, u);
    ``beta[b, t, u]`` the log-probability of finishing from it, with
    ``beta[b, T_b, U_b] = 0`` as the terminal node.
    """

    alpha: np.ndarray
    beta: np.ndarray
    log_z_alpha: np.ndarray
    log_z_beta: np.ndarray
    blank_lp: np.ndarray
    label_lp: np.ndarray


def _diagonal(n: int, t_max: int, u_max: int) -> tuple[np.ndarray, np.ndarray]:
    ts = np.arange(max(0, n - u_max), min(t_max - 1, n) + 1)
    return ts, n - ts


def _normalize(lattice, labels, t_lens, u_lens):
    lp = lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice, dtype=np.float64)
    if lp.ndim == 3:
        lp = lp[None]
        labels = [labels]
    b, t, u1, v = lp.shape
    if t == 0:
        raise TransducerError("lattice has no frames")
    lab = np.zeros((b, max(u1 - 1, 0)), dtype=np.int64)
    if isinstance(labels, np.ndarray) and labels.ndim == 2:
        lab[:, :labels.shape[1]] = labels
        u_default = np.full(b, labels.shape[1])
    else:
        for i, seq in enumerate(labels):
            if len(seq) > u1 - 1:
                raise TransducerError("label sequence longer than the lattice allows")
            lab[i, :len(seq)] = seq
        u_default = np.array([len(s) for s in labels])
    t_lens = np.full(b, t) if t_lens is None else np.asarray(t_lens, dtype=np.int64)
    u_lens = u_default if u_lens is None else np.asarray(u_lens, dtype=np.int64)
    if np.any(t_lens < 1) or np.any(t_lens > t):
        raise TransducerError("frame counts must lie in [1, T]")
    if np.any(u_lens > u1 - 1) or np.any(u_lens < 0):
        raise TransducerError("label counts exceed the lattice")
    if np.any((lab < 0) | (lab >= v)) or np.any(lab[np.arange(lab.shape[1])[None, :] < u_lens[:, None]] == BLANK_ID):
        raise TransducerError("labels must be non-blank ids inside the vocabulary")
    return lp, lab, t_lens, u_lens


def lattice_scores(lattice, labels, t_lens=None, u_lens=None) -> LatticeScores:
    lp, lab, t_lens, u_lens = _normalize(lattice, labels, t_lens, u_lens)
    b, t, u1, _ = lp.shape
    u_max = u1 - 1
    bi = np.arange(b)[:, None, None]
    ti = np.arange(t)[None, :, None]
    ui = np.arange(u1)[None, None, :]
    blank = lp[..., BLANK_ID]
    label = np.full((b, t, u1), NEG)
    if u_max:
        label[:, :, :u_max] = lp[bi, ti, ui[..., :u_max], lab[:, None, :]]
    label = np.where(ui >= u_lens[:, None, None], NEG, label)

    valid = (ti < t_lens[:, None, None]) & (ui <= u_lens[:, None, None])
    terminal = (ti == t_lens[:, None, None]) & (ui == u_lens[:, None, None])
    alpha = np.full((b, t, u1), NEG)
    with np.errstate(invalid="ignore"):
        for n in range(t + u_max):
            ts, us = _diagonal(n, t, u_max)
            if n == 0:
                alpha[:, 0, 0] = 0.0
                continue
            from_t = np.where(ts > 0, alpha[:, ts - 1, us] + blank[:, ts - 1, us], NEG)
            from_u = np.where(us > 0, alpha[:, ts, us - 1] + label[:, ts, us - 1], NEG)
            alpha[:, ts, us] = np.logaddexp(from_t, from_u)
        alpha[~valid] = NEG

        beta = np.full((b, t + 1, u1 + 1), NEG)
        beta[np.arange(b), t_lens, u_lens] = 0.0
        for n in range(t + u_max - 1, -1, -1):
            ts, us = _diagonal(n, t, u_max)
            val = np.logaddexp(beta[:, ts + 1, us] + blank[:, ts, us], beta[:, ts, us + 1] + label[:, ts, us])
            beta[:, ts, us] = np.where(valid[:, ts, us], val, np.where(terminal[:, ts, us], 0.0, NEG))
    rows = np.arange(b)
    log_z_alpha = alpha[rows, t_lens - 1, u_lens] + blank[rows, t_lens - 1, u_lens]
    return LatticeScores(alpha, beta, log_z_alpha, beta[:, 0, 0].copy(), blank, label)


def rnnt_loss(lattice, labels, t_lens=None, u_lens=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood summed over all monotonic alignments.

    Args:
        lattice: (B, T, U+1, V) joint log-probs, or a single (T, U+1, V) lattice.
        labels: (B, U) padded ids or a list of id sequences (blank excluded).
        t_lens, u_lens: valid frame and label counts per utterance.
        reduction: ``"mean"``, ``"sum"`` or ``"none"`` over the batch.
    """
    src = lattice if isinstance(lattice, Tensor) else Tensor(lattice)
    single = src.ndim == 3
    sc = lattice_scores(src, labels, t_lens, u_lens)
    _, lab, _, _ = _normalize(src, labels, t_lens, u_lens)
    nll = -sc.log_z_alpha
    b = nll.shape[0]
    if np.any(np.isposinf(nll)):
        raise TransducerError("lattice assigns zero probability to the labels")
    scale = {"mean": np.full(b, 1.0 / b), "sum": np.ones(b), "none": None}[reduction]
    out = nll if reduction == "none" else np.asarray((nll * scale).sum())
    if single and reduction == "none":
        out = out[0]

    def backward(g):
        w = np.asarray(g, dtype=np.float64).reshape(-1) * np.ones(b) if scale is None else g * scale
        z = sc.log_z_alpha[:, None, None]
        t = sc.alpha.shape[1]
        with np.errstate(invalid="ignore", over="ignore"):
            gb = -np.exp(sc.alpha + sc.blank_lp + sc.beta[:, 1:t + 1, :-1] - z)
            gl = -np.exp(sc.alpha + sc.label_lp + sc.beta[:, :t, 1:] - z)
        gb = np.nan_to_num(gb) * w[:, None, None]
        gl = np.nan_to_num(gl) * w[:, None, None]
        grad = np.zeros((b,) + src.shape[-3:])
        grad[..., BLANK_ID] += gb
        u_max = grad.shape[2] - 1
        if u_max:
            bi, ti, ui = np.meshgrid(np.arange(b), np.arange(t), np.arange(u_max), indexing="ij")
            np.add.at(grad, (bi, ti, ui, lab[bi, ui]), gl[:, :, :u_max])
        return (grad[0] if single else grad,)

    return make_op(out, (src,), backward)
