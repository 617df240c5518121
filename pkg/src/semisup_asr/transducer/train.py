"""Supervised transducer fine-tuning with separate encoder and decoder optimizers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..frontend import FeatureSequence, SpecAugmentPolicy, spec_augment
from ..numcore import EmaState, Optimizer, OptimizerConfig, derive_seed, ema_update, make_rng
from .loss import rnnt_loss
from .model import TransducerModel


class NonFiniteLoss(ArithmeticError):
    """The step produced a non-finite loss or gradient and was rolled back."""


@dataclass(frozen=True)
class FinetuneConfig:
    encoder_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        kind="adam", peak_lr=3e-4, warmup_steps=5000, grad_norm_cap=20.0))
    decoder_opt: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        kind="adam", peak_lr=1e-3, warmup_steps=1500, grad_norm_cap=20.0))
    ema_decay: float = 0.9999
    spec_augment: SpecAugmentPolicy | None = field(default_factory=SpecAugmentPolicy)
    batch_size: int = 8


def make_optimizers(model: TransducerModel, cfg: FinetuneConfig) -> dict[str, Optimizer]:
    return {"encoder": Optimizer(model.encoder_parameters(), cfg.encoder_opt),
            "decoder": Optimizer(model.decoder_parameters(), cfg.decoder_opt)}


def pad_features(seqs: Sequence[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    t = max(s.frames.shape[0] for s in seqs)
    out = np.zeros((len(seqs), t, seqs[0].frames.shape[1]))
    for i, s in enumerate(seqs):
        out[i, :s.frames.shape[0]] = s.frames
    return out, np.array([s.valid_length for s in seqs])


def pad_labels(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    u = max(1, max(len(s) for s in seqs))
    out = np.zeros((len(seqs), u), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, np.array([len(s) for s in seqs])


def finetune_step(
    batch: Sequence[tuple[FeatureSequence, Sequence[int]]],
    model: TransducerModel,
    optimizers: dict[str, Optimizer],
    ema: EmaState | None = None,
    spec_policy: SpecAugmentPolicy | None = None,
    seed: int = 0,
) -> float:
    """One SpecAugment + transducer-loss step; encoder and decoder step separately.

    On a non-finite loss or gradient, batch-norm statistics are restored,
    gradients cleared and :class:`NonFiniteLoss` is raised; parameters are
    untouched.
    """
    step = optimizers["encoder"].step_count
    feats = [spec_augment(fs, spec_policy, derive_seed(seed, "specaug", step, i)) if spec_policy else fs
             for i, (fs, _) in enumerate(batch)]
    x, lengths = pad_features(feats)
    labels, u_lens = pad_labels([toks for _, toks in batch])
    buffers = {k: b.copy() for k, b in model.named_buffers()}
    model.train()
    model.zero_grad()

    def rollback(msg):
        for k, b in model.named_buffers():
            b[...] = buffers[k]
        model.zero_grad()
        raise NonFiniteLoss(msg)

    lattice, t_lens = model.lattice(x, lengths, labels)
    loss = rnnt_loss(lattice, labels, t_lens=t_lens, u_lens=u_lens)
    if not np.isfinite(loss.item()):
        rollback(f"non-finite loss at step {step}")
    loss.backward()
    for name, opt in optimizers.items():
        for k, g in opt.grads().items():
            if not np.all(np.isfinite(g)):
                rollback(f"non-finite gradient for {k} at step {step}")
    for opt in optimizers.values():
        opt.step()
    if ema is not None:
        ema_update(ema, {k: p.data for k, p in model.named_parameters()})
    return loss.item()


def train_transducer(
    model: TransducerModel,
    data: Sequence[tuple[FeatureSequence, Sequence[int]]],
    steps: int,
    cfg: FinetuneConfig = FinetuneConfig(),
    seed: int = 0,
    batches=None,
) -> tuple[list[float], EmaState, dict[str, Optimizer]]:
    """Run ``steps`` fine-tuning steps over shuffled mini-batches of ``data``.

    ``batches`` may supply an iterator of ready-made batches instead (e.g. a
    supervised/pseudo-label mixing stream).
    """
    opts = make_optimizers(model, cfg)
    ema = EmaState.from_params(cfg.ema_decay, {k: p.data for k, p in model.named_parameters()})
    if batches is None:
        batches = _shuffled_batches(data, cfg.batch_size, seed)
    losses = []
    for _ in range(steps):
        losses.append(finetune_step(next(batches), model, opts, ema, cfg.spec_augment, seed))
    model.eval()
    return losses, ema, opts


def _shuffled_batches(data, batch_size: int, seed: int):
    rng = make_rng(seed, "finetune-batches")
    n = len(data)
    batch_size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield [data[j] for j in order[i:i + batch_size]]


def load_ema(model: TransducerModel, ema: EmaState) -> None:
    """Replace model parameters by their EMA shadows (for evaluation copies)."""
    params = dict(model.named_parameters())
    for k, v in ema.shadow.items():
        params[k].data = v.copy()
