"""Contrastive pre-training of the feature encoder and context network.

Subsampled features are span-masked with a learned vector, the context
network reads the masked sequence, and each masked context is asked to pick
its own linearly projected (unmasked) feature out of distractors taken from
other masked positions of the same utterance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig
from .encoder.model import ContextNetwork, Subsampling, lengths_to_mask
from .frontend import FeatureSequence, MaskSet, SegmentationPolicy, random_segment, sample_chunk
from .layers import Linear
from .numcore import Module, Optimizer, Tensor, derive_seed, init_param, make_rng, where
from .numcore import functional as F


class PretrainError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PretrainMaskPolicy:
    start_prob: float = 0.065
    span: int = 10

    def __post_init__(self):
        if not 0.0 < self.start_prob <= 1.0 or self.span < 1:
            raise ValueError("need 0 < start_prob <= 1 and span >= 1")


@dataclass(frozen=True)
class ContrastiveConfig:
    """``clip_to_available`` caps K at (masked - 1); otherwise shortfalls resample with replacement."""

    n_distractors: int = 10
    temperature: float = 0.1
    target_dim: int | None = None
    clip_to_available: bool = True

    def __post_init__(self):
        if self.n_distractors < 1 or self.temperature <= 0:
            raise ValueError("need n_distractors >= 1 and temperature > 0")


def sample_masks(t: int, policy: PretrainMaskPolicy, seed: int, stream: tuple = (),
                 max_tries: int = 1000) -> MaskSet:
    """Independent span starts with probability ``start_prob``; spans clipped to ``t``.

    Draws are repeated until at least one position is masked (position 0 is
    used if ``max_tries`` draws all come back empty).
    """
    if t < 1:
        raise ValueError("need at least one frame")
    rng = make_rng(seed, "pretrain_mask", *stream)
    for _ in range(max_tries):
        starts = np.flatnonzero(rng.random(t) < policy.start_prob)
        if starts.size:
            break
    else:
        starts = np.array([0])
    spans = [(int(s), int(min(policy.span, t - s))) for s in starts]
    return MaskSet(t, time_spans=spans, seed=seed, stream=("pretrain_mask",) + tuple(stream))


def masks_to_array(masks: Sequence[MaskSet], t: int) -> np.ndarray:
    out = np.zeros((len(masks), t), dtype=bool)
    for i, m in enumerate(masks):
        out[i, :m.length] = m.time_mask()
    return out


def apply_feature_mask(features: Tensor, mask: np.ndarray, mask_vector: Tensor) -> Tensor:
    """Replace frames where ``mask`` (B, T) is true by the shared ``mask_vector``."""
    m = np.asarray(mask, dtype=bool)[..., None]
    return where(np.broadcast_to(m, features.shape), mask_vector.reshape(1, 1, -1), features)


def sample_distractors(m: int, k: int, rng: np.random.Generator, replace: bool = False) -> np.ndarray:
    """(m, k) indices into the m masked positions, never pointing at the row's own position."""
    out = np.empty((m, k), dtype=np.int64)
    for i in range(m):
        idx = rng.choice(m - 1, size=k, replace=replace)
        out[i] = idx + (idx >= i)
    return out


def contrastive_loss(contexts: Tensor, targets: Tensor, mask: np.ndarray, config: ContrastiveConfig,
                     seed: int, stream: tuple = (), return_info: bool = False):
    """Mean over masked positions of the softmax cross-entropy picking the true target.

    Args:
        contexts: (B, T, D) context vectors.
        targets: (B, T, D) target vectors.
        mask: (B, T) bool, masked positions.
    """
    mask = np.asarray(mask, dtype=bool)
    rng = make_rng(seed, "distractors", *stream)
    rows, cand, flagged = [], [], False
    for b in range(mask.shape[0]):
        pos = np.flatnonzero(mask[b])
        m = pos.size
        if m == 0:
            continue
        k = config.n_distractors
        replace = False
        if m - 1 < k:
            if config.clip_to_available:
                k = m - 1
            else:
                replace, flagged = True, True
        if m == 1 and replace:
            raise PretrainError("a single masked position has no distractors to draw from")
        d = sample_distractors(m, k, rng, replace) if k else np.zeros((m, 0), dtype=np.int64)
        rows.append(np.stack([np.full(m, b), pos], axis=1))
        cand.append(np.concatenate([pos[:, None], pos[d]], axis=1) + b * mask.shape[1])
    if not rows:
        raise PretrainError("contrastive loss needs at least one masked position")
    widths = {c.shape[1] for c in cand}
    if len(widths) > 1:
        # K differs across utterances: weight each utterance's mean by its position count
        total = None
        count = 0
        for r, c in zip(rows, cand):
            part = _ce(contexts, targets, r, c, config.temperature)
            total = part * float(len(r)) if total is None else total + part * float(len(r))
            count += len(r)
        loss = total * (1.0 / count)
    else:
        loss = _ce(contexts, targets, np.concatenate(rows), np.concatenate(cand), config.temperature)
    if flagged:
        warnings.warn("fewer masked positions than distractors; sampled with replacement", stacklevel=2)
    return (loss, {"with_replacement": flagged}) if return_info else loss


def _ce(contexts: Tensor, targets: Tensor, rows: np.ndarray, cand: np.ndarray, tau: float) -> Tensor:
    b, t, d = targets.shape
    c = contexts[rows[:, 0], rows[:, 1]]
    q = targets.reshape(b * t, d)[cand]
    sims = F.cosine_similarity(c.reshape(c.shape[0], 1, d), q, axis=-1) * (1.0 / tau)
    return (F.logsumexp(sims, axis=-1) - sims[:, 0]).mean()


class PretrainHeads(Module):
    def __init__(self, d: int, target_dim: int, rng):
        super().__init__()
        self.mask_vector = init_param(rng, (d,), fan_in=d)
        self.target = Linear(d, target_dim, rng)
        self.final_proj = Linear(d, target_dim, rng)


class PretrainModel(Module):
    """Feature encoder + context network with the pre-training heads under ``pretrain/``."""

    def __init__(self, cfg: EncoderConfig, contrastive: ContrastiveConfig, rng):
        super().__init__()
        self.config = cfg
        self.feature_encoder = Subsampling(cfg, rng)
        self.context_network = ContextNetwork(cfg, rng)
        self.pretrain = PretrainHeads(cfg.enc_dim, contrastive.target_dim or cfg.enc_dim, rng)

    def encoder_state(self) -> dict[str, np.ndarray]:
        """Only the transplantable sub-model."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("pretrain/")}

    def __call__(self, feats, lengths, policy: PretrainMaskPolicy, contrastive: ContrastiveConfig,
                 seed: int, stream: tuple = ()) -> Tensor:
        z, lens = self.feature_encoder(feats, lengths)
        masks = [sample_masks(int(n), policy, seed, stream + (i,)) for i, n in enumerate(lens)]
        mask = masks_to_array(masks, z.shape[1])
        c = self.context_network(apply_feature_mask(z, mask, self.pretrain.mask_vector), lens)
        mask &= lengths_to_mask(lens, z.shape[1])
        return contrastive_loss(self.pretrain.final_proj(c), self.pretrain.target(z), mask,
                                contrastive, seed, stream)


def pretrain_step(batch: Sequence[FeatureSequence], model: PretrainModel, optimizer: Optimizer,
                  policy: PretrainMaskPolicy = PretrainMaskPolicy(),
                  contrastive: ContrastiveConfig = ContrastiveConfig(), seed: int = 0) -> float:
    """One clipped optimizer step on the contrastive loss; rolled back if non-finite."""
    from .transducer.train import pad_features

    step = optimizer.step_count
    x, lengths = pad_features(batch)
    buffers = {k: b.copy() for k, b in model.named_buffers()}
    model.train()
    model.zero_grad()
    loss = model(x, lengths, policy, contrastive, seed, ("step", step))
    ok = np.isfinite(loss.item())
    if ok:
        loss.backward()
        ok = all(np.all(np.isfinite(g)) for g in optimizer.grads().values())
    if not ok:
        for k, b in model.named_buffers():
            b[...] = buffers[k]
        model.zero_grad()
        raise PretrainError(f"non-finite loss or gradient at pre-training step {step}; step rolled back")
    optimizer.step()
    return loss.item()


def make_segments(utterances: Sequence[FeatureSequence], policy: SegmentationPolicy, rate: float,
                  seed: int, stream_len: int = 8) -> list[np.ndarray]:
    """Concatenate utterances into long streams and cut them into random-length segments.

    ``rate`` is frames per second of the duration policy; ``stream_len``
    utterances form one stream.
    """
    segments = []
    for s, start in enumerate(range(0, len(utterances), stream_len)):
        group = utterances[start:start + stream_len]
        audio = np.concatenate([u.frames[:u.valid_length] for u in group], axis=0)
        segments.extend(random_segment(audio, policy, derive_seed(seed, "stream", s), rate))
    return segments


def sample_chunk_batch(segments: Sequence[np.ndarray], batch_size: int, chunk_len: float, rate: float,
                       seed: int, step: int, min_frames: int = 4) -> list[FeatureSequence]:
    """Draw ``batch_size`` segments and a random ``chunk_len`` window from each."""
    rng = make_rng(seed, "chunk_batch", step)
    usable = [i for i, s in enumerate(segments) if len(s) >= min_frames]
    if not usable:
        raise PretrainError("no segment is long enough to sample from")
    picks = rng.choice(usable, size=batch_size, replace=len(usable) < batch_size)
    out = []
    for j, i in enumerate(picks):
        chunk = sample_chunk(segments[i], chunk_len, derive_seed(seed, "chunk", step, j), rate)
        out.append(FeatureSequence(chunk, len(chunk), f"seg{i}"))
    return out


def train_pretrain(model: PretrainModel, segments: Sequence[np.ndarray], steps: int, optimizer: Optimizer,
                   batch_size: int, chunk_len: float, rate: float,
                   policy: PretrainMaskPolicy = PretrainMaskPolicy(),
                   contrastive: ContrastiveConfig = ContrastiveConfig(), seed: int = 0) -> list[float]:
    losses = []
    for _ in range(steps):
        batch = sample_chunk_batch(segments, batch_size, chunk_len, rate, seed, optimizer.step_count)
        losses.append(pretrain_step(batch, model, optimizer, policy, contrastive, seed))
    model.eval()
    return losses
