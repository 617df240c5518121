"""Conformer encoder: convolutional subsampling, conformer stack and projection block."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..layers import BatchNorm, FeedForward, LayerNorm, Linear, MultiHeadAttention
from ..numcore import Module, Tensor, concat, init_param, relu, swish
from ..numcore import functional as F
from .config import ConfigError, EncoderConfig, ProjectionBlockConfig

PRETRAINABLE_PREFIXES = ("feature_encoder/", "context_network/")


class EncoderError(ValueError):
    pass


def lengths_to_mask(lengths, t: int) -> np.ndarray:
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


def _zero_invalid(x: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.reshape(mask.shape + (1,) * (x.ndim - mask.ndim))
    return x * Tensor(m.astype(np.float64))


def strided_length(n, stride: int):
    """Output length of a kernel-3 convolution with one zero frame on each side."""
    return -(-np.asarray(n) // stride)


class Subsampling(Module):
    """Two 3x3 convolutions; time stride 2 then 2 (4x) or 2 then 1 (2x), frequency stride 2 twice."""

    def __init__(self, cfg: EncoderConfig, rng):
        super().__init__()
        c1, c2 = cfg.subsampling_channels
        self.time_strides = (2, 2) if cfg.time_reduction == 4 else (2, 1)
        f_out = int(strided_length(strided_length(cfg.n_mels, 2), 2))
        self.conv1_weight = init_param(rng, (3, 3, 1, c1), fan_in=9)
        self.conv1_bias = init_param(rng, (c1,), kind="const")
        self.conv2_weight = init_param(rng, (3, 3, c1, c2), fan_in=9 * c1)
        self.conv2_bias = init_param(rng, (c2,), kind="const")
        self.out = Linear(c2 * f_out, cfg.enc_dim, rng)

    def output_lengths(self, lengths):
        return strided_length(strided_length(lengths, self.time_strides[0]), self.time_strides[1])

    def __call__(self, feats, lengths) -> tuple[Tensor, np.ndarray]:
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        lengths = np.asarray(lengths)
        b, t, f = x.shape
        reduction = self.time_strides[0] * self.time_strides[1]
        if np.any(lengths < reduction) or np.any(lengths > t):
            raise EncoderError(f"valid lengths must lie in [{reduction}, {t}] for {reduction}x reduction")
        x = _zero_invalid(x, lengths_to_mask(lengths, t)).reshape(b, t, f, 1)
        s1, s2 = self.time_strides
        x = relu(F.conv2d(x, self.conv1_weight, self.conv1_bias, (s1, 2), ((1, 1), (1, 1))))
        l1 = strided_length(lengths, s1)
        x = _zero_invalid(x, lengths_to_mask(l1, x.shape[1]))
        x = relu(F.conv2d(x, self.conv2_weight, self.conv2_bias, (s2, 2), ((1, 1), (1, 1))))
        l2 = strided_length(l1, s2)
        b, t2, f2, c = x.shape
        return self.out(x.reshape(b, t2, f2 * c)), l2


class ConvModule(Module):
    """LayerNorm, pointwise conv + GLU, depthwise conv, batch norm, Swish, pointwise conv."""

    def __init__(self, d: int, kernel: int, rng):
        super().__init__()
        self.kernel = kernel
        self.norm = LayerNorm(d, rng)
        self.pointwise1 = Linear(d, 2 * d, rng)
        self.depthwise = init_param(rng, (kernel, d), fan_in=kernel)
        self.bn = BatchNorm(d, rng)
        self.pointwise2 = Linear(d, d, rng)
        self.circular = False

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        y = F.glu(self.pointwise1(self.norm(x)))
        y = _zero_invalid(y, mask)
        left = (self.kernel - 1) // 2
        right = self.kernel - 1 - left
        if self.circular:
            t = y.shape[1]
            y = concat([y[:, t - left:] if left else y[:, :0], y, y[:, :right]], axis=1)
            y = F.depthwise_conv1d(y, self.depthwise, 0, 0)
        else:
            y = F.depthwise_conv1d(y, self.depthwise, left, right)
        y = swish(self.bn(y, mask))
        return self.pointwise2(y)


class ConformerBlock(Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, final LayerNorm."""

    def __init__(self, d: int, n_heads: int, kernel: int, rng, relative: bool = False,
                 ff_mult: int = 4, max_rel: int = 64):
        super().__init__()
        self.ffn1 = FeedForward(d, rng, ff_mult)
        self.attn_norm = LayerNorm(d, rng)
        self.attn = MultiHeadAttention(d, n_heads, rng, relative=relative, max_rel=max_rel)
        self.conv = ConvModule(d, kernel, rng)
        self.ffn2 = FeedForward(d, rng, ff_mult)
        self.final_norm = LayerNorm(d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        if x.ndim != 3:
            raise EncoderError("conformer block expects (B, T, D) activations")
        if x.shape[-1] != self.final_norm.gamma.shape[0]:
            raise EncoderError(f"activation dim {x.shape[-1]} != block dim {self.final_norm.gamma.shape[0]}")
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn(self.attn_norm(x), key_mask=mask)
        x = x + self.conv(x, mask)
        x = x + 0.5 * self.ffn2(x)
        return self.final_norm(x)


def stack_frames(x: Tensor) -> Tensor:
    """(B, T, C) -> (B, ceil(T/2), 2C) by concatenating adjacent frames; odd T gains a zero frame."""
    b, t, c = x.shape
    if t % 2:
        x = concat([x, Tensor(np.zeros((b, 1, c)))], axis=1)
        t += 1
    return x.reshape(b, t // 2, 2 * c)


def unstack_frames(x: Tensor) -> Tensor:
    b, t, c2 = x.shape
    return x.reshape(b, 2 * t, c2 // 2)


class ContextNetwork(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        super().__init__()
        self.input_linear = Linear(cfg.enc_dim, cfg.enc_dim, rng)
        self.blocks = [
            ConformerBlock(cfg.enc_dim, cfg.n_heads, cfg.conv_kernel, rng,
                           relative=cfg.relative_attention, ff_mult=cfg.ff_mult, max_rel=cfg.max_rel)
            for _ in range(cfg.n_layers)
        ]

    def __call__(self, x: Tensor, lengths) -> Tensor:
        mask = lengths_to_mask(lengths, x.shape[1])
        x = self.input_linear(x)
        for blk in self.blocks:
            x = blk(x, mask)
        return x


class ProjectionBlock(Module):
    """Linear + batch norm + Swish, optionally preceded by a conformer block and frame stacking."""

    def __init__(self, cfg: EncoderConfig, proj: ProjectionBlockConfig, rng):
        super().__init__()
        self.kind = proj.kind
        out_dim = proj.out_dim or cfg.enc_dim
        d_in = cfg.enc_dim
        if proj.kind == "conformer_plus_stack":
            self.conformer = ConformerBlock(cfg.enc_dim, cfg.n_heads, cfg.conv_kernel, rng,
                                            relative=cfg.relative_attention, ff_mult=cfg.ff_mult,
                                            max_rel=cfg.max_rel)
            d_in = 2 * cfg.enc_dim
        self.linear = Linear(d_in, out_dim, rng)
        self.bn = BatchNorm(out_dim, rng)

    def output_lengths(self, lengths):
        lengths = np.asarray(lengths)
        return -(-lengths // 2) if self.kind == "conformer_plus_stack" else lengths

    def __call__(self, x: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        lengths = np.asarray(lengths)
        if self.kind == "conformer_plus_stack":
            x = self.conformer(x, lengths_to_mask(lengths, x.shape[1]))
            x = _zero_invalid(x, lengths_to_mask(lengths, x.shape[1]))
            x = stack_frames(x)
            lengths = -(-lengths // 2)
        mask = lengths_to_mask(lengths, x.shape[1])
        return swish(self.bn(self.linear(x), mask)), lengths


class ConformerEncoder(Module):
    """Feature encoder (subsampling) + context network (linear + conformer stack) + projection."""

    def __init__(self, cfg: EncoderConfig, proj: ProjectionBlockConfig, rng):
        super().__init__()
        self.config = cfg
        self.projection_config = proj
        self.feature_encoder = Subsampling(cfg, rng)
        self.context_network = ContextNetwork(cfg, rng)
        self.projection = ProjectionBlock(cfg, proj, rng)

    @property
    def out_dim(self) -> int:
        return self.projection.linear.weight.shape[1]

    def output_lengths(self, lengths):
        return self.projection.output_lengths(self.feature_encoder.output_lengths(lengths))

    def __call__(self, feats, lengths) -> tuple[Tensor, np.ndarray]:
        z, l = self.feature_encoder(feats, lengths)
        c = self.context_network(z, l)
        return self.projection(c, l)


def build_encoder(config: EncoderConfig, projection: ProjectionBlockConfig | None = None,
                  rng: np.random.Generator | None = None) -> ConformerEncoder:
    """Construct an encoder; with ``rng=None`` parameters are shape-only placeholders."""
    if not isinstance(config, EncoderConfig):
        raise ConfigError("config must be an EncoderConfig")
    return ConformerEncoder(config, projection or ProjectionBlockConfig(), rng)


@dataclass
class TransplantReport:
    transplanted: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    ignored: list[str] = field(default_factory=list)

    @property
    def fraction_pretrainable_copied(self) -> float:
        pre = [p for p in self.transplanted + self.fresh if p.startswith(PRETRAINABLE_PREFIXES)]
        if not pre:
            return 0.0
        return sum(p.startswith(PRETRAINABLE_PREFIXES) for p in self.transplanted) / len(pre)


def checkpoint_transplant(pretrained: Mapping[str, np.ndarray], target: Module,
                          allow_partial: bool = False, dry_run: bool = False) -> TransplantReport:
    """Copy the pre-trained feature-encoder and context-network weights into ``target``.

    Paths outside those two prefixes in ``pretrained`` (e.g. the pre-training
    heads) are ignored; every other ``target`` parameter keeps its fresh
    initialization. Unless ``allow_partial``, the pre-trainable path sets must
    match exactly. A shape conflict on a shared path always raises. With
    ``dry_run`` the report is produced without writing any weights, which
    lets full-size shape-only models be checked.
    """
    params = dict(target.named_parameters())
    buffers = dict(target.named_buffers())
    src = {k: v for k, v in pretrained.items() if k.startswith(PRETRAINABLE_PREFIXES)}
    ignored = sorted(k for k in pretrained if not k.startswith(PRETRAINABLE_PREFIXES))
    tgt_pre = {k for k in list(params) + list(buffers) if k.startswith(PRETRAINABLE_PREFIXES)}
    if not allow_partial and set(src) != tgt_pre:
        missing = sorted(tgt_pre - set(src))
        extra = sorted(set(src) - tgt_pre)
        raise EncoderError(f"pre-trained sub-model does not match target: "
                           f"missing={missing[:4]} extra={extra[:4]}")
    report = TransplantReport(ignored=ignored)
    for k in sorted(src):
        if k not in params and k not in buffers:
            report.ignored.append(k)
            continue
        dest = params[k].data if k in params else buffers[k]
        if dest.shape != np.shape(src[k]):
            raise EncoderError(f"shape conflict at {k}: {np.shape(src[k])} vs {dest.shape}")
    for k in sorted(src):
        if dry_run:
            if k in params:
                report.transplanted.append(k)
        elif k in params:
            params[k].data = np.array(src[k], dtype=np.float64)
            report.transplanted.append(k)
        elif k in buffers:
            buffers[k][...] = src[k]
    report.fresh = sorted(k for k in params if k not in report.transplanted)
    return report
