"""LSTM prediction network, joint network and the full transducer model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoder import ConformerEncoder, EncoderConfig, ProjectionBlockConfig
from ..encoder.model import ContextNetwork, ProjectionBlock, Subsampling
from ..layers import Linear
from ..numcore import Module, Tensor, init_param, no_grad, stack, tanh
from ..numcore import functional as F
from ..numcore.tensor import _sigmoid

BLANK_ID = 0


class TransducerError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    """Prediction/joint network sizes. ``vocab`` counts every output id including blank."""

    vocab: int
    n_lstm_layers: int = 2
    dim: int = 640
    joint_dim: int | None = None

    def __post_init__(self):
        if self.dim <= 0 or self.vocab < 2 or self.n_lstm_layers < 1:
            raise TransducerError("decoder needs dim > 0, vocab >= 2 and at least one LSTM layer")

    @property
    def joint(self) -> int:
        return self.joint_dim or self.dim


class LstmLayer(Module):
    def __init__(self, d_in: int, d: int, rng):
        super().__init__()
        self.w_x = init_param(rng, (d_in, 4 * d), fan_in=d_in)
        self.w_h = init_param(rng, (d, 4 * d), fan_in=d)
        self.bias = init_param(rng, (4 * d,), kind="const")


class PredictionNetwork(Module):
    """Embedding followed by stacked LSTMs; blank doubles as the start symbol."""

    def __init__(self, cfg: DecoderConfig, rng):
        super().__init__()
        self.dim = cfg.dim
        self.embed = init_param(rng, (cfg.vocab, cfg.dim), fan_in=cfg.dim)
        self.layers = [LstmLayer(cfg.dim, cfg.dim, rng) for _ in range(cfg.n_lstm_layers)]

    def __call__(self, labels: np.ndarray) -> Tensor:
        """Outputs (B, U+1, H): position u has consumed the first u labels."""
        labels = np.asarray(labels, dtype=np.int64)
        b, u = labels.shape
        inputs = np.concatenate([np.full((b, 1), BLANK_ID), labels], axis=1)
        x = F.embedding(self.embed, inputs)
        steps = [x[:, i] for i in range(u + 1)]
        for layer in self.layers:
            h = c = Tensor(np.zeros((b, self.dim)))
            outs = []
            for xt in steps:
                h, c = F.lstm_cell(xt, h, c, layer.w_x, layer.w_h, layer.bias)
                outs.append(h)
            steps = outs
        return stack(steps, axis=1)

    def initial_state(self) -> tuple:
        z = np.zeros(self.dim)
        return tuple((z, z) for _ in self.layers)

    def step(self, token: int, state: tuple) -> tuple[np.ndarray, tuple]:
        """Advance by one token on plain arrays; returns (output, new state)."""
        x = self.embed.data[token]
        new = []
        n = self.dim
        for layer, (h, c) in zip(self.layers, state):
            g = x @ layer.w_x.data + h @ layer.w_h.data + layer.bias.data
            i, f, o = _sigmoid(g[:n]), _sigmoid(g[n:2 * n]), _sigmoid(g[3 * n:])
            c = f * c + i * np.tanh(g[2 * n:3 * n])
            h = o * np.tanh(c)
            new.append((h, c))
            x = h
        return x, tuple(new)


class JointNetwork(Module):
    """log_softmax(W_o tanh(W_e enc + W_d dec) + b_o)."""

    def __init__(self, enc_dim: int, dec_dim: int, cfg: DecoderConfig, rng):
        super().__init__()
        self.enc_proj = Linear(enc_dim, cfg.joint, rng)
        self.dec_proj = Linear(dec_dim, cfg.joint, rng, bias=False)
        self.out = Linear(cfg.joint, cfg.vocab, rng)

    def __call__(self, enc: Tensor, dec: Tensor) -> Tensor:
        """enc (B, T, De), dec (B, U+1, Dd) -> lattice log-probs (B, T, U+1, V)."""
        e = self.enc_proj(enc)
        d = self.dec_proj(dec)
        b, t, j = e.shape
        u = d.shape[1]
        z = tanh(e.reshape(b, t, 1, j) + d.reshape(b, 1, u, j))
        return F.log_softmax(self.out(z))

    def project_encoder(self, enc: np.ndarray) -> np.ndarray:
        return enc @ self.enc_proj.weight.data + self.enc_proj.bias.data

    def project_decoder(self, dec: np.ndarray) -> np.ndarray:
        return dec @ self.dec_proj.weight.data

    def log_probs(self, enc_proj: np.ndarray, dec_proj: np.ndarray) -> np.ndarray:
        """Joint log-probs from pre-projected activations (any broadcastable leading shape)."""
        logits = np.tanh(enc_proj + dec_proj) @ self.out.weight.data + self.out.bias.data
        logits = logits - logits.max(axis=-1, keepdims=True)
        return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


class Decoder(Module):
    def __init__(self, enc_dim: int, cfg: DecoderConfig, rng):
        super().__init__()
        self.config = cfg
        self.prediction = PredictionNetwork(cfg, rng)
        self.joint = JointNetwork(enc_dim, cfg.dim, cfg, rng)


class TransducerModel(ConformerEncoder):
    """Conformer encoder plus LSTM decoder; decoder paths live under ``decoder/``."""

    def __init__(self, cfg: EncoderConfig, proj: ProjectionBlockConfig, dec: DecoderConfig, rng):
        Module.__init__(self)
        self.config = cfg
        self.projection_config = proj
        self.decoder_config = dec
        self.feature_encoder = Subsampling(cfg, rng)
        self.context_network = ContextNetwork(cfg, rng)
        self.projection = ProjectionBlock(cfg, proj, rng)
        self.decoder = Decoder(self.out_dim, dec, rng)

    def encoder_parameters(self) -> dict:
        return {k: p for k, p in self.named_parameters() if not k.startswith("decoder/")}

    def decoder_parameters(self) -> dict:
        return {k: p for k, p in self.named_parameters() if k.startswith("decoder/")}

    def encode(self, feats, lengths) -> tuple[Tensor, np.ndarray]:
        return ConformerEncoder.__call__(self, feats, lengths)

    def lattice(self, feats, lengths, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
        enc, enc_lengths = self.encode(feats, lengths)
        dec = self.decoder.prediction(labels)
        return self.decoder.joint(enc, dec), enc_lengths

    def encode_numpy(self, feats: np.ndarray, length: int | None = None) -> np.ndarray:
        """Encoder output (T', D) for one utterance in inference mode."""
        feats = np.asarray(feats)
        length = feats.shape[0] if length is None else length
        with no_grad():
            enc, lens = self.encode(feats[None], [length])
        return enc.data[0, :int(lens[0])]


def build_transducer(enc_cfg: EncoderConfig, proj: ProjectionBlockConfig, dec_cfg: DecoderConfig,
                     rng: np.random.Generator | None = None) -> TransducerModel:
    """Construct a transducer; ``rng=None`` gives shape-only parameters for counting."""
    return TransducerModel(enc_cfg, proj, dec_cfg, rng)
