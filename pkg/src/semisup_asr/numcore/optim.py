"""Optimizers, the warmup/inverse-sqrt schedule, gradient clipping and EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .module import Parameter


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.98
    peak_lr: float = 2e-3
    warmup_steps: int = 25_000
    grad_norm_cap: float = 20.0
    factored_second_moment: bool = True
    eps: float = 1e-8
    # Adafactor: eps1 regularizes squared gradients, eps2 floors the parameter
    # scale when scale_parameter is on.
    eps1: float = 1e-30
    eps2: float = 1e-3
    clip_threshold: float = 1.0
    scale_parameter: bool = False

    def __post_init__(self):
        if self.kind not in ("adam", "adafactor"):
            raise OptimizerError(f"unknown optimizer kind {self.kind!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise OptimizerError("betas must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise OptimizerError("warmup_steps must be >= 1")
        if not self.grad_norm_cap > 0:
            raise OptimizerError("grad_norm_cap must be positive")


def transformer_lr(step: int, peak_lr: float, warmup: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup``, then inverse-sqrt decay."""
    if step < 1:
        raise OptimizerError("learning-rate schedule is defined for step >= 1")
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], cap: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``cap / norm`` when the global L2 norm exceeds ``cap``.

    Returns the (possibly scaled) gradients and the pre-clipping norm.
    """
    if not cap > 0:
        raise OptimizerError("cap must be positive")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise OptimizerError(f"non-finite gradient at {k}{tuple(bad)}")
    norm = global_norm(grads)
    if norm <= cap:
        return dict(grads), norm
    scale = cap / norm
    return {k: g * scale for k, g in grads.items()}, norm


def _check_shapes(params, grads):
    for k, p in params.items():
        if k not in grads:
            continue
        if np.shape(grads[k]) != np.shape(p):
            raise OptimizerError(f"gradient shape {np.shape(grads[k])} != parameter shape {np.shape(p)} at {k}")


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict,
              config: OptimizerConfig) -> tuple[dict[str, np.ndarray], dict]:
    """Bias-corrected Adam on the schedule's learning rate. Arrays are updated in place."""
    _check_shapes(params, grads)
    step = state.get("step", 0) + 1
    state["step"] = step
    lr = transformer_lr(step, config.peak_lr, config.warmup_steps)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    slots = state.setdefault("slots", {})
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        s = slots.get(k)
        if s is None:
            s = slots[k] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
        if s["m"].shape != p.shape:
            raise OptimizerError(f"optimizer state shape mismatch at {k}")
        s["m"] *= b1
        s["m"] += (1.0 - b1) * g
        s["v"] *= b2
        s["v"] += (1.0 - b2) * g * g
        p -= lr * (s["m"] / c1) / (np.sqrt(s["v"] / c2) + config.eps)
    state["lr"] = lr
    return params, state


def factored_second_moment(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Rank-1 reconstruction ``row ⊗ col / mean(row)`` over the last two axes."""
    denom = row.mean(axis=-1, keepdims=True)
    return (row / denom)[..., :, None] * col[..., None, :]


def adafactor_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict,
                   config: OptimizerConfig) -> tuple[dict[str, np.ndarray], dict]:
    """Adafactor with momentum, a fixed second-moment decay and update clipping.

    Parameters with two or more axes keep row and column accumulators over
    their last two axes when ``factored_second_moment`` is set; everything else
    keeps a full accumulator.
    """
    _check_shapes(params, grads)
    step = state.get("step", 0) + 1
    state["step"] = step
    lr = transformer_lr(step, config.peak_lr, config.warmup_steps)
    b1, b2 = config.beta1, config.beta2
    c2 = 1.0 - b2**step
    slots = state.setdefault("slots", {})
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        factored = config.factored_second_moment and p.ndim >= 2
        s = slots.get(k)
        if s is None:
            if factored:
                s = {"vr": np.zeros(p.shape[:-1]), "vc": np.zeros(p.shape[:-2] + p.shape[-1:])}
            else:
                s = {"v": np.zeros_like(p)}
            if b1 > 0:
                s["m"] = np.zeros_like(p)
            slots[k] = s
        g2 = g * g + config.eps1
        if factored:
            if s["vr"].shape != p.shape[:-1]:
                raise OptimizerError(f"optimizer state shape mismatch at {k}")
            s["vr"] *= b2
            s["vr"] += (1.0 - b2) * g2.mean(axis=-1)
            s["vc"] *= b2
            s["vc"] += (1.0 - b2) * g2.mean(axis=-2)
            v = factored_second_moment(s["vr"], s["vc"]) / c2
        else:
            if s["v"].shape != p.shape:
                raise OptimizerError(f"optimizer state shape mismatch at {k}")
            s["v"] *= b2
            s["v"] += (1.0 - b2) * g2
            v = s["v"] / c2
        u = g / np.sqrt(v)
        rms = math.sqrt(float(np.mean(u * u))) if u.size else 0.0
        u /= max(1.0, rms / config.clip_threshold)
        if b1 > 0:
            s["m"] *= b1
            s["m"] += (1.0 - b1) * u
            u = s["m"]
        step_size = lr
        if config.scale_parameter:
            step_size *= max(config.eps2, math.sqrt(float(np.mean(p * p))))
        p -= step_size * u
    state["lr"] = lr
    return params, state


def second_moment_size(state: dict, path: str) -> int:
    """Number of second-moment accumulators held for one parameter."""
    s = state["slots"][path]
    return int(sum(s[k].size for k in ("v", "vr", "vc") if k in s))


class Optimizer:
    """Binds a parameter group to one optimizer configuration and schedule."""

    def __init__(self, params: Mapping[str, Parameter], config: OptimizerConfig):
        self.params = dict(params)
        self.config = config
        self.state: dict = {}

    @property
    def step_count(self) -> int:
        return self.state.get("step", 0)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> dict:
        """Clip, then apply one update. Returns ``{'lr', 'grad_norm'}``."""
        grads = self.grads() if grads is None else grads
        clipped, norm = clip_global_norm(grads, self.config.grad_norm_cap)
        arrays = {k: p.data for k, p in self.params.items()}
        fn = adam_step if self.config.kind == "adam" else adafactor_step
        fn(arrays, clipped, self.state, self.config)
        return {"lr": self.state["lr"], "grad_norm": norm}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array([float(self.step_count)])}
        for k, slot in self.state.get("slots", {}).items():
            for name, arr in slot.items():
                out[f"{prefix}/{name}/{k}"] = arr
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
        slots: dict = {}
        for key, arr in arrays.items():
            if not key.startswith(prefix + "/"):
                continue
            rest = key[len(prefix) + 1:]
            if rest == "step":
                self.state["step"] = int(arr[0])
                continue
            name, path = rest.split("/", 1)
            slots.setdefault(path, {})[name] = np.array(arr)
        self.state["slots"] = slots


@dataclass
class EmaState:
    decay: float
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("EMA decay must lie in [0, 1]")

    @classmethod
    def from_params(cls, decay: float, params: Mapping[str, np.ndarray]) -> "EmaState":
        return cls(decay, {k: np.array(v, dtype=np.float64) for k, v in params.items()})


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if set(ema.shadow) != set(params):
        raise ValueError("EMA shadow and parameters have different paths")
    for k, v in params.items():
        s = ema.shadow[k]
        if s.shape != np.shape(v):
            raise ValueError(f"EMA shape mismatch at {k}")
        s *= ema.decay
        s += (1.0 - ema.decay) * np.asarray(v)
    return ema
