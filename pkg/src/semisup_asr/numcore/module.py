"""Parameter containers with hierarchical path names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)

    @classmethod
    def meta(cls, shape) -> "Parameter":
        """A shape-only placeholder backed by a zero-stride view (no allocation)."""
        p = cls.__new__(cls)
        Tensor.__init__(p, np.broadcast_to(np.zeros((), DTYPE), tuple(shape)), requires_grad=True)
        return p

    @property
    def is_meta(self) -> bool:
        return self.data.size > 0 and 0 in self.data.strides


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal samples resampled until they fall within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_param(rng: np.random.Generator | None, shape, fan_in: int | None = None,
               kind: str = "normal", value: float = 0.0) -> Parameter:
    """Create a parameter, or a meta placeholder when ``rng`` is None.

    ``kind='normal'`` draws a truncated normal scaled by ``1/sqrt(fan_in)``;
    ``kind='const'`` fills with ``value``.
    """
    if rng is None:
        return Parameter.meta(shape)
    if kind == "const":
        return Parameter(np.full(shape, value, dtype=DTYPE))
    fan_in = fan_in if fan_in is not None else shape[0]
    return Parameter(truncated_normal(rng, shape, 1.0 / np.sqrt(fan_in)))


class Module:
    """Base class: parameters, buffers and child modules are discovered by attribute.

    Children held in plain lists are named by index, giving paths such as
    ``context_network/blocks/3/ffn1/w1``.
    """

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}/{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path + "/")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in getattr(self, "_buffers", {}).items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}/")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def num_params(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: p.shape for k, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by path."""
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters/buffers; returns the loaded paths."""
        targets: dict[str, np.ndarray] = {k: p.data for k, p in self.named_parameters()}
        params = dict(self.named_parameters())
        targets.update(dict(self.named_buffers()))
        if strict:
            missing = sorted(set(targets) - set(state))
            unexpected = sorted(set(state) - set(targets))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        loaded = []
        for k, v in state.items():
            if k not in targets:
                continue
            if targets[k].shape != np.shape(v):
                raise ValueError(f"shape conflict at {k}: {targets[k].shape} vs {np.shape(v)}")
            if k in params:
                params[k].data = np.array(v, dtype=DTYPE)
            else:
                targets[k][...] = v
            loaded.append(k)
        return loaded
