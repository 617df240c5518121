"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class GradCheckError(ArithmeticError):
    """Raised when the checked function is not finite at a probe point."""


def grad_check(
    fn: Callable[..., Tensor],
    *points: Tensor,
    epsilon: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``fn`` maps the given tensors to a scalar tensor. Each point must have
    ``requires_grad`` set. With ``max_coords`` only a random subset of each
    point's coordinates is probed (useful for whole-model checks).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in points:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
        p.requires_grad = True
    out = fn(*points)
    if not np.isfinite(out.data).all():
        raise GradCheckError("function value is not finite at the base point")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in points]

    worst = 0.0
    for p, a in zip(points, analytic):
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(p.size, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + epsilon
                fp = fn(*points).item()
                flat[idx] = orig - epsilon
                fm = fn(*points).item()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                coord = tuple(int(i) for i in np.unravel_index(idx, p.shape))
                raise GradCheckError(f"non-finite value when perturbing coordinate {coord}")
            numeric = (fp - fm) / (2.0 * epsilon)
            an = a.reshape(-1)[idx]
            worst = max(worst, abs(an - numeric) / max(1.0, abs(an)))
    return worst
