"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, mul, sum_all

__all__ = ["gradcheck", "numeric_grad"]


def _projected(f: Callable[..., Tensor], inputs: Sequence[Tensor], weights: np.ndarray | None):
    out = f(*inputs)
    if weights is None:
        return out, None
    return sum_all(mul(out, Tensor(weights))), out


def _rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def numeric_grad(scalar_fn: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``scalar_fn`` with respect to each element of ``arr`` (mutated in place, then restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = scalar_fn()
        flat[i] = orig - eps
        down = scalar_fn()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"non-finite output while probing element {i}")
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              seed: int = 0, refine_above: float | None = 1e-6) -> float:
    """Largest relative disagreement between analytic and numeric gradients.

    ``f`` maps the input tensors to any output tensor; a fixed random
    projection reduces it to a scalar so every output element contributes.
    Inputs must be float64.  The error per element is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    Elements whose error exceeds ``refine_above`` are probed again with a
    step of ``eps / 100`` and keep the smaller error.  A probe of width
    ``eps`` that straddles a ReLU kink is not a gradient defect; a wrong
    analytic gradient fails at both step sizes.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs (use precision('float64'))")
        t.requires_grad = True
        t.zero_grad()

    probe = f(*inputs)
    if probe.data.size == 1:
        weights = None
    else:
        weights = np.random.default_rng(seed).standard_normal(probe.shape)

    loss, _ = _projected(f, inputs, weights)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def scalar() -> float:
        out, _ = _projected(f, inputs, weights)
        return float(out.data.reshape(()))

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not a.size:
            continue
        err = _rel_error(a, numeric_grad(scalar, t.data, eps))
        if refine_above is not None and err.max() > refine_above:
            err = np.minimum(err, _rel_error(a, numeric_grad(scalar, t.data, eps / 100)))
        worst = max(worst, float(err.max()))
    for t in inputs:
        t.zero_grad()
    return worst
