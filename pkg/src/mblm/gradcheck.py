"""Central finite-difference gradient verification.

The function under test returns any tensor; it is reduced to a scalar by a fixed random
projection.  The numeric side performs that final reduction in float64 so fp32 summation
noise does not swamp the difference quotient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import DTYPE, Tensor, mul, no_grad, tsum


def numeric_grad(
    fn: Callable[[], Tensor], param: Tensor, weights: np.ndarray, step: float = 1e-3
) -> np.ndarray:
    """d <weights, fn()> / d param by central differences, perturbing ``param.data`` in place."""
    w = np.asarray(weights, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + DTYPE(step)
            up = float((fn().data.astype(np.float64) * w).sum())
            flat[i] = orig - DTYPE(step)
            down = float((fn().data.astype(np.float64) * w).sum())
            flat[i] = orig
            # the perturbation actually applied after fp32 rounding
            h = float(np.float64(orig + DTYPE(step)) - np.float64(orig - DTYPE(step)))
            out[i] = (up - down) / h
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def gradient_pairs(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(backprop, finite-difference) gradient for each parameter under one random projection."""
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    out = fn()
    weights = rng.normal(size=out.shape).astype(DTYPE)
    tsum(mul(out, Tensor(weights))).backward()
    pairs = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape, dtype=DTYPE)
        pairs.append((analytic.copy(), numeric_grad(fn, p, weights, step)))
    return pairs


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error between backprop and finite differences for each parameter."""
    return [relative_error(a, n) for a, n in gradient_pairs(fn, params, step, rng)]


def check_gradient_vector(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[float]]:
    """Relative error over the concatenated gradient of all parameters, plus the per-tensor errors.

    Tensors whose gradient is tiny relative to the rest are dominated by fp32 rounding in the
    difference quotient; the concatenated measure weights each entry by its magnitude.
    """
    pairs = gradient_pairs(fn, params, step, rng)
    whole = relative_error(np.concatenate([a.ravel() for a, _ in pairs]),
                           np.concatenate([n.ravel() for _, n in pairs]))
    return whole, [relative_error(a, n) for a, n in pairs]
