"""Central finite-difference checks against tape gradients (use under ``precision(np.float64)``)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [np.zeros_like(t.value) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> list[np.ndarray]:
    grads = []
    for t in inputs:
        base = t.value.copy()
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for sign in (1, -1):
                probe = base.copy()
                probe[idx] += sign * step
                t.value = probe
                g[idx] += sign * float(fn().value)
            g[idx] /= 2 * step
        t.value = base
        grads.append(g)
    return grads


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> float:
    """Worst relative error between tape and finite-difference gradients over ``inputs``."""
    analytic = analytic_grads(fn, inputs)
    numeric = numeric_grads(fn, inputs, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def directional_check(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator, step: float = 1e-4
) -> float:
    """Compare the directional derivative along one random direction (for large parameter sets)."""
    analytic = analytic_grads(fn, inputs)
    directions = [rng.standard_normal(t.shape) for t in inputs]
    predicted = sum(float((a * d).sum()) for a, d in zip(analytic, directions))
    bases = [t.value.copy() for t in inputs]
    values = []
    for sign in (1, -1):
        for t, base, d in zip(inputs, bases, directions):
            t.value = base + sign * step * d
        values.append(float(fn().value))
    for t, base in zip(inputs, bases):
        t.value = base
    measured = (values[0] - values[1]) / (2 * step)
    return abs(predicted - measured) / max(abs(predicted), abs(measured), 1e-12)
