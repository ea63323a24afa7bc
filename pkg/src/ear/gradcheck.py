"""Finite-difference gradient verification.

The numeric side only ever evaluates forward values (no tape), so it stays
independent of the adjoint rules it is checking.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def finite_difference_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued closure w.r.t. params."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fplus = fn().item()
            flat[i] = orig - h
            fminus = fn().item()
            flat[i] = orig
            gflat[i] = (fplus - fminus) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape():
        loss = fn()
        backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def max_relative_error(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    atol_floor: float = 1e-8,
) -> float:
    """Worst relative disagreement between tape and finite-difference gradients.

    Elements where both gradients sit below ``atol_floor`` are treated as
    matching zeros (central differences bottom out around 1e-11 in f64).
    """
    ana = analytic_gradients(fn, params)
    num = finite_difference_gradients(fn, params, h=h)
    worst = 0.0
    for a, n in zip(ana, num):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.where(diff <= atol_floor, 0.0, diff / np.maximum(scale, atol_floor))
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst
