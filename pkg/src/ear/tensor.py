"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap contiguous row-major numpy arrays (float64 by default).
Operations executed while a :class:`Tape` is active append adjoint records;
:func:`backward` replays the records in exact reverse execution order and
accumulates gradients into every reachable leaf with ``requires_grad=True``.

Broadcasting is deliberately restricted to scalar-tensor and per-row bias
(a 1-D vector added along the last axis); everything else must shape-match.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray
AdjointFn = Callable[[Array], Array]


class Tensor:
    """Dense real array with optional gradient tracking.

    ``grad`` has the same shape as ``data`` and is populated by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    # -- structural views ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def values(self) -> Array:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward.

    Single-writer: one tape per forward/backward pass. A tape is consumed by
    the first backward call through it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, list[tuple[Tensor, AdjointFn]]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self._records)


_ACTIVE: list[Tape] = []


def _record(out: Tensor, pairs: list[tuple[Tensor, AdjointFn]]) -> None:
    if out.requires_grad and _ACTIVE and not _ACTIVE[-1]._consumed:
        _ACTIVE[-1]._records.append((out, pairs))


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf of ``loss``.

    Requires a scalar loss and an active tape; the tape is consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _ACTIVE:
        raise ContractError("backward requires an active tape")
    tape = _ACTIVE[-1]
    if tape._consumed:
        raise ContractError("tape already consumed by a previous backward")

    pending: dict[int, tuple[Tensor, Array]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for out, pairs in reversed(tape._records):
        entry = pending.pop(id(out), None)
        if entry is None:
            continue
        grad_out = entry[1]
        for tin, fn in pairs:
            if not tin.requires_grad:
                continue
            gin = fn(grad_out)
            key = id(tin)
            if key in pending:
                pending[key] = (tin, pending[key][1] + gin)
            else:
                pending[key] = (tin, gin)

    # Whatever remains was never produced on this tape: the leaves.
    for tleaf, g in pending.values():
        if tleaf.requires_grad:
            tleaf.grad = g if tleaf.grad is None else tleaf.grad + g

    tape._consumed = True
    tape._records.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _bias_axes(shape: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(range(len(shape) - 1))


def _check_addlike(a: Tensor, b: Tensor, opname: str) -> str:
    """Classify the allowed broadcast form: 'same', 'scalar' or 'bias'."""
    if a.shape == b.shape:
        return "same"
    if b.size == 1:
        return "scalar"
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return "bias"
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    form = _check_addlike(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
    if form == "same":
        _record(out, [(a, lambda g: g), (b, lambda g: g)])
    elif form == "scalar":
        shape_b = b.data.shape
        _record(out, [(a, lambda g: g), (b, lambda g: g.sum().reshape(shape_b))])
    else:
        axes = _bias_axes(a.shape)
        _record(out, [(a, lambda g: g), (b, lambda g: g.sum(axis=axes))])
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    form = _check_addlike(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
    if form == "same":
        _record(out, [(a, lambda g: g), (b, lambda g: -g)])
    elif form == "scalar":
        shape_b = b.data.shape
        _record(out, [(a, lambda g: g), (b, lambda g: -g.sum().reshape(shape_b))])
    else:
        axes = _bias_axes(a.shape)
        _record(out, [(a, lambda g: g), (b, lambda g: -g.sum(axis=axes))])
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.requires_grad)
    _record(out, [(a, lambda g: -g)])
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be scalar."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad * bd, a.requires_grad or b.requires_grad)

    def da(g: Array) -> Array:
        full = g * bd
        return full.sum().reshape(ad.shape) if ad.size == 1 and full.size != 1 else full

    def db(g: Array) -> Array:
        full = g * ad
        return full.sum().reshape(bd.shape) if bd.size == 1 and full.size != 1 else full

    _record(out, [(a, da), (b, db)])
    return out


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or stacked (batched) 3-D operands."""
    ad, bd = a.data, b.data
    ok = (
        ad.ndim == bd.ndim
        and ad.ndim in (2, 3)
        and ad.shape[-1] == bd.shape[-2]
        and (ad.ndim == 2 or ad.shape[0] == bd.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")
    out = Tensor(ad @ bd, a.requires_grad or b.requires_grad)
    _record(
        out,
        [
            (a, lambda g: g @ bd.swapaxes(-1, -2)),
            (b, lambda g: ad.swapaxes(-1, -2) @ g),
        ],
    )
    return out


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes), a.requires_grad)
    inv = None if axes is None else tuple(np.argsort(axes))
    _record(out, [(a, lambda g: np.transpose(g, inv))])
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    _record(out, [(a, lambda g: g.reshape(old))])
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        any(p.requires_grad for p in parts),
    )
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for i, p in enumerate(parts):
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def make(lo=lo, hi=hi):
            def fn(g: Array) -> Array:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return g[tuple(sl)]

            return fn

        pairs.append((p, make()))
    _record(out, pairs)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)], a.requires_grad)
    shape = a.data.shape

    def fn(g: Array) -> Array:
        full = np.zeros(shape)
        full[tuple(sl)] = g
        return full

    _record(out, [(a, fn)])
    return out


def take_rows(a: Tensor, idx: Array) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate in the adjoint."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], a.requires_grad)
    shape = a.data.shape

    def fn(g: Array) -> Array:
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    _record(out, [(a, fn)])
    return out


# ---------------------------------------------------------------------------
# reductions


def _restore(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)
    shape = a.data.shape
    _record(out, [(a, lambda g: _restore(g, shape, axis, keepdims))])
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), a.requires_grad)
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    _record(out, [(a, lambda g: _restore(g, shape, axis, keepdims) / n)])
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y, a.requires_grad)
    _record(out, [(a, lambda g: g * y * (1.0 - y))])
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, a.requires_grad)
    _record(out, [(a, lambda g: g * y)])
    return out


def log(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.log(x), a.requires_grad)
    _record(out, [(a, lambda g: g / x)])
    return out


def relu(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.maximum(x, 0.0), a.requires_grad)
    _record(out, [(a, lambda g: g * (x > 0))])
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    out = Tensor(np.where(x >= 0, x, slope * x), a.requires_grad)
    _record(out, [(a, lambda g: g * np.where(x >= 0, 1.0, slope))])
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis``; outputs sum to 1 along that axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def fn(g: Array) -> Array:
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    _record(out, [(a, fn)])
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep, a.requires_grad)
    _record(out, [(a, lambda g: g * keep)])
    return out


# ---------------------------------------------------------------------------
# losses and normalization primitives

BCE_EPS = 1e-7


def bce(pred: Tensor, target, weight=None) -> Tensor:
    """Mean binary cross-entropy of probabilities against targets in [0, 1].

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]; gradients flow to
    ``pred`` only (targets and weights are treated as constants).
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"bce: pred shape {pred.shape} vs target shape {t.shape}")
    if weight is None:
        w = None
    else:
        w = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=np.float64)
        if w.shape != pred.shape and w.size != 1:
            raise ShapeError(f"bce: weight shape {w.shape} vs pred shape {pred.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    ce = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if w is not None:
        ce = ce * w
    n = pred.size
    out = Tensor(ce.sum() / n, pred.requires_grad)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def fn(g: Array) -> Array:
        d = (p - t) / (p * (1.0 - p)) / n
        if w is not None:
            d = d * w
        return g * d * inside

    _record(out, [(pred, fn)])
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(
        xhat * gamma.data + beta.data,
        x.requires_grad or gamma.requires_grad or beta.requires_grad,
    )
    gd = gamma.data

    def dx(g: Array) -> Array:
        gh = g * gd
        return inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def dgamma(g: Array) -> Array:
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def dbeta(g: Array) -> Array:
        return g.reshape(-1, d).sum(axis=0)

    _record(out, [(x, dx), (gamma, dgamma), (beta, dbeta)])
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize 2-D input per column over axis 0 (batch/time).

    In training mode uses (and updates) batch statistics; in eval mode uses
    the provided running statistics. Running arrays are mutated in place.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects a 2-D input, got {x.shape}")
    k = x.shape[1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} for width {k}")
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, x.requires_grad or gamma.requires_grad or beta.requires_grad)
    gd = gamma.data

    if training:

        def dx(g: Array) -> Array:
            gh = g * gd
            return inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))

    else:

        def dx(g: Array) -> Array:
            return g * gd * inv

    _record(
        out,
        [
            (x, dx),
            (gamma, lambda g: (g * xhat).sum(axis=0)),
            (beta, lambda g: g.sum(axis=0)),
        ],
    )
    return out


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-column temporal convolution with zero padding (same length).

    ``x`` is (T, K); ``weight`` is (kernel, K), one kernel per column;
    ``bias`` is (K,). Columns never mix.
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d_same: input {x.shape} vs weight {weight.shape}")
    ksize = weight.shape[0]
    pad = ksize // 2
    t = x.shape[0]
    xp = np.zeros((t + 2 * pad, x.shape[1]))
    xp[pad : pad + t] = x.data
    y = np.zeros_like(x.data)
    for j in range(ksize):
        y += weight.data[j] * xp[j : j + t]
    out = Tensor(y + bias.data, x.requires_grad or weight.requires_grad or bias.requires_grad)
    wd = weight.data

    def dx(g: Array) -> Array:
        gp = np.zeros((t + 2 * pad, g.shape[1]))
        gp[pad : pad + t] = g
        r = np.zeros_like(g)
        for j in range(ksize):
            # tap j reads x[t + j - pad], so its adjoint shifts g the other way
            r += wd[j] * gp[2 * pad - j : 2 * pad - j + t]
        return r

    def dw(g: Array) -> Array:
        r = np.zeros_like(wd)
        for j in range(ksize):
            r[j] = (xp[j : j + t] * g).sum(axis=0)
        return r

    _record(out, [(x, dx), (weight, dw), (bias, lambda g: g.sum(axis=0))])
    return out
