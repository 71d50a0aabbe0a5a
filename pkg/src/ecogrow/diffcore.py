"""Dense float64 tensors with reverse-mode gradient accumulation.

Every op records its parents and a backward closure on the output tensor.
``Tensor.backward`` replays the closures in exact reverse creation order, so a
tensor's gradient is complete (summed over all downstream paths) before it is
propagated to its own parents.

Broadcasting is limited to adding a row vector to every row of a matrix; all
other binary ops require identical shapes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        # collect every ancestor that participates in differentiation
        seen: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for t in sorted(seen.values(), key=lambda x: x._id, reverse=True):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _send(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t._accumulate(g)


# ---------------------------------------------------------------------------
# linear algebra and elementwise arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        _send(a, g @ b.data.T)
        _send(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        def backward(g):
            _send(a, g)
            _send(b, g)

        return _make(a.data + b.data, (a, b), backward)

    bias_row = b.data.ndim in (1, 2) and a.data.ndim == 2 and b.data.size == a.shape[1] and (
        b.data.ndim == 1 or b.shape[0] == 1
    )
    if not bias_row:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        _send(a, g)
        _send(b, g.sum(axis=0).reshape(b.shape))

    return _make(a.data + b.data.reshape(1, -1), (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _send(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: _send(a, g * c))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")

    def backward(g):
        _send(a, g * b.data)
        _send(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Scale every entry of ``a`` by the single value held in ``s``."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar: scale must hold one value, got shape {s.shape}")
    c = float(s.data.reshape(-1)[0])

    def backward(g):
        _send(a, g * c)
        _send(s, np.full(s.shape, float((g * a.data).sum())))

    return _make(a.data * c, (a, s), backward)


def straight_through(value: Tensor, target: Tensor, grad_fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Identity on ``value``; in backward, ``target`` also receives ``grad_fn(upstream)``.

    Used where the forward pass is piecewise constant in ``target`` but a
    surrogate derivative is wanted.
    """

    def backward(g):
        _send(value, g)
        if target.requires_grad:
            _send(target, np.asarray(grad_fn(g), dtype=np.float64).reshape(target.shape))

    return _make(value.data.copy(), (value, target), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose needs a matrix")
    return _make(a.data.T.copy(), (a,), lambda g: _send(a, g.T))


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _send(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _make(out, tensors, backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _send(a, full)

    return _make(a.data[:, start:stop].copy(), (a,), backward)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _send(a, full)

    return _make(a.data[idx], (a,), backward)


def select_max(data: np.ndarray, index_sets: np.ndarray):
    """Numpy core of :func:`max_rows`: returns (values, source rows, has-any mask)."""
    sets = np.asarray(index_sets, dtype=np.intp)
    if sets.ndim != 2:
        raise ShapeError("max_rows: index_sets must be a padded 2-d int array")
    n_out, width = sets.shape
    if width == 0:
        return np.zeros((n_out, data.shape[1])), np.full((n_out, data.shape[1]), -1), np.zeros(n_out, bool)
    # sort each set ascending so argmax's first-occurrence rule means lowest row index
    big = np.iinfo(np.intp).max
    padded = np.sort(np.where(sets < 0, big, sets), axis=1)
    valid = padded != big
    safe = np.where(valid, padded, 0)
    vals = np.where(valid[:, :, None], data[safe], -np.inf)  # (n_out, width, n_feat)
    pos = vals.argmax(axis=1)
    src = np.take_along_axis(safe, pos, axis=1)
    has_any = valid.any(axis=1)
    out = np.take_along_axis(vals, pos[:, None, :], axis=1)[:, 0, :]
    out = np.where(has_any[:, None], out, 0.0)
    src = np.where(has_any[:, None], src, -1)
    return out, src, has_any


def max_rows(a: Tensor, index_sets: np.ndarray) -> Tensor:
    """Row ``i`` of the output is the elementwise max of ``a[index_sets[i]]``.

    ``index_sets`` is an int matrix padded with -1. A row with no valid index
    yields zeros. Ties go to the lowest row index of ``a``, in both the forward
    choice and the gradient routing.
    """
    out, src, has_any = select_max(a.data, index_sets)
    rows, cols = np.nonzero(src >= 0)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (src[rows, cols], cols), g[rows, cols])
        _send(a, full)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: _send(a, g * mask))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: _send(a, g * factor))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: _send(a, g * s * (1.0 - s)))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: _send(a, g * (1.0 - t * t)))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis; masked-out entries get probability 0.

    Every row must keep at least one unmasked entry.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError("softmax: mask shape mismatch")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _send(a, p * (g - dot))

    return _make(p, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.array(a.data.sum()), (a,), lambda g: _send(a, np.full(a.shape, float(g))))

    def backward(g):
        _send(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(a.data.sum(axis=axis), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,), lambda g: _send(a, np.full(a.shape, float(g) / n)))


def bce(pred: Tensor, label) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(label, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"bce: label shape {y.shape} != prediction shape {pred.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce: labels must be 0 or 1")
    if y.size == 0:
        raise ValueError("bce: empty input")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def backward(g):
        d = (-(y / p) + (1.0 - y) / (1.0 - p)) / y.size
        _send(pred, float(g) * d * inside)

    return _make(np.array(loss), (pred,), backward)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    compared: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_error.values())

    def lines(self) -> list[str]:
        return [
            f"{name}: max rel err {err:.3e} over {self.compared[name]} entries"
            f" ({self.excluded[name]} kink-excluded)"
            for name, err in self.max_rel_error.items()
        ]


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    kink_ratio: float = 1e-2,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. An entry
    whose one-sided slopes disagree by more than ``kink_ratio`` of their scale
    sits on a kink (relu at 0, a max tie) and is excluded.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    out = f()
    base = float(out.data)
    if not np.isfinite(base):
        raise FloatingPointError("grad_check: loss is not finite")
    out.backward()
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        worst, n_cmp, n_skip = 0.0, 0, 0
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(f().data)
            flat[k] = orig - h
            down = float(f().data)
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {name}[{k}]")
            d_plus, d_minus = (up - base) / h, (base - down) / h
            if abs(d_plus - d_minus) > kink_ratio * max(abs(d_plus), abs(d_minus), 1e-3):
                n_skip += 1
                continue
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            n_cmp += 1
        report.max_rel_error[name] = worst
        report.compared[name] = n_cmp
        report.excluded[name] = n_skip
    return report
