"""Small reverse-mode autodiff engine on top of numpy float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  ``Tensor.backward`` replays
those closures in reverse creation order, which is the tape for that graph.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

LAYER_NORM_EPS = 1e-5
L2_EPS = 1e-12

_counter = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when an operation receives non-finite input."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._order = next(_counter)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def backward(self, grad=None) -> None:
        """Propagate gradients from this tensor to every contributing leaf.

        ``grad`` defaults to one for scalars; non-scalar outputs need an explicit
        seed of matching shape.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise DimensionError(f"seed shape {grad.shape} does not match output shape {self.shape}")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(node._parents)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in sorted(nodes.values(), key=lambda t: t._order, reverse=True):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_lift(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_lift(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor._make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return Tensor._make(out, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: ((a, -g * out * out),))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return Tensor._make(out, (a,), lambda g: ((a, g * exponent * a.data ** (exponent - 1)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: ((a, g / a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return Tensor._make(x * cdf, (a,), lambda g: ((a, g * (cdf + x * pdf)),))


# -- reductions and shape ops -----------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape).copy()
    return Tensor._make(out, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = None if axes is None else np.argsort(axes)
    return Tensor._make(out, (a,), lambda g: ((a, np.transpose(g, inverse)),))


def _is_row_index(index) -> bool:
    return isinstance(index, np.ndarray) and index.dtype.kind in "iu" and index.size > 0


def _scatter_rows(shape: tuple[int, ...], index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into a zero array of ``shape`` at ``index`` (leading axis)."""
    flat_idx = index.reshape(-1)
    rows = values.reshape(flat_idx.size, -1)
    n = flat_idx.size
    scatter = sparse.csr_matrix((np.ones(n), (flat_idx, np.arange(n))), shape=(shape[0], n))
    return np.asarray(scatter @ rows).reshape(shape)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; always copies."""
    out = np.array(a.data[index], dtype=np.float64, copy=True)

    def backward(g):
        if _is_row_index(index):
            return ((a, _scatter_rows(a.shape, index, g)),)
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return ((a, full),)

    return Tensor._make(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append((t, g[tuple(sl)].copy()))
        return parts

    return Tensor._make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def index_add(base_shape: tuple[int, ...], index: np.ndarray, src: Tensor) -> Tensor:
    """Zeros of ``base_shape`` with ``src`` rows scatter-added at ``index``."""
    index = np.asarray(index)
    out = _scatter_rows(base_shape, index, src.data)
    return Tensor._make(out, (src,), lambda g: ((src, g[index].copy()),))


def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy broadcasting rules."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # weight shared across leading axes: one flat product instead of a batched one plus a sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return Tensor._make(out, (a, b), backward)


# -- normalizations ---------------------------------------------------------------


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op} received non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((a, out * (g - (g * out).sum(axis=axis, keepdims=True))),)

    return Tensor._make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log-sum-exp stabilised log softmax; ``-inf`` entries are allowed."""
    m = a.data.max(axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("log_softmax needs at least one finite entry per slice")
    shifted = a.data - m
    e = np.exp(shifted)
    # the max entry contributes exactly 1; log1p of the rest keeps tiny tails
    top = np.expand_dims(np.argmax(shifted, axis=axis), axis)
    np.put_along_axis(e, top, 0.0, axis=axis)
    lse = np.log1p(e.sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return ((a, g - probs * g.sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward)


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis; a constant row maps to zeros."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = g if weight is None else g * weight.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [(a, dx)]
        if weight is not None:
            grads.append((weight, (g * xhat).reshape(-1, n).sum(axis=0)))
        if bias is not None:
            grads.append((bias, g.reshape(-1, n).sum(axis=0)))
        return grads

    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    parents = [t for t in (a, weight, bias) if t is not None]
    return Tensor._make(out, parents, backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Divide by ``max(||x||, eps)`` along ``axis``."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom
    clipped = norm < eps

    def backward(g):
        dx = g / denom - out * (g * out).sum(axis=axis, keepdims=True) / denom
        dx = np.where(clipped, g / denom, dx)
        return ((a, dx),)

    return Tensor._make(out, (a,), backward)


def rotate_pairs(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs (2i, 2i+1) of the last axis by the given angles.

    ``cos``/``sin`` broadcast against ``a`` with last axis ``head_dim // 2``.
    """
    x = a.data
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        return ((a, dx),)

    return Tensor._make(out, (a,), backward)


# -- verification -----------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def ok(self, tolerance: float) -> bool:
        return self.worst <= tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Tensor-wise relative error: max |a - n| / max(max |a|, max |n|, floor)."""
    if not analytic.size:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-8,
    entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    Errors are reported per parameter tensor, never raised.  A tensor whose
    gradients are all below ``floor`` is compared on an absolute scale.  With
    ``entries`` set, only that many randomly chosen coordinates per tensor are
    perturbed and the error is measured on those coordinates alone.
    """
    rng = np.random.default_rng(seed)
    if not isinstance(params, Mapping):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    out = f()
    out.backward()
    report = GradCheckReport()
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        picks = np.arange(flat.size)
        if entries is not None and entries < flat.size:
            picks = np.sort(rng.choice(flat.size, entries, replace=False))
        numeric = np.zeros(picks.size)
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            numeric[j] = (hi - lo) / (2.0 * step)
        report.max_rel_error[name] = relative_error(analytic[picks], numeric, floor)
    for p in params.values():
        p.zero_grad()
    return report
