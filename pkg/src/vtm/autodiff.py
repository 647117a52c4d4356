"""Reverse-mode automatic differentiation on numpy arrays.

Tensors are immutable values holding float32 (training state) or float64
(used by the finite-difference oracles). Every operation records a vector-
Jacobian product; `Tensor.backward()` walks the graph in reverse
topological order. The set of operations is exactly what the encoder /
matching / decoder stack needs; there is no general broadcasting algebra
beyond what those layers use.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from . import kernels
from .errors import NumericError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    if arr.dtype == dtype and (arr.ndim == 0 or arr.flags.c_contiguous):
        return arr
    # note: ascontiguousarray would promote 0-d to 1-d
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """A node in the autodiff graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of a scalar (or explicitly seeded) output."""
        if grad is None:
            if self.data.shape != ():
                raise ShapeError("backward() without a seed grad needs a scalar output")
            grad = np.ones((), dtype=self.data.dtype)
        order = _toposort(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in order:
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order; only subgraphs that require grad are visited
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _join(a, b) -> tuple[Tensor, Tensor]:
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.dtype != tb.dtype:
        # plain python / default-float constants follow the other operand
        if ta._parents == () and not ta.requires_grad and ta.size == 1:
            ta = Tensor(ta.data, dtype=tb.dtype)
        elif tb._parents == () and not tb.requires_grad and tb.size == 1:
            tb = Tensor(tb.data, dtype=ta.dtype)
        else:
            raise ShapeError(f"mixed dtypes {ta.dtype} vs {tb.dtype}")
    return ta, tb


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _join(a, b)
    y = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(y, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _join(a, b)
    y = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(y, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _join(a, b)
    y = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(y, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _join(a, b)
    y = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(y, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy-style broadcasting of leading axes."""
    a, b = _join(a, b)
    y = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(y, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g / (2.0 * y),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    y = x * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(y.astype(x.dtype, copy=False), (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stabilized logistic
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    y = y.astype(a.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only through the interior."""
    a = as_tensor(a)
    y = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(y, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    y = np.ascontiguousarray(a.data.reshape(shape))
    return _make(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(a.data.transpose(axes))
    return _make(y, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(p.copy() for p in np.split(g, splits, axis=axis))

    return _make(y, tuple(ts), vjp)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(p.copy() for p in np.moveaxis(g, axis, 0))

    return _make(y, tuple(ts), vjp)


def take0(a, i: int) -> Tensor:
    """Select index i along the leading axis."""
    a = as_tensor(a)
    y = np.ascontiguousarray(a.data[i])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return _make(y, (a,), vjp)


def slice2d(a, h: int, w: int) -> Tensor:
    """Top-left (h, w) corner of a (G, G, d) grid tensor."""
    a = as_tensor(a)
    y = np.ascontiguousarray(a.data[:h, :w])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:h, :w] = g
        return (full,)

    return _make(y, (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False) * np.ones((), a.dtype),)

    return _make(np.asarray(y, dtype=a.dtype), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False).copy(),)

    return _make(np.asarray(y, dtype=a.dtype), (a,), vjp)


# ---------------------------------------------------------------------------
# neural-net ops


def softmax_rows(logits) -> Tensor:
    """Row-stochastic softmax of a 2-D tensor, stabilized by row-max.

    Raises NumericError naming the first offending row if the input is
    not finite. Row sums of the output are 1 within 1e-6.
    """
    t = as_tensor(logits)
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D logits, got shape {t.shape}")
    bad = ~np.isfinite(t.data).all(axis=1)
    if bad.any():
        raise NumericError(f"softmax_rows: non-finite logits in row {int(np.argmax(bad))}")
    return softmax_last(t)


def softmax_last(a) -> Tensor:
    """Softmax over the last axis; the normalizer is accumulated in float64."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(a.dtype)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), vjp)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters.

    gamma/beta broadcast against x's trailing dimension; beta may carry
    leading axes (stacked per-task shift vectors).
    """
    x, gamma = _join(x, gamma)
    _, beta = _join(x, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def vjp(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return _make(y.astype(x.dtype, copy=False), (x, gamma, beta), vjp)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; draws one mask from the supplied generator."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / np.asarray(1.0 - rate, a.dtype)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, NCHW layout; routed through the kernels backend."""
    x, w = _join(x, w)
    y = kernels.conv2d_forward(x.data, w.data, stride, pad)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, w.data, x.shape, stride, pad)
        gw = kernels.conv2d_backward_weight(x.data, g, w.shape, stride, pad)
        return gx, gw

    out = _make(y, (x, w), vjp)
    if b is not None:
        out = add(out, reshape(as_tensor(b), (1, -1, 1, 1)))
    return out


def linear(x, w, b=None) -> Tensor:
    """Affine map on the trailing axis: x @ w (+ b)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# parameter containers


class ParamSet:
    """Named parameter tensors with shared/task-specific and LR-group flags.

    Names are unique dotted paths. Task-specific entries are exactly the
    per-task encoder bias vectors (kept under ``bias/<task_key>/...``).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._task_specific: dict[str, bool] = {}
        self._pretrained: dict[str, bool] = {}

    def add(self, name: str, value, task_specific: bool = False,
            pretrained: bool = False) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        self._task_specific[name] = task_specific
        self._pretrained[name] = pretrained
        return t

    def remove(self, name: str) -> None:
        del self._params[name]
        del self._task_specific[name]
        del self._pretrained[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def is_task_specific(self, name: str) -> bool:
        return self._task_specific[name]

    def is_pretrained(self, name: str) -> bool:
        return self._pretrained[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def clone(self, dtype=None) -> "ParamSet":
        out = ParamSet()
        for name in self.names():
            src = self._params[name]
            out.add(name, src.data.astype(dtype or src.dtype),
                    task_specific=self._task_specific[name],
                    pretrained=self._pretrained[name])
        return out

    def checksum(self, names: Iterable[str] | None = None) -> str:
        """Hex digest of the exact bytes of the selected parameters."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(names) if names is not None else self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return h.hexdigest()


def ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {name}")
