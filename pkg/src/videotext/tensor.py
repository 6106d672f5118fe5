"""Dense array engine with reverse-mode automatic differentiation.

Every value is a contiguous row-major ndarray wrapped in a ``Tensor`` that
records the operations producing it. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and accumulates gradients by
summation in recording order, so results are deterministic.

Storage defaults to float32; ``double_precision()`` switches new tensors to
float64 for finite-difference oracle runs.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


_DEFAULT_DTYPE = np.float32


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextmanager
def double_precision():
    """Run the enclosed block with float64 tensor storage (oracle mode)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_DEFAULT_DTYPE))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"zero-extent dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        # copy on first arrival: g may be a view shared with another operand
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Visits each recorded node exactly once; leaf tensors with
        ``requires_grad`` end up with ``.grad`` of their own shape.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(data)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    out.data = arr
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul broadcast mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_sum_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            a._accumulate(g * (cdf + x * pdf))

    return _make(data.astype(x.dtype), (a,), backward)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} invalid for rank-{ndim} tensor")
    return axis % ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    a = _as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - inner))

    return _make(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _make(data, (a,), backward)


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concatenate needs at least one tensor")
    axis = _check_axis(axis, parts[0].ndim)
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                part._accumulate(g[tuple(index)])

    return _make(data, tuple(parts), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is not None:
        axis = _check_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g.reshape(()), a.shape).copy())
        elif keepdims:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[_check_axis(axis, a.ndim)]
    return mul(sum_(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / count))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sum_to(g, a.shape))

    return _make(data, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape -> ids.shape + (width,)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(acc)

    return _make(data, (table,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick one row per batch element: (B, S, d) with index (B,) -> (B, d)."""
    a = _as_tensor(a)
    index = np.asarray(index)
    if a.ndim != 3 or index.shape != (a.shape[0],):
        raise ShapeError(f"gather_rows expects (B, S, d) and (B,), got {a.shape} and {index.shape}")
    batch = np.arange(a.shape[0])
    data = a.data[batch, index]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[batch, index] = g
            a._accumulate(acc)

    return _make(data, (a,), backward)


def take_along_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Index the trailing axis: a[..., index[...]] with index shaped like a[...,-1] dropped."""
    a = _as_tensor(a)
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"index shape {index.shape} must equal {a.shape[:-1]}")
    expanded = index[..., None]
    data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.put_along_axis(acc, expanded, g[..., None], axis=-1)
            a._accumulate(acc)

    return _make(data, (a,), backward)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis, then apply learnable scale and shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    normalized = centered * power(var + eps, -0.5)
    return normalized * scale + shift


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = power(sum_(x * x, axis=-1, keepdims=True) + eps, 0.5)
    return x / norm


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over the trailing axis."""
    return -mean(take_along_last(log_softmax(logits, axis=-1), targets))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: "ParameterStoreLike",
    eps: float = 1e-3,
    max_coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Returns the max over sampled coordinates of
    |analytic - central| / max(|analytic|, |central|, 1e-8).

    The central difference is Richardson-extrapolated from steps ``eps`` and
    ``eps/2``, cancelling the leading eps^2 truncation term so that small
    gradients can still be resolved at tight relative tolerances.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)

    params.zero_grads()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("finite_diff_check: f produced a non-finite value")
    loss.backward()
    analytic = {name: params[name].grad for name in params.names()}

    worst = 0.0
    for name in params.names():
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords_per_param, n), replace=False)
        for coord in coords:
            original = flat[coord]

            def central_at(h: float) -> float:
                flat[coord] = original + h
                up = f().item()
                flat[coord] = original - h
                down = f().item()
                flat[coord] = original
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise ValueError(
                        "finite_diff_check: f produced a non-finite value"
                    )
                return (up - down) / (2.0 * h)

            central = (4.0 * central_at(eps / 2.0) - central_at(eps)) / 3.0
            grad = analytic[name]
            analytic_value = 0.0 if grad is None else float(grad.reshape(-1)[coord])
            err = abs(analytic_value - central) / max(abs(analytic_value), abs(central), 1e-8)
            worst = max(worst, err)
    return worst


class ParameterStoreLike:
    """Protocol stub for finite_diff_check (the real store lives in params.py)."""

    def names(self):  # pragma: no cover
        raise NotImplementedError

    def __getitem__(self, name):  # pragma: no cover
        raise NotImplementedError

    def zero_grads(self):  # pragma: no cover
        raise NotImplementedError
