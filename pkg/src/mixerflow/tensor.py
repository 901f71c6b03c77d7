"""Dense tensors with reverse-mode differentiation on top of numpy.

Every operation returns a new :class:`Tensor`. When grad recording is on and
any input requires a gradient, the result remembers its parents and a closure
that pushes the upstream gradient back to them. :func:`backward` walks the
recorded graph once and then releases it.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, DomainError, GraphError, NumericError

_DTYPES = {"single": np.float32, "double": np.float64}
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def dtype_of(precision: str):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ContractError(f"unknown precision {precision!r}") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, {self.precision}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """A learnable tensor. ``name`` is filled in by the owning module."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, {self.precision})"


# -- graph construction -----------------------------------------------------

def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_precision(*ts: Tensor) -> None:
    dts = {t.dtype for t in ts if t.data.ndim > 0 or t.requires_grad}
    if len(dts) > 1:
        raise ContractError(f"mixed precision in one computation: {sorted(map(str, dts))}")


def _all_finite(data: np.ndarray) -> bool:
    # one reduction is cheaper than isfinite+all; fall back only on a hit
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(data.sum()):
            return True
    return bool(np.isfinite(data).all())


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str,
            check: bool = True) -> Tensor:
    # pure data movement of finite inputs cannot create NaN/Inf: check=False
    if check and not _all_finite(data):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # gradients are never mutated in place, so aliasing g is safe
        t.grad = np.asarray(g, dtype=t.dtype)
    else:
        t.grad = (t.grad + g).astype(t.dtype, copy=False)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    _check_precision(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"operand shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    return _result(a.data / b.data, (a, b), back, "div")


def negate(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), back, "negate")


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        _accumulate(a, g * c)

    return _result(a.data * a.dtype.type(c), (a,), back, "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out)

    return _result(out, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive element")

    def back(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), back, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1 - out * out))

    return _result(out, (a,), back, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)

    def back(g):
        _accumulate(a, g * out * (1 - out))

    return _result(out, (a,), back, "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    out = -np.logaddexp(0, -a.data).astype(a.dtype)

    def back(g):
        _accumulate(a, g * special.expit(-a.data))

    return _result(out, (a,), back, "log_sigmoid")


def square(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, 2 * g * a.data)

    return _result(a.data * a.data, (a,), back, "square")


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor, approximate: bool = False) -> Tensor:
    """x * Phi(x); ``approximate`` selects the tanh form."""
    x = a.data
    if approximate:
        inner = _SQRT_2_OVER_PI * x * (1 + 0.044715 * x * x)
        th = np.tanh(inner)
        out = 0.5 * x * (1 + th)

        def back(g):
            x2 = x * x
            dinner = x2 * (3 * 0.044715 * _SQRT_2_OVER_PI)
            dinner += _SQRT_2_OVER_PI
            sech2 = 1 - th * th
            sech2 *= x
            sech2 *= dinner
            sech2 += 1 + th
            sech2 *= 0.5
            sech2 *= g
            _accumulate(a, sech2)
    else:
        cdf = special.ndtr(x)
        out = x * cdf

        def back(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            _accumulate(a, g * (cdf + x * pdf))

    return _result(out.astype(x.dtype, copy=False), (a,), back, "gelu")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name; mirrors the individual functions."""
    table = {
        "add": add, "sub": sub, "mul": mul, "exp": exp, "log": log, "tanh": tanh,
        "gelu": gelu, "negate": negate, "scale": scale, "sigmoid": sigmoid,
        "log_sigmoid": log_sigmoid, "square": square, "div": div,
    }
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*args, **kwargs)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or plain 2-D products."""
    a, b = as_tensor(a), as_tensor(b)
    _check_precision(a, b)
    if a.ndim < 1 or b.ndim != 2:
        raise DimensionError(f"matmul expects [..., k] x [k, n], got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            k, n = b.shape
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _result(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``x @ weight + bias`` for ``x[..., k]``, ``weight[k, n]``, ``bias[n]``."""
    _check_precision(x, weight, bias)
    k, n = weight.shape
    if x.shape[-1] != k or bias.shape != (n,):
        raise DimensionError(f"linear: {x.shape} x {weight.shape} + {bias.shape}")
    out = x.data @ weight.data
    out += bias.data

    def back(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        g2 = g.reshape(-1, n)
        if weight.requires_grad:
            _accumulate(weight, x.data.reshape(-1, k).T @ g2)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _result(out, (x, weight, bias), back, "linear")


# -- reductions -----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_back(g: np.ndarray, axes: tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)
    out = t.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        _accumulate(t, _expand_back(g, axes, keepdims, t.shape))

    return _result(np.asarray(out), (t,), back, "sum")


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)
    count = int(np.prod([t.shape[a] for a in axes])) if axes else 1
    out = t.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        _accumulate(t, _expand_back(g, axes, keepdims, t.shape) / count)

    return _result(np.asarray(out), (t,), back, "mean")


def reduce_max(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)
    out = t.data.max(axis=axes, keepdims=True)

    def back(g):
        hit = (t.data == out).astype(t.dtype)
        hit /= hit.sum(axis=axes, keepdims=True)
        _accumulate(t, hit * _expand_back(g, axes, keepdims, t.shape))

    res = out if keepdims else np.squeeze(out, axis=axes)
    return _result(np.asarray(res), (t,), back, "max")


def reduce(op: str, t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    fn = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}.get(op)
    if fn is None:
        raise ContractError(f"unknown reduction {op!r}")
    return fn(t, axes, keepdims)


def logsumexp(t: Tensor, axis: int = -1) -> Tensor:
    m = t.data.max(axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def back(g):
        _accumulate(t, np.expand_dims(g, axis) * e / s)

    return _result(out, (t,), back, "logsumexp")


# -- shape manipulation -------------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {t.shape} to {tuple(shape)}") from None

    def back(g):
        _accumulate(t, g.reshape(t.shape))

    return _result(out, (t,), back, "reshape", check=False)


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(t.data, a, b)

    def back(g):
        _accumulate(t, np.swapaxes(g, a, b))

    return _result(out, (t,), back, "swapaxes", check=False)


def transpose(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(t.data, axes)

    def back(g):
        _accumulate(t, np.transpose(g, inv))

    return _result(out, (t,), back, "transpose", check=False)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(t: Tensor, index) -> Tensor:
    out = t.data[index]
    basic = _is_basic(index)

    def back(g):
        full = np.zeros_like(t.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        _accumulate(t, full)

    return _result(np.array(out), (t,), back, "getitem", check=False)


def take(t: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis. ``indices`` must be a permutation or subset without repeats."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(t.data, indices, axis=axis)

    def back(g):
        full = np.zeros_like(t.data)
        sl = [slice(None)] * t.ndim
        sl[axis] = indices
        full[tuple(sl)] = g
        _accumulate(t, full)

    return _result(out, (t,), back, "take", check=False)


def concatenate(ts: Sequence[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    _check_precision(*ts)
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def back(g):
        offsets = np.cumsum([0] + sizes)
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(out, ts, back, "concatenate", check=False)


# -- fused layers ---------------------------------------------------------------------

def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-feature normalisation over all leading axes of ``x[..., f]``.

    In training mode the running statistics are updated in place.
    """
    f = x.shape[-1]
    flat = x.data.reshape(-1, f)
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        n = flat.shape[0]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv_std
    out = (xhat * weight.data + bias.data).reshape(x.shape).astype(x.dtype, copy=False)

    def back(g):
        g2 = g.reshape(-1, f)
        if weight.requires_grad:
            _accumulate(weight, (g2 * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gx = g2 * weight.data
            if training:
                gx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv_std
            _accumulate(x, gx.reshape(x.shape).astype(x.dtype, copy=False))

    return _result(out, (x, weight, bias), back, "batch_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at integer ``labels``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must be {n} integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = np.asarray((lse - z[np.arange(n), labels]).mean())

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1
        _accumulate(logits, g * p / n)

    return _result(out, (logits,), back, "cross_entropy")


# -- differentiation --------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Parameter] | None = None) -> None:
    """Populate ``.grad`` of every parameter reachable from the scalar ``loss``.

    When ``parameters`` is given their gradients are reset first, so that any
    parameter not reachable from ``loss`` ends with an all-zero gradient.
    The graph is released afterwards; a second call raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        raise GraphError("loss was not produced under gradient recording")
    if parameters is not None:
        for p in parameters:
            p.zero_grad()
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward
        if fn is not None:
            if node.grad is not None:
                fn(node.grad)
            node.grad = None
        node._parents = ()
        node._backward = None
    loss._consumed = True


def zeros(shape, precision: str = "double") -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype_of(precision)))
