"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends an entry to a global tape; calling
``backward`` on a scalar walks the tape in reverse execution order (a valid
reverse topological order) and accumulates gradients additively across
fan-out.  Data lives in contiguous numpy arrays; the backward rules are
written by hand and are cross-checked against ``finite_diff_gradient``.

Two precision modes exist (``float64`` for gradient checking, ``float32``
for training throughput).  The mode is a process-global setting and must
not be switched in the middle of building one graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NumericsError",
    "set_precision",
    "get_precision",
    "precision",
    "default_dtype",
    "no_grad",
    "clear_tape",
    "tape_size",
    "backward",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "div",
    "absolute",
    "power",
    "relu",
    "gelu",
    "exp",
    "log",
    "stop_gradient",
    "sum_",
    "mean",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "softmax_rows",
    "conv2d",
    "finite_diff_gradient",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_PRECISION_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision_mode = "float64"


class NumericsError(RuntimeError):
    """Non-finite value produced, or an operation used outside its domain."""


def set_precision(mode: str) -> None:
    """Select the global dtype for newly created tensors."""
    global _precision_mode
    if mode not in _PRECISION_DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    _precision_mode = mode


def get_precision() -> str:
    return _precision_mode


def default_dtype() -> np.dtype:
    return np.dtype(_PRECISION_DTYPES[_precision_mode])


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode."""
    prev = _precision_mode
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class _TapeEntry:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: "Tensor", inputs: tuple, grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_tape: list[_TapeEntry] = []
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / finite-difference evaluations)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def clear_tape() -> None:
    """Drop all recorded operations. Call between training steps."""
    _tape.clear()


def tape_size() -> int:
    return len(_tape)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite value produced by {op!r}")


class Tensor:
    """A dense n-d array, optionally tracked for gradient computation.

    ``grad`` is allocated (zeros) for tensors constructed with
    ``requires_grad=True``; tensors produced by operations receive their
    gradient lazily during ``backward``.  Tensors are treated as immutable
    once written, apart from gradient accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype or default_dtype()))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err()

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def _scalar_err():
    raise ValueError("item() requires a single-element tensor")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _make(out_data: np.ndarray, inputs: tuple, grad_fn: Callable, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _tape.append(_TapeEntry(out, inputs, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after trailing-dimension broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# --------------------------------------------------------------------------
# Elementwise operations
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "mul")

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    _broadcast_check(a, b, "div")

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), grad_fn, "div")


def absolute(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), grad_fn, "abs")


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a scalar exponent.

    Negative bases are rejected for non-integer exponents; 0**0 follows the
    numpy convention and equals 1.
    """
    a = _as_tensor(a)
    p = float(p)
    if p != round(p) and np.any(a.data < 0):
        raise NumericsError("pow: negative base with non-integer exponent")

    def grad_fn(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), grad_fn, "pow")


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0.0), (a,), grad_fn, "relu")


def gelu(a) -> Tensor:
    """Exact GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), grad_fn, "gelu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def grad_fn(g):
        return (g * out_data,)

    return _make(out_data, (a,), grad_fn, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericsError("log of a non-positive value")

    def grad_fn(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), grad_fn, "log")


def stop_gradient(a) -> Tensor:
    """Forward the values bit-exactly while cutting the gradient path."""
    a = _as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    return out


# --------------------------------------------------------------------------
# Reductions and shape operations
# --------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / count, a.shape).copy(),)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn, "mean")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree ({a.shape} x {b.shape})")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")

    def grad_fn(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(a.data.T), (a,), grad_fn, "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape).copy(), (a,), grad_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]

    def grad_fn(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), grad_fn, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError("narrow: slice out of range")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), grad_fn, "narrow")


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilized by row-max subtraction."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("softmax_rows expects a 2-d tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), grad_fn, "softmax_rows")


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, hp: int, wp: int) -> np.ndarray:
    c_in = xp.shape[0]
    cols = np.empty((c_in, k, k, hp, wp), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, ki:ki + stride * hp:stride, kj:kj + stride * wp:stride]
    return cols.reshape(c_in * k * k, hp * wp)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution with cross-correlation semantics (no kernel flip).

    x: [c_in, h, w]; w: [c_out, c_in, k, k] with k odd; zero padding.
    """
    x, w = _as_tensor(x), _as_tensor(w, x.dtype)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError("conv2d expects x [c_in,h,w] and w [c_out,c_in,k,k]")
    c_in, h, wd = x.shape
    c_out, c_in2, k, k2 = w.shape
    if c_in != c_in2 or k != k2:
        raise ValueError("conv2d: kernel shape does not match input channels")
    if k % 2 == 0:
        raise ValueError("conv2d: kernel size must be odd")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d: pad must be >= 0 and stride >= 1")
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise ValueError("conv2d: non-integral output extent")
    hp = (h + 2 * pad - k) // stride + 1
    wp = (wd + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, hp, wp)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out_data = (wmat @ cols).reshape(c_out, hp, wp)

    b = None
    if bias is not None:
        b = _as_tensor(bias, x.dtype)
        if b.shape != (c_out,):
            raise ValueError("conv2d: bias must have one entry per output channel")
        out_data = out_data + b.data[:, None, None]

    def grad_fn(g):
        gmat = g.reshape(c_out, hp * wp)
        dw = (gmat @ cols.T).reshape(w.shape)
        dcols = (wmat.T @ gmat).reshape(c_in, k, k, hp, wp)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + stride * hp:stride, kj:kj + stride * wp:stride] += dcols[:, ki, kj]
        dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
        if b is None:
            return dx.copy(), dw
        return dx.copy(), dw, g.sum(axis=(1, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out_data, inputs, grad_fn, "conv2d")


# --------------------------------------------------------------------------
# Backward pass and the finite-difference oracle
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad for every tracked tensor reachable from a scalar loss.

    Gradients accumulate into existing .grad buffers, so parameters keep
    their totals across multiple backward calls until zeroed.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (nothing requires grad)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(_tape):
        gout = grads.get(id(entry.out))
        if gout is None:
            continue
        for inp, g in zip(entry.inputs, entry.grad_fn(gout)):
            if g is None or not inp.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericsError("non-finite gradient during backward")
            cur = grads.get(id(inp))
            grads[id(inp)] = g if cur is None else cur + g
            holders[id(inp)] = inp

    for tid, t in holders.items():
        g = grads[tid].astype(t.data.dtype, copy=False)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad += g


def finite_diff_gradient(f: Callable[[], float], params: Iterable[Tensor],
                         eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of a deterministic scalar function.

    ``f`` takes no arguments and must read the current values of ``params``;
    each parameter entry is perturbed in place by +/- eps.  Evaluations run
    with the tape disabled.  Non-determinism is detected by evaluating the
    baseline twice.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    with no_grad():
        base1 = float(f())
        base2 = float(f())
        if base1 != base2:
            raise NumericsError("finite_diff_gradient: f is not deterministic")
        out = []
        for p in params:
            flat = p.data.reshape(-1)
            g = np.empty(flat.shape, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f())
                flat[i] = orig - eps
                f_minus = float(f())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2.0 * eps)
            out.append(g.reshape(p.shape))
    return out
