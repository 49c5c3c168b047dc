"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap a numpy array. Every differentiable op records its inputs and a
backward closure on the output tensor; :func:`backward` collects the reachable
graph and replays it in reverse execution order.

Gradients ACCUMULATE into ``Tensor.grad``. Callers (the optimizer) zero them
between steps.

Training runs in float32. A float64 mode (``precision("float64")``) exists for
finite-difference gradient checks only.
"""

from __future__ import annotations

import itertools
import math
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradGraph",
    "ContractError",
    "DimensionError",
    "NonFiniteError",
    "precision",
    "default_dtype",
    "no_grad",
    "grad_enabled",
    "set_debug",
    "debug_enabled",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "permute",
    "reshape",
    "slice_cols",
    "concat",
    "concat_cols",
    "take",
    "broadcast_add_bias",
    "embedding_add",
    "sum",
    "mean",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "cross_entropy_logits",
    "straight_through",
    "GELU_SQRT_2_OVER_PI",
    "GELU_CUBIC",
]

# tanh-approximation GELU constants
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class ContractError(RuntimeError):
    """An op or backward pass was invoked outside its contract."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while debug checks are enabled."""


_state = threading.local()
_seq = itertools.count()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad = True
        _state.debug = os.environ.get("HEARTLORA_DEBUG", "") not in ("", "0")
    return _state


def default_dtype():
    return _st().dtype


@contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly constructed tensors."""
    dtypes = {"float32": np.float32, "float64": np.float64}
    if name not in dtypes:
        raise ValueError(f"unknown precision {name!r}")
    st = _st()
    prev = st.dtype
    st.dtype = dtypes[name]
    try:
        yield
    finally:
        st.dtype = prev


@contextmanager
def no_grad():
    st = _st()
    prev = st.grad
    st.grad = False
    try:
        yield
    finally:
        st.grad = prev


def grad_enabled() -> bool:
    return _st().grad


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks on every op output and every propagated gradient."""
    _st().debug = bool(flag)


def debug_enabled() -> bool:
    return _st().debug


class Tensor:
    """Dense row-major array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op}{label})"

    # operator sugar; the named functions below are the real API
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _raise_non_scalar(t: Tensor):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    st = _st()
    if st.debug:
        _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t._op = op
    t._seq = next(_seq)
    if st.grad and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class GradGraph:
    """Recorded differentiable ops reachable from one output, in execution order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "GradGraph":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    @property
    def ops(self) -> list:
        return [n for n in self.nodes if n._backward is not None]

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray) -> None:
        debug = _st().debug
        root = self.nodes[-1]
        pending = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node._backward is None:
                    # leaves own their buffer so later accumulation is in place
                    if node.grad is None:
                        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                    else:
                        node.grad += g
                else:
                    # interior grads may alias arrays shared with other nodes; never mutate them
                    node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if debug:
                    _check_finite(pg, f"backward of {node._op}")
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def backward(loss: Tensor) -> GradGraph:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate; zero them between optimizer steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = GradGraph.from_output(loss)
    graph.run_backward(np.ones_like(loss.data))
    return graph


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), _bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def _bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), _bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def _bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), _bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (broadcasting allowed, used for bias-like masks)."""
    out = a.data * b.data

    def _bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), _bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out = a.data * c
    return _make(out, (a,), lambda g: (g * c,), "scale")


def broadcast_add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis."""
    if bias.ndim != 1 or bias.shape[0] != a.shape[-1]:
        raise DimensionError(f"bias shape {bias.shape} does not match last axis of {a.shape}")
    return add(a, bias)


def embedding_add(tokens: Tensor, table: Tensor) -> Tensor:
    """Add a (tokens x dim) positional table to every batch element."""
    if tokens.shape[-2:] != table.shape:
        raise DimensionError(f"positional table {table.shape} does not match tokens {tokens.shape}")
    return add(tokens, table)


# --- shape ops ------------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(a.data, -1, -2)
    return _make(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def slice_cols(a: Tensor, start: int, end: int) -> Tensor:
    """Columns ``[start, end)`` of the last axis."""
    n = a.shape[-1]
    if not 0 <= start <= end <= n:
        raise DimensionError(f"column range [{start}, {end}) outside width {n}")
    out = a.data[..., start:end]

    def _bw(g):
        full = np.zeros_like(a.data)
        full[..., start:end] = g
        return (full,)

    return _make(out, (a,), _bw, "slice_cols")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _bw(g):
        res = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(bounds[i], bounds[i + 1])
                res.append(g[tuple(idx)])
            else:
                res.append(None)
        return tuple(res)

    return _make(out, tensors, _bw, "concat")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (the axis is removed)."""
    out = np.take(a.data, index, axis=axis)
    ax = axis % a.ndim

    def _bw(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return _make(out, (a,), _bw, "take")


# --- reductions -----------------------------------------------------------


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(axis=axis))

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis))
    inv = a.data.dtype.type(1.0 / n)

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, a.shape).astype(a.data.dtype, copy=True),)

    return _make(out, (a,), _bw, "mean")


# --- nonlinearities -------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), _bw, "softmax_rows")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def _bw(g):
        ga = ggam = gbeta = None
        if a.requires_grad:
            gx = g * gamma.data
            ga = inv_std * (
                gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggam = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return ga, ggam, gbeta

    return _make(out, (a, gamma, beta), _bw, "layer_norm")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    c = x.dtype.type(GELU_SQRT_2_OVER_PI)
    k = x.dtype.type(GELU_CUBIC)
    u = c * (x + k * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        du = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out.astype(x.dtype, copy=False), (a,), _bw, "gelu")


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    b, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(b)
    out = np.asarray((lse - x[rows, labels]).mean(), dtype=x.dtype)

    def _bw(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(out, (logits,), _bw, "cross_entropy_logits")


def straight_through(a: Tensor, fn: Callable[[np.ndarray], np.ndarray], op: str = "straight_through") -> Tensor:
    """Apply a non-differentiable map in forward and pass gradients through unchanged."""
    out = np.asarray(fn(a.data), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (g,), op)
