"""Small reverse-mode autodiff over numpy arrays.

Every differentiable op builds a node on a dynamic tape: the output tensor keeps
references to its parents and a closure that pushes the upstream gradient into
them. ``Tensor.backward`` sorts the graph topologically and runs each closure
once, in reverse order.

Leaf tensors accumulate ``.grad`` across calls to ``backward``; call
``zero_grad`` (or set ``.grad = None``) between steps.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float array that can take part in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Propagate gradients from this tensor to every reachable leaf.

        Intermediate gradients are reset at the start of each call, leaf
        gradients accumulate.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topo_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        if self._backward is None and self.grad is not None:
            self.grad = self.grad + grad
        else:
            self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True) if t._backward is None else g
    else:
        t.grad = t.grad + g


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = a.data.dtype.type(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        _accumulate(a, np.full(a.shape, g / n, dtype=a.dtype))

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        _accumulate(a, g.reshape(src))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), backward, "softmax")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3.0 * k * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accumulate(a, g * d)

    return _make(y.astype(x.dtype, copy=False), (a,), backward, "gelu")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Non-affine normalisation over the last axis."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - y * gy))

    return _make(y.astype(x.dtype, copy=False), (a,), backward, "layer_norm")


def straight_through(a, forward_fn: Callable[[np.ndarray], np.ndarray],
                     mask_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> Tensor:
    """Apply a non-differentiable elementwise map with a straight-through backward.

    ``forward_fn`` produces the output values. ``mask_fn`` maps the input to a
    boolean array of positions that let the gradient through; ``None`` passes
    everything (plain identity STE).
    """
    a = as_tensor(a)
    y = np.asarray(forward_fn(a.data), dtype=a.dtype)
    mask = None if mask_fn is None else mask_fn(a.data)
    return straight_through_masked(a, y, mask)


def straight_through_masked(a: Tensor, y: np.ndarray, mask: np.ndarray | None) -> Tensor:
    """Node with precomputed forward values ``y`` whose backward is ``mask * grad``."""
    y = np.asarray(y, dtype=a.dtype)

    def backward(g):
        if mask is None:
            _accumulate(a, g)
        else:
            _accumulate(a, np.where(mask, g, g.dtype.type(0)))

    return _make(y, (a,), backward, "straight_through")


# ---------------------------------------------------------------------------
# embedding and loss
# ---------------------------------------------------------------------------

def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for embedding with {weight.shape[0]} rows")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, gw)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean token cross-entropy of ``logits[..., V]`` against integer ``targets``.

    Positions whose target equals ``ignore_index`` do not contribute.
    """
    logits = as_tensor(logits)
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ValueError(f"cross_entropy shape mismatch: logits {logits.shape} vs targets {np.shape(targets)}")
    keep = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    if np.any((t[keep] < 0) | (t[keep] >= v)):
        raise IndexError("target id out of range")
    n = max(int(keep.sum()), 1)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / n

    def backward(g):
        p = e / s
        p[rows, t[rows]] -= 1.0
        p[~keep] = 0.0
        _accumulate(logits, (p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of the scalar ``f()`` w.r.t. ``x``."""
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(f: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-3,
              rtol: float = 1e-3, atol: float = 1e-6) -> float:
    """Compare analytic and finite-difference gradients; return the worst error.

    The error per element is ``|a - n| / max(atol, |a|, |n|)``. Raises
    ``AssertionError`` when it exceeds ``rtol``.
    """
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    out = f()
    out.backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
        numeric = numerical_grad(f, x, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradcheck failed for input {x.shape}: rel err {err:.3g}")
    return worst
