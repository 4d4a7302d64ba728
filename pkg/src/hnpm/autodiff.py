"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor requiring gradients appends a
:class:`Node` to the implicit tape. :func:`backward` replays the reachable
part of the tape in reverse execution order, visiting each node once.

Broadcasting is limited to scalar-with-tensor; anything else must go
through an explicit op such as :func:`tile_rows`.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """A float64 array plus the bookkeeping needed for backward.

    ``trainable`` marks leaves whose ``grad`` is populated by :func:`backward`.
    Values are treated as immutable once created.
    """

    __slots__ = ("values", "grad", "trainable", "_node", "__weakref__")

    def __init__(self, values, trainable: bool = False):
        arr = np.array(values, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.trainable = trainable
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def requires_grad(self) -> bool:
        return self.trainable or self._node is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, op: str, inputs: Sequence[Tensor], bwd) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.trainable = False
    out._node = None
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out._node = Node(op, tuple(inputs), out, bwd)
    return out


# -- tape -------------------------------------------------------------------


@dataclass
class Tape:
    """Execution-ordered record of the operations that produced a tensor."""

    records: list

    @classmethod
    def of(cls, root: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def reverse(self):
        return reversed(self.records)

    def __len__(self):
        return len(self.records)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every trainable leaf reachable from ``loss``.

    Gradients add onto any existing ``grad`` (call ``zero_grad`` between
    steps); repeated uses of one tensor inside the graph accumulate.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.trainable:
            _accumulate_leaf(loss, np.ones_like(loss.values))
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in Tape.of(loss).reverse():
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.backward(g)
        for t, gi in zip(node.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                _accumulate_leaf(t, gi)
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi


def _accumulate_leaf(t: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


# -- elementwise ------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor):
    if a.shape == b.shape or a.values.ndim == 0 or b.values.ndim == 0:
        return
    raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.values.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)

    def bwd(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _make(a.values + b.values, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)

    def bwd(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _make(a.values - b.values, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    av, bv = a.values, b.values

    def bwd(g):
        return _unbroadcast(g * bv, a), _unbroadcast(g * av, b)

    return _make(av * bv, "mul", (a, b), bwd)


def square(a: Tensor) -> Tensor:
    av = a.values

    def bwd(g):
        return (2.0 * av * g,)

    return _make(av * av, "square", (a,), bwd)


def log(a: Tensor) -> Tensor:
    av = a.values
    if not np.all(av > 0):
        raise DomainError("log requires strictly positive inputs")

    def bwd(g):
        return (g / av,)

    return _make(np.log(av), "log", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    av = a.values
    on = av > 0

    def bwd(g):
        return (g * on,)

    return _make(np.where(on, av, 0.0), "relu", (a,), bwd)


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name to add/sub/mul/square/log/relu."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"square": square, "log": log, "relu": relu}
    if kind in binary:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# -- linear algebra and shape ops -------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul needs two matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), bwd)


def tile_rows(v: Tensor, n: int) -> Tensor:
    """Stack a length-H vector (or 1xH row) into an n x H matrix."""
    row = v.values.reshape(-1)
    shape = v.shape

    def bwd(g):
        return (g.sum(axis=0).reshape(shape),)

    return _make(np.tile(row, (n, 1)), "tile_rows", (v,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    try:
        vals = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(vals, "reshape", (a,), bwd)


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    n = a.shape[0]

    def bwd(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("row index out of range")
    return _make(a.values[idx], "take_rows", (a,), bwd)


def detach(t: Tensor) -> Tensor:
    """Same values, no path back to ``t`` for the gradient."""
    out = Tensor.__new__(Tensor)
    out.values = t.values
    out.grad = None
    out.trainable = False
    out._node = None
    return out


# -- reductions ---------------------------------------------------------------


def _check_axis(t: Tensor, axis):
    if axis is not None and not (-t.values.ndim <= axis < t.values.ndim):
        raise ShapeError(f"axis {axis} out of range for rank {t.values.ndim}")


def reduce(kind: str, t: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(t, axis)
    v = t.values
    if kind == "sum":
        out = v.sum(axis=axis)

        def bwd(g):
            ge = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(ge, v.shape).copy(),)

    elif kind == "mean":
        extent = v.size if axis is None else v.shape[axis]
        out = v.sum(axis=axis) / extent

        def bwd(g):
            ge = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(ge / extent, v.shape).copy(),)

    elif kind == "max_abs":
        a = np.abs(v)
        if axis is None:
            flat = int(np.argmax(a))  # argmax picks the lowest index on ties
            out = a.reshape(-1)[flat]

            def bwd(g):
                d = np.zeros(v.size)
                d[flat] = g * np.sign(v.reshape(-1)[flat])
                return (d.reshape(v.shape),)

        else:
            idx = np.expand_dims(np.argmax(a, axis=axis), axis)
            out = np.take_along_axis(a, idx, axis=axis).squeeze(axis)

            def bwd(g):
                d = np.zeros_like(v)
                sgn = np.sign(np.take_along_axis(v, idx, axis=axis))
                np.put_along_axis(d, idx, np.expand_dims(g, axis) * sgn, axis=axis)
                return (d,)

    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return _make(np.asarray(out, dtype=np.float64), f"reduce_{kind}", (t,), bwd)


def sum(t: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return reduce("sum", t, axis)


def mean(t: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce("mean", t, axis)


# -- normalisation and distances ----------------------------------------------


def inf_norm_normalize(v: Tensor) -> Tensor:
    """Divide each row by its largest absolute entry.

    The maximising index is held fixed for the derivative; ties go to the
    lowest index.
    """
    x = v.values
    if x.ndim != 2:
        raise ShapeError(f"expected an N x d matrix, got {v.shape}")
    rows = np.arange(x.shape[0])
    idx = np.argmax(np.abs(x), axis=1)
    peak = x[rows, idx]
    if np.any(peak == 0.0):
        bad = np.flatnonzero(peak == 0.0).tolist()
        raise DegenerateInputError(f"all-zero rows cannot be normalised: {bad}")
    m = np.abs(peak)
    y = x / m[:, None]

    def bwd(g):
        # y = x / |x_p|  =>  dx = g/m - e_p * sign(x_p) * <g, y> / m
        gx = g / m[:, None]
        corr = np.einsum("ij,ij->i", g, y) / m * np.sign(peak)
        gx[rows, idx] -= corr
        return (gx,)

    return _make(y, "inf_norm_normalize", (v,), bwd)


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """n x m matrix of squared distances between the rows of ``a`` and ``b``."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"row dimension mismatch {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return kernels.pairwise_sqdist_backward(g, av, bv)

    return _make(kernels.pairwise_sqdist(av, bv), "pairwise_sqdist", (a, b), bwd)


# -- convolution (image encoder) ----------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k, k, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols, oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """Cross-correlation of an N x C x H x W batch with O x C x k x k filters."""
    if x.values.ndim != 4 or w.values.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes incompatible: {x.shape}, {w.shape}")
    k = w.shape[2]
    xv, wv = x.values, w.values
    n, c, h, wd = xv.shape
    o = wv.shape[0]
    cols, oh, ow = _im2col(xv, k, stride, pad)
    cm = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)
    wm = wv.reshape(o, -1)
    out = (cm @ wm.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (gm.T @ cm).reshape(wv.shape)
        gcols = (gm @ wm).reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
        return gxp[:, :, pad : pad + h, pad : pad + wd], gw

    return _make(np.ascontiguousarray(out), "conv2d", (x, w), bwd)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C bias to every pixel of an N x C x H x W tensor."""
    if x.values.ndim != 4 or b.values.size != x.shape[1]:
        raise ShapeError(f"bias of size {b.values.size} does not match {x.shape}")
    bshape = b.shape

    def bwd(g):
        return g, g.sum(axis=(0, 2, 3)).reshape(bshape)

    return _make(x.values + b.values.reshape(1, -1, 1, 1), "add_channel_bias", (x, b), bwd)


# -- classification loss ------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    z = logits.values
    if z.ndim != 2:
        raise ShapeError("logits must be N x k")
    y = np.asarray(labels, dtype=np.intp)
    n, k = z.shape
    if y.shape != (n,):
        raise ContractError(f"expected {n} labels, got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, y].sum() / n

    def bwd(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), bwd)


# -- gradient utilities -------------------------------------------------------


def global_norm(grads: Sequence[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``. Inputs at or under the limit come
    back unchanged, so clipping twice equals clipping once.
    """
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    clipped = [g * scale for g in grads]
    # rounding can leave the result a few ulp above the limit
    while global_norm(clipped) > max_norm:
        scale = np.nextafter(scale, 0.0)
        clipped = [g * scale for g in grads]
    return clipped, norm


def finite_diff_grad(f: Callable[[Tensor], object], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if not eps > 0:
        raise ContractError("eps must be positive")
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def call(v):
        r = f(Tensor(v.reshape(base.shape)))
        val = r.item() if isinstance(r, Tensor) else float(r)
        if not math.isfinite(val):
            raise DomainError("objective is not finite at a perturbed point")
        return val

    for k in range(flat.size):
        p = flat.copy()
        p[k] += eps
        m = flat.copy()
        m[k] -= eps
        out[k] = (call(p) - call(m)) / (2.0 * eps)
    return out.reshape(base.shape)


def rel_error(a, b) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale
