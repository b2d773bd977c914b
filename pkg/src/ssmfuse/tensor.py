"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array. Operations executed while a
``Tape`` is recording (see :func:`record`) append nodes carrying backward
rules; :func:`backward` replays the tape in reverse and accumulates
gradients into every reachable leaf's ``.grad``.

Broadcasting rule: two operands conform iff their shapes are equal, one is
a scalar (rank 0), or one shape is a trailing suffix of the other
(e.g. ``(d,)`` against ``(T, d)``). Nothing else broadcasts.

Tapes are single-use: one forward pass, one backward, then the tape is
consumed. f64 is the default dtype; f32 is intended for benchmarking only.
"""

from __future__ import annotations

import threading
from typing import Iterable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64

_DTYPES = {np.dtype(np.float32): F32, np.dtype(np.float64): F64}


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not conform."""


class NonFiniteError(ArithmeticError):
    """An operation with a finite-output contract produced inf or nan."""


class TapeError(RuntimeError):
    """Tape misuse: recording on a consumed tape, non-scalar backward, etc."""


class Node:
    """One recorded operation: inputs precede it on the tape by construction."""

    __slots__ = ("op", "parents", "vjp", "value")

    def __init__(self, op, parents, vjp, value):
        self.op = op
        self.parents = parents  # node ids of the inputs
        self.vjp = vjp  # grad_out -> tuple of grads aligned with parents; None for leaves
        self.value = value  # forward value (reference, not a copy)


class Tape:
    """Ordered record of one forward pass.

    Node order is topological because nodes are appended as values are
    computed. A tape is consumed by :func:`backward` and cannot record
    afterwards.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._leaves: dict[int, "Tensor"] = {}  # node id -> leaf tensor

    def _check_open(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); start a new recording")

    def _leaf_node(self, t: "Tensor") -> int:
        """Register ``t`` as a leaf on this tape (memoized per tensor)."""
        if t.tape is self and t.node is not None:
            return t.node
        self._check_open()
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.data))
        self._leaves[nid] = t
        t.tape = self
        t.node = nid
        return nid

    def add(self, op: str, parents: Sequence["Tensor"], vjp, value) -> int:
        self._check_open()
        # -1 marks constant inputs: their vjp outputs are discarded
        pids = []
        for p in parents:
            if p.tape is self and p.node is not None:
                pids.append(p.node)
            elif p.requires_grad:
                pids.append(self._leaf_node(p))
            else:
                pids.append(-1)
        nid = len(self.nodes)
        self.nodes.append(Node(op, tuple(pids), vjp, value))
        return nid

    def first_nonfinite(self):
        """Return (index, op name) of the earliest non-finite node value, or None."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.value)):
                return i, node.op
        return None


_LOCAL = threading.local()


def _active() -> Tape | None:
    return getattr(_LOCAL, "tape", None)


class record:
    """Context manager activating a fresh tape on the current thread."""

    def __enter__(self) -> Tape:
        if _active() is not None:
            raise TapeError("a tape is already recording on this thread")
        self.tape = Tape()
        _LOCAL.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _LOCAL.tape = None
        return False


class Tensor:
    """Immutable-by-convention dense array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(F64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node: int | None = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={'leaf' if self.node is None else 'tracked'})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _tracked(t: Tensor) -> bool:
    tape = _active()
    if tape is None:
        return False
    return t.requires_grad or (t.tape is tape and t.node is not None)


def apply_op(op: str, value: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``value`` in a Tensor, recording ``vjp`` if a tape is active.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent,
    already reduced to the parent's shape. This is the extension point other
    modules use to register fused operations with custom backward rules.
    """
    out = Tensor(value)
    tape = _active()
    if tape is not None and any(_tracked(p) for p in parents):
        out.tape = tape
        out.node = tape.add(op, parents, vjp, value)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns the gradient map ``{leaf tensor: gradient array}``. The loss
    must be scalar-shaped (a single element) and its tape is consumed.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or loss.node is None:
        # Constant loss: nothing reachable, nothing to do.
        return {}
    if tape.consumed:
        raise TapeError("tape already consumed; backward() is single-use")
    tape.consumed = True
    if _LOCAL.__dict__.get("tape") is tape:
        _LOCAL.tape = None

    grads: dict[int, np.ndarray] = {
        loss.node: np.ones_like(loss.data)
    }
    for nid in range(loss.node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            grads[nid] = g  # leaf: keep for the gradient map
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid < 0 or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    out: dict[Tensor, np.ndarray] = {}
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.data)
        if g.shape != leaf.data.shape:  # pragma: no cover - internal invariant
            raise TapeError(f"gradient shape {g.shape} != leaf shape {leaf.data.shape}")
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


# -- shape plumbing ----------------------------------------------------------

def _conform(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) == 0:
        return sb
    if len(sb) == 0:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform "
                     "(equal, scalar, or trailing-suffix broadcast only)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _finite_or_raise(op: str, value: np.ndarray, *inputs: np.ndarray):
    if np.all(np.isfinite(value)):
        return
    if all(np.all(np.isfinite(x)) for x in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    raise NonFiniteError(f"{op} received non-finite inputs")


# -- arithmetic ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _conform(a, b, "add")
    value = a.data + b.data
    return apply_op("add", value, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _conform(a, b, "sub")
    value = a.data - b.data
    return apply_op("sub", value, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _conform(a, b, "mul")
    value = a.data * b.data
    return apply_op("mul", value, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _conform(a, b, "div")
    with np.errstate(all="ignore"):
        value = a.data / b.data
    _finite_or_raise("div", value, a.data, b.data)
    return apply_op("div", value, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    value = a.data @ b.data
    return apply_op("matmul", value, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    return apply_op("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- elementwise nonlinearities ----------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        value = np.exp(a.data)
    _finite_or_raise("exp", value, a.data)
    return apply_op("exp", value, (a,), lambda g: (g * value,))


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        value = np.log(a.data)
    _finite_or_raise("log", value, a.data)
    return apply_op("log", value, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        value = np.sqrt(a.data)
    _finite_or_raise("sqrt", value, a.data)
    return apply_op("sqrt", value, (a,), lambda g: (g * (0.5 / value),))


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)
    return apply_op("tanh", value, (a,), lambda g: (g * (1.0 - value * value),))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return apply_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    value = _sigmoid(a.data)
    return apply_op("sigmoid", value, (a,), lambda g: (g * value * (1.0 - value),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed as logaddexp(0, x): stable for large |x|
    value = np.logaddexp(0.0, a.data)
    return apply_op("softplus", value, (a,), lambda g: (g * _sigmoid(a.data),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    value = a.data * s
    return apply_op("silu", value, (a,),
                    lambda g: (g * (s + a.data * s * (1.0 - s)),))


# -- reductions ---------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _norm_axes(axes, a.data.ndim)
    value = a.data.sum(axis=ax, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", value, (a,), vjp)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, a.data.ndim)
    count = 1
    for axis in ax:
        count *= a.shape[axis]
    value = a.data.mean(axis=ax, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, shape).copy(),)

    return apply_op("mean", value, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return ((g - inner) * value,)

    return apply_op("softmax", value, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    value = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return apply_op("logsumexp", value, (a,), vjp)


# -- structural ops -----------------------------------------------------------

def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    axis = axis % ts[0].data.ndim
    value = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[(slice(None),) * axis + (slice(offsets[i], offsets[i + 1]),)]
            for i in range(len(ts))
        )

    return apply_op("concat", value, ts, vjp)


def _slice(a: Tensor, idx) -> Tensor:
    value = a.data[idx]
    if not isinstance(value, np.ndarray):
        value = np.asarray(value, dtype=a.data.dtype)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return apply_op("slice", value.copy(), (a,), vjp)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a (T, d) tensor by scalar s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape} do not conform")
    value = x.data * s.data[:, None]

    def vjp(g):
        return (g * s.data[:, None], (g * x.data).sum(axis=1))

    return apply_op("scale_rows", value, (x, s), vjp)


# -- convenience constructors ---------------------------------------------------

def tensor(data, dtype=F64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=F64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=F64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
