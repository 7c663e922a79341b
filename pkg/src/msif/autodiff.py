"""Reverse-mode differentiation over dense float64 arrays.

Every vector-Jacobian rule below is itself written with :class:`Tensor`
operations, so a backward pass run with ``create_graph=True`` is recorded on
the tape and can be differentiated again. Hessian-vector products are obtained
that way: differentiate ``<grad, v>`` a second time. Finite differences are
never used here; they live in the tests as oracles.

The public surface for the rest of the package works on flat parameter
stores (:class:`ParamVector`) and losses (:class:`LossFunction`):

    value_and_grad(loss, params, batch, wrt)
    grad(loss, params, batch, wrt)
    hvp(loss, params, batch, wrt, v)
    cross_hvp(loss, params, batch, row_seg, col_seg, v)
    CurvatureOperator(loss, params, batch, rows, cols)   # reusable v -> Hv
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import DifferentiationError, SegmentError

RESERVED_SEGMENTS = ("W", "U", "Theta")

_state = threading.local()


def _is_recording():
    return getattr(_state, "recording", True)


@contextmanager
def _recording(flag):
    previous = _is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = previous


def no_grad():
    """Context manager that disables tape recording on the current thread."""
    return _recording(False)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(data):
    """A leaf tensor that gradients are taken with respect to."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents, backward):
    out = Tensor(data)
    if _is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return tensor_sum(g, axes).reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g, out: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g, out: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g, out: (_unbroadcast(g / b, a.shape),
                                 _unbroadcast(-(g * out) / b, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g, out: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _node(a.data @ b.data, (a, b), lambda g, out: (g @ b.T, a.T @ g))


def transpose(a):
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g, out: (transpose(g),))


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g, out: (reshape(g, a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, out: (_unbroadcast(g, a.shape),))


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        axis = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axis = (axis,)
    axis = tuple(ax % a.ndim for ax in axis) if a.ndim else ()
    kept = tuple(1 if i in axis else s for i, s in enumerate(a.shape))

    def backward(g, out):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def getitem(a, idx):
    a = as_tensor(a)
    return _node(a.data[idx], (a,), lambda g, out: (_scatter(g, idx, a.shape),))


def _scatter(g, idx, shape):
    # adjoint of basic (slice) indexing: embed g into zeros of the source shape
    z = np.zeros(shape)
    z[idx] = g.data
    return _node(z, (g,), lambda h, out: (getitem(h, idx),))


def tanh(a):
    a = as_tensor(a)
    return _node(np.tanh(a.data), (a,), lambda g, out: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    return _node(np.exp(a.data), (a,), lambda g, out: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g, out: (g / a,))


def logsumexp(a, axis=-1):
    """Row-wise log-sum-exp with a max shift held constant on the tape."""
    a = as_tensor(a)
    shift = a.data.max(axis=axis, keepdims=True)
    shifted = exp(a - shift)
    lse = log(tensor_sum(shifted, axis, keepdims=True)) + shift
    return lse.reshape(tuple(s for i, s in enumerate(lse.shape) if i != axis % a.ndim))


def dot(a, b):
    return tensor_sum(mul(a, b))


def gradients(output, inputs, create_graph=False):
    """Cotangents of scalar ``output`` with respect to each tensor in ``inputs``.

    Inputs that ``output`` does not depend on get zero arrays. With
    ``create_graph`` the returned tensors carry their own tape and may be
    differentiated again.
    """
    output = as_tensor(output)
    if output.size != 1:
        raise ValueError("gradients() needs a scalar output")
    order = _topological(output)
    wanted = {id(t) for t in inputs}
    cot = {id(output): Tensor(np.ones_like(output.data))}
    with _recording(create_graph):
        for node in reversed(order):
            g = cot.get(id(node))
            if g is None or node._backward is None:
                continue
            if id(node) not in wanted:
                del cot[id(node)]
            for parent, pg in zip(node._parents, node._backward(g, node)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = cot.get(id(parent))
                cot[id(parent)] = pg if prev is None else prev + pg
    return [cot.get(id(t), Tensor(np.zeros(t.shape))) for t in inputs]


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# flat parameter stores and losses


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.length)


class ParamVector:
    """Flat float64 storage partitioned into named contiguous segments."""

    def __init__(self, segments, data):
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in segments)
        data = np.array(data, dtype=np.float64).reshape(-1)
        names = [s.name for s in segs]
        if len(set(names)) != len(names):
            raise SegmentError(f"duplicate segment names in {names}")
        pos = 0
        for s in segs:
            if s.offset != pos or s.length < 0:
                raise SegmentError(f"segment {s.name!r} is not contiguous at offset {pos}")
            pos += s.length
        if pos != data.size:
            raise SegmentError(f"segments cover {pos} values but data holds {data.size}")
        self.segments = segs
        self.data = data

    @classmethod
    def from_sizes(cls, sizes, data=None):
        segs, pos = [], 0
        for name, n in sizes:
            segs.append(Segment(name, pos, int(n)))
            pos += int(n)
        return cls(segs, np.zeros(pos) if data is None else data)

    def __repr__(self):
        parts = ", ".join(f"{s.name}:{s.length}" for s in self.segments)
        return f"ParamVector({parts})"

    def __eq__(self, other):
        return (isinstance(other, ParamVector) and self.segments == other.segments
                and np.array_equal(self.data, other.data))

    @property
    def names(self):
        return tuple(s.name for s in self.segments)

    def _seg(self, name):
        for s in self.segments:
            if s.name == name:
                return s
        raise SegmentError(f"unknown segment {name!r}; have {self.names}")

    def length(self, names):
        if isinstance(names, str):
            names = (names,)
        return sum(self._seg(n).length for n in names)

    def __getitem__(self, name):
        return self.data[self._seg(name).slice]

    def ordered(self, names):
        """``names`` re-sorted into storage order, validated."""
        if isinstance(names, str):
            names = (names,)
        for n in names:
            self._seg(n)
        if len(set(names)) != len(names):
            raise SegmentError(f"repeated segment in {names}")
        return tuple(n for n in self.names if n in names)

    def gather(self, names):
        names = self.ordered(names)
        return np.concatenate([self[n] for n in names]) if names else np.zeros(0)

    def split(self, names, flat):
        """Cut a flat vector over ``names`` (storage order) into a dict."""
        names = self.ordered(names)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.length(names):
            raise SegmentError(f"vector of length {flat.size} does not match {names}")
        out, pos = {}, 0
        for n in names:
            k = self._seg(n).length
            out[n] = flat[pos:pos + k]
            pos += k
        return out

    def replace(self, names, flat):
        """A copy with the segments in ``names`` overwritten by ``flat``."""
        data = self.data.copy()
        for n, part in self.split(names, flat).items():
            data[self._seg(n).slice] = part
        return ParamVector(self.segments, data)

    def copy(self):
        return ParamVector(self.segments, self.data.copy())


@dataclass(frozen=True)
class LossFunction:
    """Scalar loss over named segments.

    ``fn(segments, batch)`` receives a dict mapping every segment name to a
    1-D :class:`Tensor` and returns a scalar Tensor. ``reads`` names the
    segments the loss may touch; derivatives with respect to any other segment
    are zero by construction and are not evaluated.
    """

    fn: Callable[[dict, Any], Tensor]
    reads: tuple
    name: str = "loss"

    def __call__(self, params, batch):
        with no_grad():
            return float(self.fn(_constants(params), batch).data)


def _constants(params):
    return {n: Tensor(params[n]) for n in params.names}


def _check_finite(values, segment, what):
    if not np.all(np.isfinite(values)):
        raise DifferentiationError(f"non-finite {what}", segment)


def _setup(loss, params, wrt):
    wrt = params.ordered(wrt)
    segs = _constants(params)
    leaves = {}
    for n in wrt:
        if n in loss.reads:
            leaves[n] = variable(params[n])
            segs[n] = leaves[n]
    return wrt, segs, leaves


def value_and_grad(loss, params, batch, wrt):
    """Loss value and the concatenated gradient over ``wrt`` in storage order."""
    wrt, segs, leaves = _setup(loss, params, wrt)
    out = loss.fn(segs, batch)
    value = float(out.data)
    _check_finite(value, wrt[0] if wrt else None, f"{loss.name} value")
    names = list(leaves)
    gs = dict(zip(names, gradients(out, [leaves[n] for n in names]))) if names else {}
    parts = []
    for n in wrt:
        g = gs[n].data if n in gs else np.zeros(params.length(n))
        _check_finite(g, n, f"{loss.name} gradient")
        parts.append(g.reshape(-1))
    return value, (np.concatenate(parts) if parts else np.zeros(0))


def grad(loss, params, batch, wrt):
    return value_and_grad(loss, params, batch, wrt)[1]


class CurvatureOperator:
    """Reusable second-derivative block ``v -> (d^2 loss / d rows d cols) v``.

    The first-order gradient over ``cols`` is recorded once; each call then
    differentiates ``<grad_cols, v>`` with respect to ``rows``. With
    ``rows == cols`` this is the Hessian-vector product.
    """

    def __init__(self, loss, params, batch, rows, cols=None):
        cols = rows if cols is None else cols
        self.rows = params.ordered(rows)
        self.cols = params.ordered(cols)
        self.params = params
        self.loss = loss
        self.n_rows = params.length(self.rows)
        self.n_cols = params.length(self.cols)
        _, segs, leaves = _setup(loss, params, tuple(set(self.rows) | set(self.cols)))
        self._row_leaves = [(n, leaves.get(n)) for n in self.rows]
        live_cols = [n for n in self.cols if n in leaves]
        if leaves:
            out = loss.fn(segs, batch)
            _check_finite(out.data, self.cols[0] if self.cols else None, f"{loss.name} value")
            col_grads = gradients(out, [leaves[n] for n in live_cols], create_graph=True)
        else:
            col_grads = []
        self._col_grads = dict(zip(live_cols, col_grads))

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_cols,):
            raise ValueError(f"expected vector of length {self.n_cols}, got {v.shape}")
        parts = self.params.split(self.cols, v)
        terms = [dot(self._col_grads[n], parts[n]) for n in self.cols
                 if n in self._col_grads and self._col_grads[n].requires_grad]
        live = [leaf for _, leaf in self._row_leaves if leaf is not None]
        if terms and live:
            s = terms[0]
            for t in terms[1:]:
                s = s + t
            got = dict(zip([id(leaf) for leaf in live], gradients(s, live)))
        else:
            got = {}
        out = []
        for n, leaf in self._row_leaves:
            block = got[id(leaf)].data if leaf is not None and id(leaf) in got \
                else np.zeros(self.params.length(n))
            _check_finite(block, n, f"{self.loss.name} second derivative")
            out.append(block.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)


def hvp(loss, params, batch, wrt, v):
    """Exact Hessian-vector product of ``loss`` over the ``wrt`` segments."""
    return CurvatureOperator(loss, params, batch, wrt)(v)


def cross_hvp(loss, params, batch, row_seg, col_seg, v):
    """``(d^2 loss / d row_seg d col_seg) @ v`` with ``v`` living in ``col_seg``."""
    return CurvatureOperator(loss, params, batch, (row_seg,), (col_seg,))(v)
