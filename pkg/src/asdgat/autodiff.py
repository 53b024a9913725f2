"""Dense reverse-mode automatic differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers
its parents and a closure that pushes the output gradient back to them.
:meth:`Tensor.backward` linearises the graph into a tape (topological order)
and replays the closures in reverse.

Broadcasting is deliberately narrow: elementwise binary operations accept
equal shapes, a ``(1, d)`` row vector against an ``(n, d)`` matrix, an
``(n, 1)`` column vector against an ``(n, d)`` matrix, or a 0-d scalar.
Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaves that require grad but are not on the path keep ``grad=None``;
        use :func:`grad_of` to read them as zeros.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = build_tape(self)
        for node in tape:
            if node is not self and node._parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def grad_of(t: Tensor) -> np.ndarray:
    return np.zeros_like(t.data) if t.grad is None else t.grad


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of nodes that ``root`` depends on (inputs first)."""
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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if a.ndim == 2 and b.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return "row"
    if a.ndim == 2 and b.ndim == 2 and b.shape[1] == 1 and b.shape[0] == a.shape[0]:
        return "col"
    raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    if kind == "row":
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


def _binary_layout(a: Tensor, b: Tensor):
    """Order operands so the larger one comes first; returns (big, small, kind, swapped)."""
    try:
        return a, b, _broadcast_kind(a.data, b.data), False
    except ShapeError:
        return b, a, _broadcast_kind(b.data, a.data), True


def _segment_sum(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Rows of ``values`` summed into ``n_rows`` buckets (sparse product beats ufunc.at)."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n_rows)
    sel = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index)))
    return np.asarray(sel @ values.reshape(len(index), -1)).reshape((n_rows,) + values.shape[1:])


def _segment_max(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    order = np.argsort(index, kind="stable")
    s = index[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    out = np.full((n_rows,) + values.shape[1:], -np.inf)
    out[s[starts]] = np.maximum.reduceat(values[order], starts, axis=0)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    big, small, kind, _ = _binary_layout(a, b)
    out = big.data + small.data

    def backward(g):
        if big.requires_grad:
            big._accumulate(g)
        if small.requires_grad:
            small._accumulate(_reduce_to(g, kind))

    return _make(out, (big, small), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    big, small, kind, _ = _binary_layout(a, b)
    out = big.data * small.data

    def backward(g):
        if big.requires_grad:
            big._accumulate(g * small.data)
        if small.requires_grad:
            small._accumulate(_reduce_to(g * big.data, kind))

    return _make(out, (big, small), backward, "multiply")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g):
        a._accumulate(g * c)

    return _make(out, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    out = a.data.T.copy()

    def backward(g):
        a._accumulate(g.T)

    return _make(out, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make(out, tuple(tensors), backward, "concat")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out, (a,), backward, "log")


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        a._accumulate(_expand(g, a.shape, axis, keepdims))

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        a._accumulate(_expand(g, a.shape, axis, keepdims) / count)

    return _make(out, (a,), backward, "mean")


def max(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``. Ties split the gradient evenly."""
    out = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        full = a.data.max(axis=axis, keepdims=True)
        hit = (a.data == full).astype(np.float64)
        hit /= hit.sum(axis=axis, keepdims=True)
        a._accumulate(hit * _expand(g, a.shape, axis, keepdims))

    return _make(out, (a,), backward, "max")


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]

    def backward(g):
        a._accumulate(_segment_sum(g, index, a.shape[0]))

    return _make(out, (a,), backward, "gather_rows")


def scatter_add_rows(a: Tensor, index, n_rows: int) -> Tensor:
    """``out[index[k]] += a[k]`` into an ``n_rows``-row zero tensor."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ShapeError("scatter index length must match rows")
    out = _segment_sum(a.data, index, n_rows)

    def backward(g):
        a._accumulate(g[index])

    return _make(out, (a,), backward, "scatter_add_rows")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def backward(g):
        a._accumulate(g * mask)

    return _make(out, (a,), backward, "relu")


def elu(a: Tensor) -> Tensor:
    """ELU with alpha fixed at 1."""
    neg = a.data <= 0
    out = np.where(neg, np.expm1(np.minimum(a.data, 0.0)), a.data)

    def backward(g):
        a._accumulate(g * np.where(neg, out + 1.0, 1.0))

    return _make(out, (a,), backward, "elu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)

    def backward(g):
        a._accumulate(g * np.where(pos, 1.0, slope))

    return _make(out, (a,), backward, "leaky_relu")


def segment_softmax(values: Tensor, segment_ids, n_segments: int | None = None) -> Tensor:
    """Softmax over rows sharing a segment id, independently per column.

    ``values`` is ``(E,)`` or ``(E, k)``; ``segment_ids`` is any length-E
    integer array. Every segment in ``range(n_segments)`` must be non-empty.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    v = values.data
    if seg.shape[0] != v.shape[0]:
        raise ShapeError("segment_ids length must match rows")
    if n_segments is None:
        n_segments = int(seg.max()) + 1 if seg.size else 0
    counts = np.bincount(seg, minlength=n_segments)
    if n_segments == 0 or np.any(counts == 0):
        raise ValueError("segment_softmax: empty segment")
    e = np.exp(v - _segment_max(v, seg, n_segments)[seg])
    out = e / _segment_sum(e, seg, n_segments)[seg]

    def backward(g):
        dot = _segment_sum(g * out, seg, n_segments)
        values._accumulate(out * (g - dot[seg]))

    return _make(out, (values,), backward, "segment_softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward, "log_softmax")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)
