"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine: every operation stores its input tensors and a
backward rule on the output, and ``backward(loss)`` replays the recorded graph
once in reverse topological order. The graph is rebuilt on every forward pass.
Only the operations the correspondence pipeline needs are provided; shapes are
validated eagerly and broadcasting is limited to scalars, row vectors and
column vectors.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph, e.g. backward on a non-scalar."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_node_ids = itertools.count()


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``grad`` exists iff the tensor requires differentiation; it accumulates
    across backward calls until explicitly zeroed. Tensors produced by
    operations remember their parents and a backward rule, which together
    form the (implicit) differentiation graph for one forward pass.
    """

    def __init__(self, data, requires_grad=False, parents=(), rule=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # leaves get their buffer up front; op results get theirs lazily in
        # backward(), so forward-only passes never pay for the allocation
        self.grad = np.zeros(self.data.shape) if self.requires_grad and rule is None else None
        self.node_id = next(_node_ids)
        self.parents = tuple(parents)
        self._rule = rule
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, rule, op) -> Tensor:
    # constants are folded: no graph record when nothing upstream differentiates
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, rule=rule, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(ax for ax, s in enumerate(shape) if s == 1 and grad.shape[ax] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order (parents first) of the differentiating subgraph."""
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every differentiating tensor.

    ``loss`` must be scalar. Repeated calls accumulate; zero the grads
    explicitly between passes. A constant loss is a no-op.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    for node in order:
        if node.grad is None:
            node.grad = np.zeros(node.data.shape)
    loss.grad += 1.0
    for node in reversed(order):
        if node._rule is not None:
            node._rule(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def rule(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def rule(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _result(data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def rule(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _result(data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def rule(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g * a.data / (b.data * b.data), b.data.shape)

    return _result(data, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = _wrap(a)

    def rule(g):
        if a.requires_grad:
            a.grad -= g

    return _result(-a.data, (a,), rule, "neg")


def scale(a, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    return mul(a, float(factor))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    factor = np.where(a.data > 0, 1.0, slope)
    data = a.data * factor

    def rule(g):
        if a.requires_grad:
            a.grad += g * factor

    return _result(data, (a,), rule, "leaky_relu")


def relu(a) -> Tensor:
    return leaky_relu(a, slope=0.0)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def rule(g):
        if a.requires_grad:
            a.grad += g * data

    return _result(data, (a,), rule, "exp")


def sqrt(a) -> Tensor:
    # callers must keep inputs strictly positive (add a tiny floor before calling)
    a = _wrap(a)
    data = np.sqrt(a.data)

    def rule(g):
        if a.requires_grad:
            a.grad += g * 0.5 / data

    return _result(data, (a,), rule, "sqrt")


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def rule(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(data, (a, b), rule, "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.data.shape}")

    def rule(g):
        if a.requires_grad:
            a.grad += g.T

    return _result(a.data.T, (a,), rule, "transpose")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def rule(g):
        if a.requires_grad:
            a.grad += g.reshape(a.data.shape)

    return _result(data, (a,), rule, "reshape")


def concat_cols(a, b) -> Tensor:
    """Concatenate two 2-D tensors along the last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.data.shape} and {b.data.shape}")
    data = np.concatenate([a.data, b.data], axis=1)
    na = a.data.shape[1]

    def rule(g):
        if a.requires_grad:
            a.grad += g[:, :na]
        if b.requires_grad:
            b.grad += g[:, na:]

    return _result(data, (a, b), rule, "concat_cols")


def gather_rows(a, indices) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a 2-D tensor and 1-D indices, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(
            f"gather_rows index out of range [0, {a.data.shape[0]}): "
            f"min={int(idx.min())} max={int(idx.max())}"
        )
    data = a.data[idx]

    def rule(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _result(data, (a,), rule, "gather_rows")


def repeat_each_row(a, k: int) -> Tensor:
    """Repeat every row k times in place: (n, d) -> (n*k, d).

    Equivalent to gather_rows with indices repeat(arange(n), k), but the
    backward pass is a grouped sum instead of a scatter.
    """
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"repeat_each_row needs a 2-D tensor, got {a.data.shape}")
    n, d = a.data.shape
    data = np.repeat(a.data, k, axis=0)

    def rule(g):
        if a.requires_grad:
            a.grad += g.reshape(n, k, d).sum(axis=1)

    return _result(data, (a,), rule, "repeat_each_row")


def repeat_rows(v, n: int) -> Tensor:
    """Tile a (d,) or (1, d) vector into n identical rows."""
    v = _wrap(v)
    if v.data.ndim == 1:
        row = v.data[None, :]
    elif v.data.ndim == 2 and v.data.shape[0] == 1:
        row = v.data
    else:
        raise ShapeError(f"repeat_rows needs a row vector, got {v.data.shape}")
    data = np.repeat(row, n, axis=0)

    def rule(g):
        if v.requires_grad:
            v.grad += g.sum(axis=0).reshape(v.data.shape)

    return _result(data, (v,), rule, "repeat_rows")


# ---------------------------------------------------------------------------
# reductions and pooling


def total_sum(a) -> Tensor:
    a = _wrap(a)

    def rule(g):
        if a.requires_grad:
            a.grad += g

    return _result(a.data.sum(), (a,), rule, "total_sum")


def frobenius_sq(a) -> Tensor:
    a = _wrap(a)

    def rule(g):
        if a.requires_grad:
            a.grad += 2.0 * g * a.data

    return _result((a.data * a.data).sum(), (a,), rule, "frobenius_sq")


def row_sum(a) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=1, keepdims=True)

    def rule(g):
        if a.requires_grad:
            a.grad += g  # broadcasts (m,1) over (m,n)

    return _result(data, (a,), rule, "row_sum")


def col_sum(a) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=0, keepdims=True)

    def rule(g):
        if a.requires_grad:
            a.grad += g

    return _result(data, (a,), rule, "col_sum")


def row_mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.shape[1]
    data = a.data.mean(axis=1, keepdims=True)

    def rule(g):
        if a.requires_grad:
            a.grad += g / n

    return _result(data, (a,), rule, "row_mean")


def row_std(a, eps_var: float = 1e-8) -> Tensor:
    """Population standard deviation per row, variance floored at eps_var.

    The floor keeps constant rows finite; floored rows get zero gradient.
    """
    a = _wrap(a)
    n = a.data.shape[1]
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    floored = np.maximum(var, eps_var)
    data = np.sqrt(floored)
    live = var > eps_var

    def rule(g):
        if a.requires_grad:
            a.grad += np.where(live, g * centered / (n * data), 0.0)

    return _result(data, (a,), rule, "row_std")


def col_mean(a) -> Tensor:
    """Mean over the point axis: (n, d) -> (1, d)."""
    a = _wrap(a)
    n = a.data.shape[0]
    data = a.data.mean(axis=0, keepdims=True)

    def rule(g):
        if a.requires_grad:
            a.grad += g / n

    return _result(data, (a,), rule, "col_mean")


def col_max(a) -> Tensor:
    """Max over the point axis: (n, d) -> (1, d); ties keep the lowest row."""
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"col_max needs a 2-D tensor, got {a.data.shape}")
    arg = a.data.argmax(axis=0)  # first occurrence = lowest index
    cols = np.arange(a.data.shape[1])
    data = a.data[arg, cols][None, :]

    def rule(g):
        if a.requires_grad:
            np.add.at(a.grad, (arg, cols), g[0])

    return _result(data, (a,), rule, "col_max")


def group_max(a, group_size: int) -> Tensor:
    """Max over consecutive row groups: (n*k, d) -> (n, d).

    Used to pool neighbor features; the gradient is routed to the argmax
    element of each group only, ties broken by the lowest row inside the group.
    """
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"group_max needs a 2-D tensor, got {a.data.shape}")
    m, d = a.data.shape
    if group_size < 1 or m % group_size != 0:
        raise ShapeError(f"group_max: {m} rows not divisible by group size {group_size}")
    n = m // group_size
    blocks = a.data.reshape(n, group_size, d)
    arg = blocks.argmax(axis=1)  # (n, d), first occurrence = lowest index
    data = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

    def rule(g):
        if a.requires_grad:
            buf = np.zeros((n, group_size, d))
            np.put_along_axis(buf, arg[:, None, :], g[:, None, :], axis=1)
            a.grad += buf.reshape(m, d)

    return _result(data, (a,), rule, "group_max")


def row_softmax(a) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    a = _wrap(a)
    if not np.isfinite(a.data).all():
        raise NumericError("row_softmax: input contains NaN or infinity")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        if a.requires_grad:
            a.grad += (g - (g * data).sum(axis=1, keepdims=True)) * data

    return _result(data, (a,), rule, "row_softmax")


def pairwise_sq_dists(a, b) -> Tensor:
    """All pairs of squared Euclidean row distances: (m, d), (n, d) -> (m, n)."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"pairwise_sq_dists: incompatible shapes {a.data.shape} and {b.data.shape}")
    aa = (a.data * a.data).sum(axis=1, keepdims=True)
    bb = (b.data * b.data).sum(axis=1, keepdims=True)
    data = np.maximum(aa + bb.T - 2.0 * (a.data @ b.data.T), 0.0)

    def rule(g):
        if a.requires_grad:
            a.grad += 2.0 * (g.sum(axis=1, keepdims=True) * a.data - g @ b.data)
        if b.requires_grad:
            b.grad += 2.0 * (g.sum(axis=0)[:, None] * b.data - g.T @ a.data)

    return _result(data, (a, b), rule, "pairwise_sq_dists")


def row_diff_norms(a, b, floor: float = 1e-30) -> Tensor:
    """L2 norm of the row differences of two equally shaped matrices: (m, 1)."""
    d = sub(a, b)
    return sqrt(add(row_sum(mul(d, d)), floor))


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Learnable matrix drawn uniform in +-sqrt(6/(rows+cols)).

    Values are rounded through float32 so that checkpoints (which store
    float32 payloads) reload bit-exactly.
    """
    bound = np.sqrt(6.0 / (rows + cols))
    data = rng.uniform(-bound, bound, size=(rows, cols)).astype(np.float32).astype(np.float64)
    return Tensor(data, requires_grad=True)


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
