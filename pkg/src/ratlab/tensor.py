"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op that touches a tensor with ``requires_grad`` appends a node to the
current thread's :class:`Graph`. :func:`backward` walks that node list in
exact reverse order, so replaying the same ops yields bit-identical
gradients. Gradients accumulate on ``Tensor.grad`` until :meth:`Tensor.zero_grad`.

Broadcasting is limited to scalar-times-tensor; the few places a model needs
more (bias add, masked pooling) get dedicated ops with their own backward.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "GraphError",
    "Graph",
    "Tensor",
    "backward",
    "current_graph",
    "new_graph",
    "add",
    "sub",
    "scale",
    "mul",
    "add_bias",
    "matmul",
    "gather",
    "tanh",
    "relu",
    "sum",
    "mean",
    "concat",
    "reshape",
    "shift",
    "transpose",
    "softmax",
    "log_softmax",
    "masked_mean",
    "softmax_cross_entropy",
    "kl_div",
    "sym_kl_div",
    "finite_difference_check",
]

DEFAULT_DELTA = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        msg = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Raised when values fall outside an op's mathematical domain."""


class GraphError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array that can take part in a computation graph."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_graph", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        arr.setflags(write=False)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError("item", self.shape, (), "tensor is not a scalar")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered op records; ``nodes`` is topological by construction."""

    nodes: list[Node] = field(default_factory=list)
    generation: int = 0

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


def new_graph() -> Graph:
    """Drop every recorded node; call at each training-step boundary."""
    g = current_graph()
    g.clear()
    return g


def _make(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(value)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g = current_graph()
        out.node_id = g.record(Node(op, inputs, out, bwd))
        out._graph = g
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return _add_scalar(a, b)
    if a.ndim == 0 and b.ndim > 0:
        return _add_scalar(b, a)
    _check_same("add", a, b)
    return _make("add", a.values + b.values, (a, b), lambda g: (g, g))


def _add_scalar(a: Tensor, s: Tensor) -> Tensor:
    return _make("add", a.values + s.values, (a, s), lambda g: (g, np.sum(g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _make("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.values * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Hadamard product; a 0-d operand acts as a (differentiable) scalar."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if b.ndim == 0 and a.ndim > 0:
        return _make("mul", av * bv, (a, b), lambda g: (g * bv, np.sum(g * av)))
    if a.ndim == 0 and b.ndim > 0:
        return _make("mul", av * bv, (a, b), lambda g: (np.sum(g * bv), g * av))
    _check_same("mul", a, b)
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., n] + b[n]``."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError("add_bias", x.shape, b.shape, "bias must match last axis")
    axes = tuple(range(x.ndim - 1))
    return _make("add_bias", x.values + b.values, (x, b), lambda g: (g, g.sum(axis=axes)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either 2-d (``a[..., k] @ b[k, n]``) or has the same leading
    batch dims as ``a`` (batched ``[..., m, k] @ [..., k, n]``).
    """
    av, bv = a.values, b.values
    if a.ndim < 1 or b.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape, "inner dimensions differ")
    if b.ndim == 2:
        k, n = bv.shape

        def bwd(g):
            ga = g @ bv.T
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _make("matmul", av @ bv, (a, b), bwd)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError("matmul", a.shape, b.shape, "batch dimensions differ")

    def bwd_batched(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _make("matmul", av @ bv, (a, b), bwd_batched)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` with shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("gather", table.shape, ids.shape, "table must be 2-d")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids[(ids < 0) | (ids >= V)][0])
        raise IndexError(f"gather: id {bad} out of range for table with {V} rows")

    def bwd(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("gather", table.values[ids], (table,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    on = x.values > 0
    return _make("relu", np.where(on, x.values, 0.0), (x,), lambda g: (g * on,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _make("sum", np.sum(x.values), (x,), lambda g: (np.full(shape, g),))
    ax = axis % x.ndim
    return _make(
        "sum",
        np.sum(x.values, axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError("concat", ref.shape, t.shape)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.values for t in tensors], axis=ax), tensors, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        y = x.values.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", src, shape) from None
    return _make("reshape", y, (x,), lambda g: (g.reshape(src),))


def _shifted(v: np.ndarray, offset: int, axis: int) -> np.ndarray:
    out = np.zeros_like(v)
    n = v.shape[axis]
    if abs(offset) >= n:
        return out
    dst = [slice(None)] * v.ndim
    src = [slice(None)] * v.ndim
    if offset > 0:
        dst[axis], src[axis] = slice(offset, None), slice(0, n - offset)
    else:
        dst[axis], src[axis] = slice(0, n + offset), slice(-offset, None)
    out[tuple(dst)] = v[tuple(src)]
    return out


def shift(x: Tensor, offset: int, axis: int = 1) -> Tensor:
    """``out[i] = x[i - offset]`` along ``axis``, zero-filled at the edge."""
    ax = axis % x.ndim
    return _make(
        "shift", _shifted(x.values, offset, ax), (x,), lambda g: (_shifted(g, -offset, ax),)
    )


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError("transpose", x.shape, (), "needs at least 2 axes")
    return _make(
        "transpose", np.swapaxes(x.values, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def _softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.values, axis)

    def bwd(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(
        "log_softmax", y, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),)
    )


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over axis 1 of ``x[B, L, d]`` restricted to ``mask[B, L]``."""
    m = np.asarray(mask, dtype=np.float64)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise DimensionError("masked_mean", x.shape, m.shape)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("masked_mean: a row has no unmasked positions")
    w = (m / counts[:, None])[:, :, None]
    return _make("masked_mean", np.sum(x.values * w, axis=1), (x,), lambda g: (g[:, None, :] * w,))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood over the unmasked rows of ``logits[N, K]``."""
    if logits.ndim != 2:
        raise DimensionError("softmax_cross_entropy", logits.shape, (), "logits must be [N, K]")
    N, K = logits.shape
    if K < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (N,):
        raise DimensionError("softmax_cross_entropy", logits.shape, labels.shape)
    m = np.ones(N, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != (N,):
        raise DimensionError("softmax_cross_entropy", logits.shape, m.shape, "mask")
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty loss support")
    lab = np.where(m, labels, 0)
    if np.any((lab < 0) | (lab >= K)):
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(N)
    nll = -logp[rows, lab]
    loss = np.sum(np.where(m, nll, 0.0)) / n

    def bwd(g):
        d = np.exp(logp)
        d[rows, lab] -= 1.0
        d *= (m / n)[:, None]
        return (d * g,)

    return _make("softmax_cross_entropy", loss, (logits,), bwd)


def _check_prob(op: str, P: Tensor, Q: Tensor, delta: float) -> None:
    _check_same(op, P, Q)
    if delta <= 0:
        raise DomainError(f"{op}: smoothing delta must be positive, got {delta}")
    for name, t in (("P", P), ("Q", Q)):
        if np.any(t.values < 0):
            raise DomainError(f"{op}: {name} has negative entries")
        if np.any(np.abs(t.values.sum(axis=-1) - 1.0) > 1e-9):
            raise DomainError(f"{op}: rows of {name} do not sum to 1")


def kl_div(P: Tensor, Q: Tensor, delta: float = DEFAULT_DELTA, mask=None) -> Tensor:
    """Row-averaged ``sum_i P_i log((P_i + delta) / (Q_i + delta))``.

    Rows are the leading axes of ``P``/``Q``; ``mask`` (same shape as those
    axes) restricts which rows enter the average.
    """
    _check_prob("kl_div", P, Q, delta)
    p, q = P.values, Q.values
    rows_shape = p.shape[:-1]
    m = np.ones(rows_shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != rows_shape:
        raise DimensionError("kl_div", p.shape, m.shape, "mask")
    n = m.sum()
    if n == 0:
        raise ValueError("empty loss support")
    w = (m / n)[..., None]
    ratio = np.log((p + delta) / (q + delta))
    value = np.sum(w * p * ratio)

    def bwd(g):
        gp = g * w * (ratio + p / (p + delta))
        gq = -g * w * p / (q + delta)
        return gp, gq

    return _make("kl_div", value, (P, Q), bwd)


def sym_kl_div(P: Tensor, Q: Tensor, delta: float = DEFAULT_DELTA, mask=None) -> Tensor:
    return add(kl_div(P, Q, delta, mask), kl_div(Q, P, delta, mask))


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------


def _recorded_in(t: Tensor, g: Graph | None) -> bool:
    return (
        g is not None
        and t._graph is g
        and t.node_id is not None
        and t.node_id < len(g.nodes)
        and g.nodes[t.node_id].output is t
    )


def backward(root: Tensor, ledger=None) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor that
    requires grad. ``ledger.bp`` is incremented once per call when given."""
    if root.size != 1 or root.ndim != 0:
        raise DimensionError("backward", root.shape, (), "root must be a scalar")
    if ledger is not None:
        ledger.bp += 1
    if not root.requires_grad:
        return
    if root.node_id is None:
        root.grad = (0.0 if root.grad is None else root.grad) + np.ones(())
        return
    g = root._graph
    if not _recorded_in(root, g):
        raise GraphError("backward: the graph holding this tensor has been cleared")
    pending: dict[int, np.ndarray] = {id(root): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(g.nodes[: root.node_id + 1]):
        out = node.output
        grad_out = pending.pop(id(out), None)
        if grad_out is None:
            continue
        out.grad = grad_out.copy() if out.grad is None else out.grad + grad_out
        for t, gi in zip(node.inputs, node.backward(grad_out)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
            pending[key] = gi if key not in pending else pending[key] + gi
            if not _recorded_in(t, g):
                leaves[key] = t
    for key, t in leaves.items():
        gl = pending.pop(key)
        t.grad = gl if t.grad is None else t.grad + gl


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backward() and central differences of ``f``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x0 = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    new_graph()
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        fu = f(Tensor(up.reshape(x0.shape))).item()
        fd = f(Tensor(dn.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (fu - fd) / (2 * h)
    new_graph()
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den)) if x0.size else 0.0
