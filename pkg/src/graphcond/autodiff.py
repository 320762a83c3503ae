"""Dense reverse-mode differentiation over numpy float64 arrays.

Operations applied to tensors that require gradients are appended to the
active :class:`Tape`.  Every adjoint rule is itself written with the same
recorded primitives, so calling :func:`grad` with ``create_graph=True``
records the backward pass on the tape and the resulting gradients can be
differentiated again (:func:`grad2`).

Typical use::

    with Tape():
        w = Tensor(np.ones((3, 2)), requires_grad=True)
        loss = sum_all(relu(matmul(x, w)))
        (gw,) = grad(loss, [w])
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        if isinstance(other, Tensor) and other.data.ndim == 0 and self.data.ndim > 0:
            return mul_scalar(self, other)
        if isinstance(other, Tensor) and self.data.ndim == 0 and other.data.ndim > 0:
            return mul_scalar(other, self)
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape).copy()
    return Tensor(arr)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    fn: Callable[..., np.ndarray]
    vjp: Callable[[Tensor], Sequence[Tensor | None]]
    index: int = -1


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Entering the tape as a context manager makes it the recording target for
    the current thread.  Tapes are not meant to be shared between threads.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def replay(self) -> bool:
        """Re-run every recorded forward function from the current input
        values and report whether all outputs are reproduced bit-exactly."""
        recomputed: dict[int, np.ndarray] = {}
        same = True
        for node in self.nodes:
            args = [recomputed.get(id(t), t.data) for t in node.inputs]
            out = node.fn(*args)
            recomputed[id(node.output)] = out
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                same = False
        return same


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.paused = 0
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    if not stack or _local.paused:
        return None
    return stack[-1]


@contextmanager
def no_record():
    _stack()
    _local.paused += 1
    try:
        yield
    finally:
        _local.paused -= 1


def _apply(op: str, fn, inputs: tuple[Tensor, ...], make_vjp) -> Tensor:
    out = Tensor(fn(*[t.data for t in inputs]))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, fn, make_vjp(out))
        out.node = node
        tape.record(node)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _apply("add", np.add, (a, b), lambda out: lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", lambda a: a * c, (x,), lambda out: lambda g: (scale(g, c),))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply("shift", lambda a: a + c, (x,), lambda out: lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _apply("mul", np.multiply, (a, b), lambda out: lambda g: (mul(g, b), mul(g, a)))


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """``x * s`` where ``s`` is a 0-d tensor."""
    if s.data.ndim != 0:
        raise ShapeError(f"mul_scalar: expected 0-d scalar, got {s.shape}")
    return _apply(
        "mul_scalar",
        np.multiply,
        (x, s),
        lambda out: lambda g: (mul_scalar(g, s), sum_to(mul(g, x), ())),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _apply(
        "matmul",
        np.matmul,
        (a, b),
        lambda out: lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(x: Tensor) -> Tensor:
    return _apply("transpose", lambda a: a.T, (x,), lambda out: lambda g: (transpose(g),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    return _apply("reshape", lambda a: a.reshape(shape), (x,), lambda out: lambda g: (reshape(g, src),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast a scalar, row vector or column vector to a full shape."""
    shape = tuple(shape)
    src = x.shape
    if len(src) not in (0, len(shape)):
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}")
    try:
        np.broadcast_shapes(src, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    return _apply(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        (x,),
        lambda out: lambda g: (sum_to(g, src),),
    )


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (adjoint of :func:`broadcast_to`)."""
    shape = tuple(shape)
    src = x.shape
    if shape == ():
        fn = lambda a: np.asarray(a.sum())
    else:
        if len(shape) != len(src):
            raise ShapeError(f"sum_to: cannot reduce {src} to {shape}")
        axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if t == 1 and s != 1)
        if any(t not in (1, s) for s, t in zip(src, shape)):
            raise ShapeError(f"sum_to: cannot reduce {src} to {shape}")
        fn = lambda a: a.sum(axis=axes, keepdims=True) if axes else a.copy()
    return _apply("sum_to", fn, (x,), lambda out: lambda g: (broadcast_to(g, src),))


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    return _apply("take_rows", lambda a: a[idx], (x,), lambda out: lambda g: (scatter_rows(g, idx, n),))


def scatter_rows(x: Tensor, idx, n: int) -> Tensor:
    """Zero matrix with ``n`` rows; row ``idx[k]`` accumulates ``x[k]``."""
    idx = np.asarray(idx, dtype=np.int64)
    gather = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))

    def fn(a):
        return np.asarray(gather @ a.reshape(len(idx), -1)).reshape((n,) + a.shape[1:])

    return _apply("scatter_rows", fn, (x,), lambda out: lambda g: (take_rows(g, idx),))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_rows: nothing to concatenate")
    if len({t.shape[1:] for t in xs}) != 1:
        raise ShapeError("concat_rows: trailing shapes differ")
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def make(out):
        def vjp(g):
            return tuple(take_rows(g, np.arange(bounds[k], bounds[k + 1])) for k in range(len(xs)))

        return vjp

    return _apply("concat_rows", lambda *arrs: np.concatenate(arrs, axis=0), xs, make)


def sparse_dense_matmul(adj, x: Tensor) -> Tensor:
    """Constant sparse (or dense ndarray) matrix on the left times a tensor."""
    mat = getattr(adj, "matrix", adj)
    if mat.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_dense_matmul: incompatible shapes {mat.shape} @ {x.shape}")
    if sp.issparse(mat):
        fn = lambda a: np.asarray(mat @ a)
    else:
        mat = np.asarray(mat, dtype=np.float64)
        fn = lambda a: mat @ a

    def make(out):
        def vjp(g):
            if hasattr(adj, "transposed"):
                return (sparse_dense_matmul(adj.transposed, g),)
            return (sparse_dense_matmul(mat.T.tocsr() if sp.issparse(mat) else mat.T, g),)

        return vjp

    return _apply("sparse_dense_matmul", fn, (x,), make)


def relu(x: Tensor) -> Tensor:
    # second derivative is taken as zero everywhere, including at the kink
    def make(out):
        mask = Tensor((x.data > 0).astype(np.float64))
        return lambda g: (mul(g, mask),)

    return _apply("relu", lambda a: np.maximum(a, 0.0), (x,), make)


def sigmoid(x: Tensor) -> Tensor:
    def fn(a):
        return 0.5 * (1.0 + np.tanh(0.5 * a))

    return _apply("sigmoid", fn, (x,), lambda out: lambda g: (mul(g, mul(out, shift(scale(out, -1.0), 1.0))),))


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    return _apply(
        "power",
        lambda a: np.power(a, p),
        (x,),
        lambda out: lambda g: (mul(g, scale(power(x, p - 1.0), p)),),
    )


def log(x: Tensor) -> Tensor:
    return _apply("log", np.log, (x,), lambda out: lambda g: (mul(g, power(x, -1.0)),))


def _softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    def make(out):
        def vjp(g):
            inner = broadcast_to(sum_to(mul(g, out), (out.shape[0], 1)), out.shape)
            return (mul(out, add(g, scale(inner, -1.0))),)

        return vjp

    return _apply("softmax_rows", _softmax, (x,), make)


def softmax_cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean cross-entropy over the rows selected by ``mask``.

    ``mask`` may be a boolean vector or an index array; ``None`` uses all rows.
    """
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if mask is None:
        rows = np.arange(n)
    else:
        mask = np.asarray(mask)
        rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if rows.size == 0:
        raise ValueError("softmax_cross_entropy: empty mask")
    weight = np.zeros((n, 1))
    np.add.at(weight, rows, 1.0 / rows.size)
    weight = np.broadcast_to(weight, (n, c)).copy()
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0

    def fn(a):
        z = a - a.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.asarray(-(weight * onehot * logp).sum())

    def make(out):
        w_t = Tensor(weight)
        y_t = Tensor(onehot)

        def vjp(g):
            diff = add(softmax_rows(logits), scale(y_t, -1.0))
            return (mul_scalar(mul(diff, w_t), g),)

        return vjp

    return _apply("softmax_cross_entropy", fn, (logits,), make)


# ---------------------------------------------------------------------------
# composites built from primitives


def sum_all(x: Tensor) -> Tensor:
    return sum_to(x, ())


def row_sum(x: Tensor) -> Tensor:
    return sum_to(x, (x.shape[0], 1))


def col_sum(x: Tensor) -> Tensor:
    return sum_to(x, (1, x.shape[1]))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a ``1 x n`` row vector to every row of ``x``."""
    if b.shape != (1, x.shape[1]):
        raise ShapeError(f"add_bias: bias shape {b.shape} for input {x.shape}")
    return add(x, broadcast_to(b, x.shape))


def mean_squared(a: Tensor, b: Tensor) -> Tensor:
    diff = add(a, scale(b, -1.0))
    return scale(sum_all(mul(diff, diff)), 1.0 / diff.data.size)


def cosine_per_column(ga: Tensor, gb: Tensor) -> Tensor:
    """Sum over columns of the cosine similarity between matching columns.

    A column that is zero in both inputs counts as similarity 1; a column that
    is zero in exactly one input counts as 0.
    """
    if ga.shape != gb.shape or ga.data.ndim != 2:
        raise ShapeError(f"cosine_per_column: shapes {ga.shape} and {gb.shape}")
    ncol = ga.shape[1]
    dot = col_sum(mul(ga, gb))
    na = col_sum(mul(ga, ga))
    nb = col_sum(mul(gb, gb))
    za = na.data == 0.0
    zb = nb.data == 0.0
    guard = Tensor((za | zb).astype(np.float64))
    both = Tensor((za & zb).astype(np.float64))
    cos = add(mul(dot, power(add(mul(na, nb), guard), -0.5)), both)
    return sum_to(cos, ()) if ncol else Tensor(0.0)


# ---------------------------------------------------------------------------
# differentiation


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    seed: Tensor | None = None,
) -> list[Tensor]:
    """Reverse-mode adjoints of a scalar ``output`` w.r.t. the ``wrt`` tensors.

    With ``create_graph`` the backward pass is recorded on the active tape so
    the returned gradients can themselves be differentiated.
    """
    wrt = list(wrt)
    for k, leaf in enumerate(wrt):
        if not leaf.requires_grad:
            raise TapeError(f"grad: input {k} does not require grad and is not on the tape")
    if seed is None:
        if output.data.size != 1:
            raise ShapeError("grad: output must be a scalar when no seed is given")
        seed = Tensor(np.ones_like(output.data))
    zeros = [Tensor(np.zeros_like(leaf.data)) for leaf in wrt]
    if output.node is None:
        return [seed if leaf is output else z for leaf, z in zip(wrt, zeros)]

    tape = active_tape() if create_graph else None
    if create_graph and tape is None:
        raise TapeError("grad: create_graph requires an active tape")
    nodes = _reachable(output)

    adj: dict[int, Tensor] = {id(output): seed}
    ctx = _noop() if create_graph else no_record()
    with ctx:
        for node in reversed(nodes):
            g = adj.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = adj.get(id(inp))
                adj[id(inp)] = gi if prev is None else add(prev, gi)
    return [adj.get(id(leaf), z) for leaf, z in zip(wrt, zeros)]


def grad2(scalar_of_gradients: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Differentiate a scalar built from ``grad(..., create_graph=True)`` outputs."""
    if scalar_of_gradients.node is None:
        raise TapeError("grad2: scalar was not recorded; build it with create_graph=True")
    return grad(scalar_of_gradients, wrt)


@contextmanager
def _noop():
    yield


def _reachable(output: Tensor) -> list[Node]:
    """Nodes that ``output`` depends on, in recording order."""
    seen: set[int] = set()
    found: list[Node] = []
    stack = [output.node]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        found.append(node)
        for inp in node.inputs:
            if inp.node is not None:
                stack.append(inp.node)
    found.sort(key=lambda n: n.index)
    return found


PRIMITIVES = (
    "add", "scale", "shift", "mul", "mul_scalar", "matmul", "transpose", "reshape",
    "broadcast_to", "sum_to", "take_rows", "scatter_rows", "concat_rows",
    "sparse_dense_matmul", "relu", "sigmoid", "power", "log", "softmax_rows",
    "softmax_cross_entropy",
)
