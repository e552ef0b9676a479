"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every primitive applied while a :class:`Tape`
is active, and with at least one differentiable input, is appended to that
tape together with its vector-Jacobian product.  Outside a tape, primitives
still compute values but record nothing, which is how forward-only Monte
Carlo runs avoid the bookkeeping cost.

    >>> x = Node([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    ...     tape.backward(y)
    >>> x.grad
    array([2., 4., 6.])

Arrays carry arbitrary leading batch axes; binary operations follow numpy
broadcasting and reduce adjoints back to the operand shapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "Tape", "ShapeError", "NotPositiveDefiniteError",
    "as_node", "constant", "add", "sub", "mul", "div", "neg", "matmul",
    "transpose", "tanh", "exp", "log", "square", "sqrt", "sum", "mean",
    "logsumexp", "reshape", "concat", "stack", "outer", "cholesky",
    "triangular_solve", "diagonal", "where", "take", "gather_rows",
    "value_and_grad", "finite_diff_check",
]


class ShapeError(ValueError):
    """Operands whose shapes do not conform to the primitive."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorisation failed; callers may add jitter and retry."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one objective evaluation.

    Tapes are thread-local and may be nested; the innermost active tape
    receives new records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: "Node") -> None:
        """Populate ``.grad`` of every differentiable node reachable from ``root``.

        Nodes (recorded or leaf) that do not influence ``root`` receive a zero
        adjoint of their own shape.
        """
        if root.value.shape != ():
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        leaves: dict[int, Node] = {}
        for node in self.nodes:
            node.grad = None
            for p in node._parents:
                if p.requires_grad and p._vjp is None:
                    leaves[id(p)] = p
        for leaf in leaves.values():
            leaf.grad = None

        adjoint: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
        if root._vjp is None and root.requires_grad:
            root.grad = adjoint[id(root)]
        for node in reversed(self.nodes):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._vjp is None:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
                elif key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
        for leaf in leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_vjp", "tape_id")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Node, ...] = ()
        self._vjp: Callable | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Node({self.value!r}{flag})"

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Node":
        return Node(self.value)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return take(self, index)

    @property
    def mT(self) -> "Node":
        return transpose(self)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def _make(value: np.ndarray, parents: Sequence[Node], vjp: Callable) -> Node:
    out = Node(value)
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = tuple(parents)
    out._vjp = vjp
    out.tape_id = id(tape)
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Node, b: Node, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,))


def log(a) -> Node:
    a = as_node(a)
    v = a.value
    return _make(np.log(v), (a,), lambda g: (g / v,))


def square(a) -> Node:
    a = as_node(a)
    v = a.value
    return _make(v * v, (a,), lambda g: (2.0 * g * v,))


def sqrt(a) -> Node:
    a = as_node(a)
    s = np.sqrt(a.value)
    return _make(s, (a,), lambda g: (0.5 * g / s,))


def where(cond, a, b) -> Node:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is not differentiated."""
    a, b = as_node(a), as_node(b)
    c = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(c, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(c, g, 0.0), sa),
                            _unbroadcast(np.where(c, 0.0, g), sb)))


# ----------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axes, keepdims) / float(count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    """Max-shifted log-sum-exp over one axis."""
    a = as_node(a)
    v = a.value
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(v - s),)

    return _make(out, (a,), vjp)


# -------------------------------------------------------------------- shaping

def reshape(a, shape) -> Node:
    a = as_node(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = as_node(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {a.shape}")
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def take(a, index) -> Node:
    """Basic or advanced indexing, ``a[index]``."""
    a = as_node(a)
    src = a.shape

    basic = _is_basic_index(index)

    def vjp(g):
        out = np.zeros(src)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), vjp)


def gather_rows(a, idx: np.ndarray) -> Node:
    """Select along axis -2 per batch: ``out[..., i, :] = a[..., idx[..., i], :]``.

    Used to copy particles by ancestor index; ``idx`` is not differentiated.
    """
    a = as_node(a)
    idx = np.asarray(idx)
    src = a.shape
    full = np.broadcast_to(idx[..., None], idx.shape + (src[-1],))

    def vjp(g):
        n_src, d = src[-2], src[-1]
        batch = int(np.prod(src[:-2], dtype=int))
        offs = (np.arange(batch) * n_src)[:, None]
        rows = (idx.reshape(batch, -1) + offs).reshape(-1)
        out = np.zeros((batch * n_src, d))
        np.add.at(out, rows, g.reshape(-1, d))
        return (out.reshape(src),)

    return _make(np.take_along_axis(a.value, full, axis=-2), (a,), vjp)


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    ax = axis % vals[0].ndim
    sizes = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=ax))

    try:
        out = np.concatenate(vals, axis=ax)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    return _make(out, nodes, vjp)


def stack(nodes: Iterable, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(nodes)))

    return _make(out, nodes, vjp)


# ------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul does not accept scalars")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform") from None
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv

    def vjp(g):
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if av.ndim == 1:
            ga = ga[..., 0, :]
        if bv.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), vjp)


def outer(a, b) -> Node:
    """Batched outer product of the last axes: ``out[..., i, j] = a[..., i] b[..., j]``."""
    a, b = as_node(a), as_node(b)
    return mul(reshape(a, a.shape + (1,)), reshape(b, b.shape[:-1] + (1, b.shape[-1])))


def diagonal(a) -> Node:
    """Diagonal of the last two axes."""
    a = as_node(a)
    src = a.shape
    n = min(src[-2], src[-1])

    def vjp(g):
        out = np.zeros(src)
        idx = np.arange(n)
        out[..., idx, idx] = g
        return (out,)

    return _make(np.diagonal(a.value, axis1=-2, axis2=-1).copy(), (a,), vjp)


def _solve_tri(A: np.ndarray, B: np.ndarray, lower: bool) -> np.ndarray:
    # triangular systems are tiny here; the batched general solver is exact enough
    return np.linalg.solve(A, B)


def cholesky(a) -> Node:
    """Lower Cholesky factor of a (batch of) symmetric positive-definite matrices.

    The adjoint is the symmetric one: perturbing ``A[i, j]`` and ``A[j, i]``
    together moves the output by ``grad[i, j] + grad[j, i]``.
    """
    a = as_node(a)
    v = a.value
    if v.ndim < 2 or v.shape[-1] != v.shape[-2]:
        raise ShapeError(f"cholesky needs square matrices, got {v.shape}")
    try:
        L = np.linalg.cholesky(v)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError(f"matrix not positive definite: {err}") from None
    if not np.all(np.isfinite(L)):
        raise NotPositiveDefiniteError("matrix not positive definite (non-finite factor)")
    n = v.shape[-1]
    eye = np.eye(n)

    def vjp(g):
        phi = np.tril(np.swapaxes(L, -1, -2) @ g)
        phi = phi - 0.5 * phi * eye
        Linv = _solve_tri(L, np.broadcast_to(eye, L.shape), True)
        ga = np.swapaxes(Linv, -1, -2) @ phi @ Linv
        return (0.5 * (ga + np.swapaxes(ga, -1, -2)),)

    return _make(L, (a,), vjp)


def triangular_solve(A, B, lower: bool = True) -> Node:
    """Solve ``A X = B`` for triangular ``A`` (batched over leading axes)."""
    A, B = as_node(A), as_node(B)
    av, bv = A.value, B.value
    if av.shape[-1] != av.shape[-2] or bv.ndim < 2 or bv.shape[-2] != av.shape[-1]:
        raise ShapeError(f"triangular_solve: shapes {av.shape} and {bv.shape} do not conform")
    X = _solve_tri(av, bv, lower)
    mask = np.tril if lower else np.triu

    def vjp(g):
        gb = _solve_tri(np.swapaxes(av, -1, -2), g, not lower)
        ga = mask(-(gb @ np.swapaxes(X, -1, -2)))
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(X, (A, B), vjp)


# ---------------------------------------------------------------- utilities

def value_and_grad(f: Callable[[Node], Node], point) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``f`` at ``point`` and its gradient with respect to it."""
    x = Node(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(x)
        tape.backward(y)
    return float(y.value), x.grad


def finite_diff_check(f: Callable[[Node], Node], point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` must be deterministic (fix any RNG seed inside it).  The error per
    coordinate is ``|analytic - fd| / (|fd| + 1e-8)``.
    """
    point = np.array(point, dtype=np.float64, copy=True)
    _, analytic = value_and_grad(f, point)
    flat = point.reshape(-1)
    fd = np.empty(flat.size)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = float(f(Node(point.copy())).value)
        flat[k] = orig - step
        lo = float(f(Node(point.copy())).value)
        flat[k] = orig
        fd[k] = (hi - lo) / (2.0 * step)
    err = np.abs(analytic.reshape(-1) - fd) / (np.abs(fd) + 1e-8)
    return float(err.max()) if err.size else 0.0
