"""Dense float64 tensors, seeded random streams and a small reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Operations in
this module accept either arrays or :class:`Var` handles; when any input is a
``Var`` the operation is recorded on that variable's :class:`Graph` so that
:func:`backward` can later produce exact gradients.

The operation set is deliberately closed: matmul, element-wise mul/add/sub,
PReLU, concatenation, channel sum, framing, overlap-add, total sum, constant
scaling and the negative-SDR loss. Nothing else is differentiable here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Graph",
    "Var",
    "make_rng",
    "derive_rng",
    "as_tensor",
    "matmul",
    "ewise",
    "concat",
    "sum_channels",
    "total",
    "scale",
    "frame",
    "overlap_add",
    "sdr_loss",
    "backward",
    "grad_check",
]

LN10 = np.log(10.0)


class NumericalError(ArithmeticError):
    """Raised when an operation produces NaN/Inf or receives bad shapes."""


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seed gives an identical stream on any platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Independent child stream for item ``index`` of a run seeded with ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    _check_finite(arr, "input")
    return arr


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {where}")


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    fwd: Callable[..., np.ndarray] | None = None
    bwd: Callable[..., tuple[np.ndarray, ...]] | None = None
    trainable: bool = False
    name: str | None = None


@dataclass
class Graph:
    """Append-only record of operations; node ids are topologically ordered."""

    nodes: list[_Node] = field(default_factory=list)

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> "Var":
        arr = as_tensor(value).copy()
        self.nodes.append(_Node("leaf", (), arr, trainable=trainable, name=name))
        return Var(self, len(self.nodes) - 1)

    def _record(self, op, inputs, fwd, bwd) -> "Var":
        vals = [self.nodes[i].value for i in inputs]
        with np.errstate(over="ignore", invalid="ignore"):
            out = fwd(*vals)
        _check_finite(out, op)
        self.nodes.append(_Node(op, tuple(inputs), out, fwd, bwd))
        return Var(self, len(self.nodes) - 1)

    def value(self, node: int | "Var") -> np.ndarray:
        return self.nodes[_id(node)].value

    def trainable_leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf" and n.trainable]

    def set_leaf(self, node: int | "Var", value) -> None:
        """Replace a leaf value and recompute every node that depends on it."""
        idx = _id(node)
        if self.nodes[idx].op != "leaf":
            raise ValueError(f"node {idx} is not a leaf")
        self.nodes[idx].value = as_tensor(value).copy()
        self.replay(start=idx + 1)

    def replay(self, start: int = 0) -> None:
        for n in self.nodes[start:]:
            if n.op == "leaf":
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                n.value = n.fwd(*(self.nodes[i].value for i in n.inputs))
            _check_finite(n.value, n.op)


@dataclass(frozen=True)
class Var:
    """Handle to a node on a :class:`Graph`."""

    graph: Graph
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __mul__(self, other):
        return ewise("mul", self, other)

    def __rmul__(self, other):
        return ewise("mul", other, self)

    def __add__(self, other):
        return ewise("add", self, other)

    def __radd__(self, other):
        return ewise("add", other, self)

    def __sub__(self, other):
        return ewise("sub", self, other)

    def __rsub__(self, other):
        return ewise("sub", other, self)


def _id(node) -> int:
    return node.id if isinstance(node, Var) else int(node)


def _graph_of(args) -> Graph | None:
    graph = None
    for a in args:
        if isinstance(a, Var):
            if graph is not None and a.graph is not graph:
                raise ValueError("operands belong to different graphs")
            graph = a.graph
    return graph


def _apply(op: str, args: Sequence, fwd, bwd):
    """Run ``fwd`` eagerly on arrays, or record it when any arg is a Var."""
    graph = _graph_of(args)
    if graph is None:
        with np.errstate(over="ignore", invalid="ignore"):
            out = fwd(*(as_tensor(a) for a in args))
        _check_finite(out, op)
        return out
    ids = [a.id if isinstance(a, Var) else graph.leaf(a).id for a in args]
    return graph._record(op, ids, fwd, bwd)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _shape(a) -> tuple[int, ...]:
    return a.shape if isinstance(a, Var) else np.shape(a)


def matmul(a, b):
    """Matrix product of a (p, q) and a (q, r) tensor."""
    sa, sb = _shape(a), _shape(b)
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise NumericalError(f"matmul shape mismatch: {sa} @ {sb}")
    return _apply(
        "matmul",
        (a, b),
        lambda x, y: x @ y,
        lambda g, x, y, out: (g @ y.T, x.T @ g),
    )


def _prelu_bwd(g, x, alpha, out):
    neg = x <= 0
    gx = np.where(neg, g * alpha, g)
    galpha = np.sum(np.where(neg, g * x, 0.0)).reshape(np.shape(alpha))
    return gx, galpha


_EWISE = {
    "mul": (lambda x, y: x * y, lambda g, x, y, out: (g * y, g * x)),
    "add": (lambda x, y: x + y, lambda g, x, y, out: (g, g)),
    "sub": (lambda x, y: x - y, lambda g, x, y, out: (g, -g)),
    "prelu": (lambda x, alpha: np.where(x > 0, x, alpha * x), _prelu_bwd),
}


def ewise(op: str, a, b=None, *, alpha=None):
    """Element-wise ``mul``, ``add``, ``sub`` or ``prelu``.

    Binary ops need equal shapes. ``prelu`` takes ``alpha`` as a scalar (float,
    0-d/1-element array or Var) and is applied to ``a``.
    """
    if op not in _EWISE:
        raise ValueError(f"unknown element-wise op {op!r}")
    fwd, bwd = _EWISE[op]
    if op == "prelu":
        if alpha is None:
            raise ValueError("prelu needs alpha")
        if int(np.prod(_shape(alpha))) != 1:
            raise NumericalError("prelu alpha must be a single scalar")
        return _apply("prelu", (a, alpha), fwd, bwd)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    if _shape(a) != _shape(b):
        raise NumericalError(f"{op} shape mismatch: {_shape(a)} vs {_shape(b)}")
    return _apply(op, (a, b), fwd, bwd)


def concat(parts: Sequence, axis: int = 0):
    """Concatenate 2-D tensors along ``axis``."""
    sizes = [_shape(p)[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, *vals):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", tuple(parts), lambda *v: np.concatenate(v, axis=axis), bwd)


def sum_channels(parts: Sequence):
    """Sum equally shaped tensors, accumulating in ascending index order."""
    shapes = {_shape(p) for p in parts}
    if len(shapes) != 1:
        raise NumericalError(f"sum_channels shape mismatch: {sorted(shapes)}")

    def fwd(*vals):
        acc = vals[0].copy()
        for v in vals[1:]:
            acc = acc + v
        return acc

    return _apply("sum_channels", tuple(parts), fwd, lambda g, *vals: (g,) * (len(vals) - 1))


def total(a):
    """Sum of all entries, returned as a 0-d tensor."""
    return _apply(
        "total",
        (a,),
        lambda x: np.asarray(np.sum(x)),
        lambda g, x, out: (np.full_like(x, float(g)),),
    )


def scale(a, c: float):
    """Multiply by a constant scalar."""
    c = float(c)
    return _apply("scale", (a,), lambda x: c * x, lambda g, x, out: (c * g,))


def _frame_fwd(x, T, hop, n_frames):
    padded = np.zeros((n_frames - 1) * hop + T)
    padded[: x.shape[-1]] = x
    idx = np.arange(T)[:, None] + hop * np.arange(n_frames)[None, :]
    return padded[idx]


def _ola_fwd(frames, hop, length, batch):
    T, total_n = frames.shape
    n = total_n // batch
    out = np.zeros((batch, (n - 1) * hop + T))
    for b in range(batch):
        blk = frames[:, b * n:(b + 1) * n]
        for j in range(n):
            out[b, j * hop:j * hop + T] += blk[:, j]
    out = out[:, :length]
    return out[0] if batch == 1 else out


def _ola_bwd(g, T, hop, n):
    g = np.atleast_2d(g)
    return np.concatenate([_frame_fwd(row, T, hop, n) for row in g], axis=1)


def frame(x, T: int, hop: int):
    """Slice a 1-D signal into a (T, N) matrix of hop-spaced, zero-padded frames."""
    length = _shape(x)[-1]
    n_frames = -(-max(length - T, 0) // hop) + 1
    return _apply(
        "frame",
        (x,),
        lambda v: _frame_fwd(v, T, hop, n_frames),
        lambda g, v, out: (_ola_fwd(g, hop, length, 1),),
    )


def overlap_add(frames, hop: int, length: int, batch: int = 1):
    """Overlap-add a (T, batch*N) frame matrix into ``batch`` signals of ``length``.

    Columns ``b*N .. (b+1)*N`` belong to signal ``b``. Returns shape (length,)
    when ``batch == 1`` and (batch, length) otherwise.
    """
    T, total_n = _shape(frames)
    if total_n % batch:
        raise NumericalError(f"{total_n} frames do not split into {batch} signals")
    n = total_n // batch
    if length > (n - 1) * hop + T:
        raise NumericalError(f"length {length} exceeds frame support")
    return _apply(
        "overlap_add",
        (frames,),
        lambda f: _ola_fwd(f, hop, length, batch),
        lambda g, f, out: (_ola_bwd(g, T, hop, n),),
    )


def _sdr_terms(est, ref, delta):
    err = ref - est
    num = np.sum(ref * ref, axis=-1)
    den = np.sum(err * err, axis=-1) + delta
    return err, num, den


def sdr_loss(est, ref, delta: float = 1e-9):
    """Negative SDR in dB, ``-10 log10(sum(ref^2) / (sum((ref-est)^2) + delta))``.

    For 2-D inputs each row is one signal and the loss is averaged over rows.
    """
    if _shape(est) != _shape(ref):
        raise NumericalError(f"sdr_loss shape mismatch: {_shape(est)} vs {_shape(ref)}")
    ref_energy = np.sum(np.square(ref.value if isinstance(ref, Var) else np.asarray(ref)), axis=-1)
    if np.any(ref_energy == 0):
        raise NumericalError("sdr_loss: all-zero reference")

    def fwd(e, r):
        _, num, den = _sdr_terms(e, r, delta)
        return np.asarray(np.mean(-10.0 * np.log10(num / den)))

    def bwd(g, e, r, out):
        err, num, den = _sdr_terms(e, r, delta)
        rows = 1 if e.ndim == 1 else e.shape[0]
        k = float(g) * 10.0 / LN10 / rows
        d_den = (k / den)[..., None] if e.ndim > 1 else k / den
        d_num = (k / num)[..., None] if e.ndim > 1 else k / num
        ge = -2.0 * err * d_den
        gr = 2.0 * err * d_den - 2.0 * r * d_num
        return ge, gr

    return _apply("sdr_loss", (est, ref), fwd, bwd)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def backward(graph: Graph, loss) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` node.

    Returns a mapping from node id to gradient for every node that feeds the
    loss, plus zero gradients for trainable leaves that do not.
    """
    loss_id = _id(loss)
    if graph.nodes[loss_id].value.size != 1:
        raise NumericalError(f"loss node {loss_id} is not scalar: {graph.nodes[loss_id].value.shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones_like(graph.nodes[loss_id].value)}
    for idx in range(loss_id, -1, -1):
        g = grads.get(idx)
        node = graph.nodes[idx]
        if g is None or node.op == "leaf":
            continue
        vals = [graph.nodes[i].value for i in node.inputs]
        for src, gi in zip(node.inputs, node.bwd(g, *vals, node.value)):
            gi = np.asarray(gi, dtype=np.float64).reshape(graph.nodes[src].value.shape)
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    for idx in graph.trainable_leaves():
        grads.setdefault(idx, np.zeros_like(graph.nodes[idx].value))
    return grads


def grad_check(graph: Graph, leaf, eps: float = 1e-5, loss=None, analytic=None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``loss`` defaults to the last node on the graph. ``analytic`` overrides the
    gradient under test (useful to confirm the checker catches bad gradients).
    The leaf value is restored before returning.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf_id = _id(leaf)
    loss_id = len(graph.nodes) - 1 if loss is None else _id(loss)
    if analytic is None:
        analytic = backward(graph, loss_id)[leaf_id]
    analytic = np.asarray(analytic, dtype=np.float64)
    original = graph.nodes[leaf_id].value.copy()
    work = original.copy()
    flat = work.reshape(-1)
    numeric = np.empty(flat.size)
    node = graph.nodes[leaf_id]
    try:
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + eps
            node.value = work
            graph.replay(leaf_id + 1)
            up = float(graph.nodes[loss_id].value)
            flat[i] = x0 - eps
            graph.replay(leaf_id + 1)
            down = float(graph.nodes[loss_id].value)
            flat[i] = x0
            numeric[i] = (up - down) / (2.0 * eps)
    finally:
        node.value = original
        graph.replay(leaf_id + 1)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
