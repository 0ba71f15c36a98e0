"""Minimal reverse-mode autodiff over numpy arrays.

Every op produces a new :class:`Tensor` whose ``node_id`` is drawn from a
global monotone counter, so sorting reachable nodes by id gives a valid
topological order. :func:`backward` builds that order (a :class:`Tape`),
replays the recorded backward rules in reverse and then marks the graph
consumed.

Two numeric paths are supported: float64 for gradient checks and oracle
tests, float32 for training speed. Ops keep the dtype of their inputs.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "TensorError", "ShapeError", "DegenerateRowError",
    "EmptyLossError", "RankError", "TapeConsumedError", "tensor", "parameter",
    "no_grad", "is_grad_enabled", "matmul", "add", "multiply", "transpose",
    "masked_softmax", "layer_norm", "gelu", "embedding", "concatenate",
    "slice_", "reshape", "mean", "sum_", "max_", "cross_entropy",
    "binary_cross_entropy", "backward", "TOLERANCE",
]

# Per-path tolerances used by tests and the acceptance suite.
TOLERANCE = {np.dtype(np.float64): 1e-10, np.dtype(np.float32): 1e-5}

LN_EPS = 1e-5

_node_ids = itertools.count()
_state = threading.local()


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class DegenerateRowError(TensorError):
    pass


class EmptyLossError(TensorError):
    pass


class RankError(TensorError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "parents",
                 "backward_fn", "consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              op: str) -> Tensor:
    """Wrap ``data`` as the output of a recorded operation.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. Used by the ops below and by fused kernels in other modules.
    """
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_node(ad @ bd, (a, b), bw, "matmul")


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias over the last axis."""
    b = _as_tensor(b, a.dtype)
    if a.shape == b.shape:
        bias = False
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        bias = True
    elif b.ndim == 0:
        bias = None
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if bias is None:
            gb = g.sum()
        elif bias:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        else:
            gb = g
        return g, gb

    return make_node(a.data + b.data, (a, b), bw, "add")


def multiply(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a scalar."""
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_scalar(g):
            return (g * c,)

        return make_node(a.data * c, (a,), bw_scalar, "scale")
    if a.shape != b.shape:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g * bd if a.requires_grad else None,
                g * ad if b.requires_grad else None)

    return make_node(ad * bd, (a, b), bw, "multiply")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise RankError(f"transpose expects a matrix, got shape {a.shape}")
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {scores.shape}")
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("masked_softmax: a row has no permitted entries")
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_node(p, (scores,), bw, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gbias = lead.sum(axis=0)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return make_node(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))

    def bw(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return make_node(xd * cdf, (x,), bw, "gelu")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise RankError("embedding weight must be a matrix")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {weight.shape[0]} rows")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return make_node(weight.data[ids], (weight,), bw, "embedding")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concatenate: nothing to join")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis),
                     tensors, bw, "concatenate")


def slice_(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back."""
    out = x.data[index]
    fancy = not isinstance(index, (slice, int)) and not (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def bw(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return make_node(np.array(out, copy=True), (x,), bw, "slice")


def reshape(x: Tensor, shape) -> Tensor:
    shape_in = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(shape_in),), "reshape")


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return make_node(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return multiply(sum_(x, axis), 1.0 / count)


def max_(x: Tensor, axis: int = 0) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_node(np.squeeze(out, axis=axis), (x,), bw, "max")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over targets that are not ``ignore_index``."""
    if logits.ndim != 2:
        raise RankError(f"cross_entropy expects [n, c] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    c = logits.shape[1]
    if (targets[keep] < 0).any() or (targets[keep] >= c).any():
        raise IndexError(f"cross_entropy: target outside [0, {c})")
    rows = np.nonzero(keep)[0]
    logp = _log_softmax(logits.data[rows])
    picked = logp[np.arange(count), targets[rows]]
    loss = -picked.sum() / count

    def bw(g):
        gl = np.zeros_like(logits.data)
        p = np.exp(logp)
        p[np.arange(count), targets[rows]] -= 1.0
        gl[rows] = p * (g / count)
        return (gl,)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid cross-entropy, computed in the stable softplus form."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"binary_cross_entropy: targets {y.shape} vs logits {logits.shape}")
    z = logits.data
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def bw(g):
        return ((sig - y) * (g / z.size),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw,
                     "binary_cross_entropy")


# --------------------------------------------------------------------------
# tape


@dataclass
class Record:
    node_id: int
    input_ids: tuple[int, ...]
    op: str


@dataclass
class Tape:
    """Recorded operations reachable from a loss, in topological order."""

    records: list[Record] = field(default_factory=list)
    nodes: list[Tensor] = field(default_factory=list, repr=False)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t.parents)
        nodes = sorted((t for t in seen.values() if t.parents), key=lambda t: t.node_id)
        records = [Record(t.node_id, tuple(p.node_id for p in t.parents), t.op)
                   for t in nodes]
        return cls(records, nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls (for minibatch accumulation);
    the graph itself can only be replayed once.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise TapeConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise TensorError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    if any(t.consumed for t in tape.nodes):
        raise TapeConsumedError("graph already consumed by a previous backward()")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            if parent.parents:
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
            else:
                leaves[parent.node_id] = parent
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        node.backward_fn = None
        node.consumed = True
    for leaf in leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
