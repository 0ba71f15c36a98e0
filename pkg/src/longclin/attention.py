"""Attention patterns and kernels.

A pattern says which (query, key) pairs may interact. :func:`build_plan`
turns a pattern into a CSR-style :class:`AttendancePlan`. Two kernels
consume plans:

* :func:`full_attention` is the dense reference. It materializes the n x n
  score matrix and is composed entirely from tensor-core primitives.
* :func:`sparse_attention` is a fused op that only touches permitted
  pairs: scores live in a flat [heads, pairs] buffer, softmax runs per row
  segment, and its hand-written backward scatters through the same index
  lists. Score storage and FLOPs are proportional to the pair count.

Every recorded call is reported to any active :func:`track` counter.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Full", "WindowGlobal", "WindowGlobalRandom", "AttentionPattern",
    "AttendancePlan", "PatternError", "build_plan", "count_pairs",
    "brute_force_mask", "full_attention", "sparse_attention", "attend",
    "AttentionStats", "track",
]


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class Full:
    pass


def _check_common(window: int, globals_: tuple[int, ...]) -> tuple[int, ...]:
    if window < 1 or window % 2 == 0:
        raise PatternError(f"window width must be odd and >= 1, got {window}")
    g = tuple(sorted(set(int(i) for i in globals_)))
    if g and g[0] < 0:
        raise PatternError("global positions must be non-negative")
    return g


@dataclass(frozen=True)
class WindowGlobal:
    """Symmetric band of total width ``window`` plus global rows/columns."""

    window: int
    globals: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "globals", _check_common(self.window, self.globals))


@dataclass(frozen=True)
class WindowGlobalRandom:
    """Band + globals + ``random_blocks`` random key blocks per query block.

    A pick (qb, kb) lets every query in block qb attend every key in block
    kb. The transposed tile is not added, so each query row gains at most
    ``random_blocks * block_size`` keys.
    """

    window: int
    globals: tuple[int, ...] = ()
    block_size: int = 64
    random_blocks: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "globals", _check_common(self.window, self.globals))
        if self.block_size < 1:
            raise PatternError(f"block size must be >= 1, got {self.block_size}")
        if self.random_blocks < 0:
            raise PatternError(f"random blocks must be >= 0, got {self.random_blocks}")


AttentionPattern = Full | WindowGlobal | WindowGlobalRandom


@dataclass(frozen=True, eq=False)
class AttendancePlan:
    """Permitted keys per query row in CSR layout (rows sorted, keys sorted)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    rows: np.ndarray = field(repr=False)
    col_order: np.ndarray = field(repr=False)
    col_indptr: np.ndarray = field(repr=False)

    @property
    def total_pairs(self) -> int:
        return int(self.indices.size)

    def row(self, i: int) -> list[int]:
        return self.indices[self.indptr[i]:self.indptr[i + 1]].tolist()

    def dense_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[self.rows, self.indices] = True
        return mask


def _plan_from_keys(n: int, keys: np.ndarray, unique: bool = False) -> AttendancePlan:
    if not unique:
        keys = np.unique(keys)
    rows = keys // n
    cols = keys - rows * n
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    col_order = np.argsort(cols, kind="stable")
    col_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(cols, minlength=n), out=col_indptr[1:])
    for arr in (indptr, cols, rows, col_order, col_indptr):
        arr.flags.writeable = False
    return AttendancePlan(n, indptr, cols, rows, col_order, col_indptr)


def _window_keys(n: int, half: int) -> np.ndarray:
    i = np.arange(n, dtype=np.int64)
    offs = np.arange(-half, half + 1, dtype=np.int64)
    j = i[:, None] + offs[None, :]
    ok = (j >= 0) & (j < n)
    return (i[:, None] * n + j)[ok]


def _global_keys(n: int, g: np.ndarray) -> np.ndarray:
    if g.size == 0:
        return np.zeros(0, dtype=np.int64)
    every = np.arange(n, dtype=np.int64)
    row_keys = (g[:, None] * n + every[None, :]).ravel()
    col_keys = (every[:, None] * n + g[None, :]).ravel()
    return np.concatenate([row_keys, col_keys])


def random_block_pairs(pattern: WindowGlobalRandom, n: int, layer_id: int) -> list[tuple[int, int]]:
    """Query-block -> key-block picks, drawn with a counter-based RNG.

    Each non-global query block draws without replacement from the blocks
    that are neither inside its window nor hold a global token. The Philox
    counter is ``(layer_id, block_row)`` under key ``seed``, so draws are
    reproducible per layer and independent across layers.
    """
    b, half = pattern.block_size, pattern.window // 2
    nb = -(-n // b)
    global_blocks = {p // b for p in pattern.globals}
    picks = []
    for qb in range(nb):
        if qb in global_blocks or pattern.random_blocks == 0:
            continue
        q_lo, q_hi = qb * b, min(n, (qb + 1) * b) - 1
        cands = []
        for kb in range(nb):
            k_lo, k_hi = kb * b, min(n, (kb + 1) * b) - 1
            gap = max(0, k_lo - q_hi, q_lo - k_hi)
            if gap > half and kb not in global_blocks:
                cands.append(kb)
        if not cands:
            continue
        gen = np.random.Generator(np.random.Philox(
            key=pattern.seed, counter=np.array([layer_id, qb, 0, 0], dtype=np.uint64)))
        chosen = gen.choice(len(cands), size=min(pattern.random_blocks, len(cands)),
                            replace=False)
        picks.extend((qb, cands[c]) for c in sorted(chosen.tolist()))
    return picks


def _block_keys(n: int, b: int, qb: int, kb: int) -> np.ndarray:
    qi = np.arange(qb * b, min(n, (qb + 1) * b), dtype=np.int64)
    kj = np.arange(kb * b, min(n, (kb + 1) * b), dtype=np.int64)
    return (qi[:, None] * n + kj[None, :]).ravel()


def build_plan(pattern: AttentionPattern, n: int, layer_id: int = 0) -> AttendancePlan:
    if n < 1:
        raise PatternError(f"sequence length must be >= 1, got {n}")
    if isinstance(pattern, Full):
        return _plan_from_keys(n, np.arange(n * n, dtype=np.int64), unique=True)
    if pattern.globals and pattern.globals[-1] >= n:
        raise PatternError(f"global position {pattern.globals[-1]} outside length {n}")
    if isinstance(pattern, WindowGlobal):
        layer_id = 0   # no layer dependence without random blocks
    return _cached_plan(pattern, n, layer_id)


@lru_cache(maxsize=256)
def _cached_plan(pattern, n: int, layer_id: int) -> AttendancePlan:
    half = pattern.window // 2
    g = np.asarray(pattern.globals, dtype=np.int64)
    parts = [_window_keys(n, half), _global_keys(n, g)]
    if isinstance(pattern, WindowGlobalRandom):
        for qb, kb in random_block_pairs(pattern, n, layer_id):
            parts.append(_block_keys(n, pattern.block_size, qb, kb))
    return _plan_from_keys(n, np.concatenate(parts))


def brute_force_mask(pattern: AttentionPattern, n: int, layer_id: int = 0) -> np.ndarray:
    """Dense boolean mask by direct enumeration of the pattern rules."""
    mask = np.zeros((n, n), dtype=bool)
    if isinstance(pattern, Full):
        mask[:] = True
        return mask
    half = pattern.window // 2
    for i in range(n):
        for j in range(n):
            if abs(i - j) <= half or i in pattern.globals or j in pattern.globals:
                mask[i, j] = True
    if isinstance(pattern, WindowGlobalRandom):
        b = pattern.block_size
        for qb, kb in random_block_pairs(pattern, n, layer_id):
            for i in range(qb * b, min(n, (qb + 1) * b)):
                for j in range(kb * b, min(n, (kb + 1) * b)):
                    mask[i, j] = True
    return mask


def _window_pairs(n: int, half: int) -> int:
    m = min(half, n - 1)
    return n + 2 * (m * n - m * (m + 1) // 2)


def count_pairs(pattern: AttentionPattern, n: int, layer_id: int = 0) -> int:
    """Number of permitted pairs.

    Closed form for Full and WindowGlobal. The random variant has no closed
    form, so it is counted from the plan.
    """
    if isinstance(pattern, Full):
        return n * n
    if pattern.globals and pattern.globals[-1] >= n:
        raise PatternError(f"global position {pattern.globals[-1]} outside length {n}")
    if isinstance(pattern, WindowGlobalRandom):
        return build_plan(pattern, n, layer_id).total_pairs
    half = pattern.window // 2
    g = pattern.globals
    band = _window_pairs(n, half)
    if not g:
        return band
    # |band ∪ R ∪ C| = |band| + |R ∪ C| - |band ∩ (R ∪ C)|
    cross = 2 * len(g) * n - len(g) ** 2
    band_in_row = sum(min(i, half) + min(n - 1 - i, half) + 1 for i in g)
    j = 0
    band_in_gg = 0
    for a in g:   # pairs (a, b) in g x g with |a - b| <= half, two pointers
        while g[j] < a - half:
            j += 1
        k = j
        while k < len(g) and g[k] <= a + half:
            band_in_gg += 1
            k += 1
    overlap = 2 * band_in_row - band_in_gg
    return band + cross - overlap


# --------------------------------------------------------------------------
# instrumentation


@dataclass
class AttentionStats:
    calls: int = 0
    pairs: int = 0
    peak_score_elements: int = 0
    flops: int = 0

    def record(self, pairs: int, score_elements: int, flops: int) -> None:
        self.calls += 1
        self.pairs += pairs
        self.flops += flops
        self.peak_score_elements = max(self.peak_score_elements, score_elements)


_tls = threading.local()


@contextmanager
def track():
    """Collect kernel counters for calls made on this thread inside the block."""
    stats = AttentionStats()
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    stack.append(stats)
    try:
        yield stats
    finally:
        stack.pop()


def _report(pairs: int, score_elements: int, flops: int) -> None:
    for stats in getattr(_tls, "stack", ()):
        stats.record(pairs, score_elements, flops)


# --------------------------------------------------------------------------
# kernels


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[int, int]:
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise T.ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    n, d = q.shape
    if heads < 1 or d % heads:
        raise T.ShapeError(f"attention: dim {d} not divisible by {heads} heads")
    return n, d // heads


def full_attention(q: Tensor, k: Tensor, v: Tensor, plan, heads: int = 1) -> Tensor:
    """Dense masked reference: softmax(q kᵀ / √d_head restricted to plan) v.

    ``plan`` is an :class:`AttendancePlan`, or ``Full()`` for the unmasked
    case (which skips building an n² index list).
    """
    n, dh = _check_qkv(q, k, v, heads)
    if isinstance(plan, Full):
        mask, pairs = np.ones((n, n), dtype=bool), n * n
    else:
        if plan.n != n:
            raise T.ShapeError(f"plan is for length {plan.n}, inputs have {n}")
        mask, pairs = plan.dense_mask(), plan.total_pairs
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = T.slice_(q, cols), T.slice_(k, cols), T.slice_(v, cols)
        scores = T.multiply(T.matmul(qh, T.transpose(kh)), scale)
        outs.append(T.matmul(T.masked_softmax(scores, mask), vh))
    _report(pairs, heads * n * n, 4 * heads * n * n * dh)
    return outs[0] if heads == 1 else T.concatenate(outs, axis=1)


def _segment_sum(x: np.ndarray, starts: np.ndarray) -> np.ndarray:
    # every segment is non-empty (the diagonal is always permitted)
    return np.add.reduceat(x, starts, axis=1)


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, pattern, heads: int = 1,
                     layer_id: int = 0) -> Tensor:
    """Attention over permitted pairs only; matches the masked dense kernel."""
    n, dh = _check_qkv(q, k, v, heads)
    if isinstance(pattern, AttendancePlan):
        plan = pattern
    else:
        if isinstance(pattern, Full):
            raise PatternError("sparse_attention needs a sparse pattern; use full_attention")
        plan = build_plan(pattern, n, layer_id)
    if plan.n != n:
        raise T.ShapeError(f"plan is for length {plan.n}, inputs have {n}")
    rows, cols = plan.rows, plan.indices
    starts = plan.indptr[:-1]
    cstarts = plan.col_indptr[:-1]
    order = plan.col_order
    scale = 1.0 / math.sqrt(dh)

    Q = q.data.reshape(n, heads, dh).transpose(1, 0, 2)
    K = k.data.reshape(n, heads, dh).transpose(1, 0, 2)
    V = v.data.reshape(n, heads, dh).transpose(1, 0, 2)
    Qr = Q[:, rows]
    Kc = K[:, cols]
    s = np.einsum("hpd,hpd->hp", Qr, Kc) * scale
    s -= np.maximum.reduceat(s, starts, axis=1)[:, rows]
    p = np.exp(s)
    p /= _segment_sum(p, starts)[:, rows]
    Vc = V[:, cols]
    out = _segment_sum(p[..., None] * Vc, starts)
    _report(plan.total_pairs, heads * plan.total_pairs, 4 * heads * plan.total_pairs * dh)
    del s

    def bw(g):
        G = g.reshape(n, heads, dh).transpose(1, 0, 2)
        Gr = G[:, rows]
        dp = np.einsum("hpd,hpd->hp", Gr, Vc)
        row_dot = np.einsum("hnd,hnd->hn", G, out)
        ds = p * (dp - row_dot[:, rows]) * scale
        dQ = _segment_sum(ds[..., None] * Kc, starts)
        dK = np.add.reduceat((ds[..., None] * Qr)[:, order], cstarts, axis=1)
        dV = np.add.reduceat((p[..., None] * Gr)[:, order], cstarts, axis=1)

        def merge(x):
            return x.transpose(1, 0, 2).reshape(n, heads * dh)

        return merge(dQ), merge(dK), merge(dV)

    return T.make_node(out.transpose(1, 0, 2).reshape(n, heads * dh), (q, k, v), bw,
                       "sparse_attention")


def attend(q: Tensor, k: Tensor, v: Tensor, pattern, heads: int = 1,
           layer_id: int = 0) -> Tensor:
    """Dispatch on the pattern: dense reference for Full, fused kernel otherwise."""
    if isinstance(pattern, Full):
        return full_attention(q, k, v, pattern, heads)
    return sparse_attention(q, k, v, pattern, heads, layer_id)
