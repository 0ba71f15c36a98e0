"""Bidirectional pre-norm transformer encoder and task heads."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import Full, WindowGlobal, WindowGlobalRandom, attend
from .tensor import Tensor

PATTERN_KINDS = ("full", "window-global", "window-global-random")
LONG_MAX_POSITIONS = 4096
SHORT_MAX_POSITIONS = 512
DEFAULT_MAX_ANSWER_LEN = 30
MULTILABEL_THRESHOLD = 0.5


class LengthError(ValueError):
    pass


class NoAnswerError(ValueError):
    pass


@dataclass
class AttentionSpec:
    """Pattern family for every layer; global positions come per input."""

    kind: str = "window-global"
    window: int = 33
    block_size: int = 64
    random_blocks: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {PATTERN_KINDS}")

    def pattern(self, global_positions=()):
        if self.kind == "full":
            return Full()
        if self.kind == "window-global":
            return WindowGlobal(self.window, tuple(global_positions))
        return WindowGlobalRandom(self.window, tuple(global_positions), self.block_size,
                                  self.random_blocks, self.seed)


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    dim: int = 128
    ffn_dim: int = 512
    max_positions: int = LONG_MAX_POSITIONS
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    dropout: float = 0.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionSpec(**self.attention)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal_table(positions: int, dim: int) -> np.ndarray:
    pos = np.arange(positions)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_encoder_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights; position table starts from sinusoids."""
    rng = np.random.default_rng([cfg.seed, 0])
    d, f = cfg.dim, cfg.ffn_dim
    dt = cfg.np_dtype

    def normal(*shape):
        return (0.02 * rng.standard_normal(shape)).astype(dt)

    p = {
        "embed.tokens": normal(cfg.vocab_size, d),
        "embed.positions": (0.1 * sinusoidal_table(cfg.max_positions, d)).astype(dt),
    }
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        for name in ("ln1", "ln2"):
            p[pre + name + ".gain"] = np.ones(d, dt)
            p[pre + name + ".bias"] = np.zeros(d, dt)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = normal(d, d)
            p[pre + "attn.b" + name[1]] = np.zeros(d, dt)
        p[pre + "ffn.w1"] = normal(d, f)
        p[pre + "ffn.b1"] = np.zeros(f, dt)
        p[pre + "ffn.w2"] = normal(f, d)
        p[pre + "ffn.b2"] = np.zeros(d, dt)
    p["final_ln.gain"] = np.ones(d, dt)
    p["final_ln.bias"] = np.zeros(d, dt)
    return p


HEAD_KINDS = ("mlm", "token-cls", "span", "seq-cls")


def init_head_params(cfg: ModelConfig, kind: str, num_labels: int = 0,
                     seed: int = 0) -> dict[str, np.ndarray]:
    out_dim = {"mlm": cfg.vocab_size, "span": 2}.get(kind, num_labels)
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {kind!r}")
    if out_dim < 1:
        raise ValueError(f"head {kind!r} needs num_labels >= 1")
    rng = np.random.default_rng([cfg.seed, 1, seed, HEAD_KINDS.index(kind)])
    dt = cfg.np_dtype
    return {
        f"head.{kind}.weight": (0.02 * rng.standard_normal((cfg.dim, out_dim))).astype(dt),
        f"head.{kind}.bias": np.zeros(out_dim, dt),
    }


class Model:
    """Encoder parameters plus any attached heads, as named leaf tensors."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        arrays = init_encoder_params(cfg) if params is None else params
        self.params: dict[str, Tensor] = {
            k: T.parameter(np.array(v, dtype=cfg.np_dtype, copy=True)) for k, v in arrays.items()}
        self.training = False
        self._dropout_rng = None

    # ------------------------------------------------------------- params
    def add_head(self, kind: str, num_labels: int = 0, seed: int = 0) -> None:
        for k, v in init_head_params(self.cfg, kind, num_labels, seed).items():
            self.params[k] = T.parameter(v)

    def has_head(self, kind: str) -> bool:
        return f"head.{kind}.weight" in self.params

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k] = T.parameter(np.array(v, dtype=self.cfg.np_dtype, copy=True))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # ------------------------------------------------------------ forward
    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return T.add(T.matmul(x, self.params[w]), self.params[b])

    def _dropout(self, x: Tensor) -> Tensor:
        rate = self.cfg.dropout
        if not self.training or rate == 0.0:
            return x
        keep = self._dropout_rng.random(x.shape) >= rate
        return T.multiply(x, T.tensor((keep / (1.0 - rate)).astype(x.dtype)))

    def set_dropout_seed(self, seed) -> None:
        self._dropout_rng = np.random.default_rng(seed)

    def encode(self, ids, global_positions=()) -> Tensor:
        """Hidden states [n, dim] for one sequence."""
        cfg, p = self.cfg, self.params
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[0]
        if n > cfg.max_positions:
            raise LengthError(f"input of {n} tokens exceeds max_positions={cfg.max_positions}")
        if n == 0:
            raise LengthError("empty input")
        x = T.add(T.embedding(p["embed.tokens"], ids),
                  T.slice_(p["embed.positions"], slice(0, n)))
        x = self._dropout(x)
        heads = cfg.heads
        for i in range(cfg.layers):
            pre = f"layers.{i}."
            h = T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            q = self._linear(h, pre + "attn.wq", pre + "attn.bq")
            k = self._linear(h, pre + "attn.wk", pre + "attn.bk")
            v = self._linear(h, pre + "attn.wv", pre + "attn.bv")
            pattern = cfg.attention.pattern(global_positions)
            a = attend(q, k, v, pattern, heads=heads, layer_id=i)
            x = T.add(x, self._dropout(self._linear(a, pre + "attn.wo", pre + "attn.bo")))
            h = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            h = T.gelu(self._linear(h, pre + "ffn.w1", pre + "ffn.b1"))
            x = T.add(x, self._dropout(self._linear(h, pre + "ffn.w2", pre + "ffn.b2")))
        return T.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])

    # -------------------------------------------------------------- heads
    def _head(self, kind: str, x: Tensor) -> Tensor:
        return self._linear(x, f"head.{kind}.weight", f"head.{kind}.bias")

    def mlm_head(self, hidden: Tensor, positions=None) -> Tensor:
        """Vocabulary logits, optionally only at ``positions`` (saves n x V work)."""
        if positions is not None:
            hidden = T.slice_(hidden, np.asarray(positions, dtype=np.int64))
        return self._head("mlm", hidden)

    def token_cls_head(self, hidden: Tensor) -> Tensor:
        return self._head("token-cls", hidden)

    def span_logits(self, hidden: Tensor) -> Tensor:
        """[2, n]: row 0 start scores, row 1 end scores."""
        return T.transpose(self._head("span", hidden))

    def span_head(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        both = self.span_logits(hidden)
        return T.slice_(both, 0), T.slice_(both, 1)

    def seq_cls_logits(self, hidden: Tensor) -> Tensor:
        """[1, C] logits read from the CLS position."""
        return self._head("seq-cls", T.slice_(hidden, slice(0, 1)))

    def seq_cls_head(self, hidden: Tensor) -> Tensor:
        return T.slice_(self.seq_cls_logits(hidden), 0)

    def pooled_seq_cls_logits(self, snippet_hiddens, pool: str = "mean") -> Tensor:
        """[1, C] logits from CLS vectors pooled across snippets."""
        if not snippet_hiddens:
            raise ValueError("pooled_seq_cls needs at least one snippet")
        cls_rows = T.concatenate([T.slice_(h, slice(0, 1)) for h in snippet_hiddens], axis=0)
        if pool == "mean":
            pooled = T.mean(cls_rows, axis=0)
        elif pool == "max":
            pooled = T.max_(cls_rows, axis=0)
        else:
            raise ValueError(f"unknown pool {pool!r}; expected 'mean' or 'max'")
        return self._head("seq-cls", T.reshape(pooled, (1, -1)))

    def pooled_seq_cls(self, snippet_hiddens, pool: str = "mean") -> Tensor:
        return T.slice_(self.pooled_seq_cls_logits(snippet_hiddens, pool), 0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_span(start_logits, end_logits, max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
                allowed=None) -> tuple[int, int]:
    """Best (s, e) with s <= e < s + max_answer_len by start[s] + end[e].

    Positions where ``allowed`` is False (specials, question tokens) can be
    neither start nor end. Ties go to the smallest s, then the smallest e.
    """
    start = np.asarray(start_logits, dtype=np.float64)
    end = np.asarray(end_logits, dtype=np.float64)
    if start.shape != end.shape or start.ndim != 1:
        raise ValueError(f"start/end logits must be equal-length vectors, "
                         f"got {start.shape} and {end.shape}")
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    n = start.shape[0]
    ok = np.ones(n, dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool)
    width = min(max_answer_len, n)
    e_idx = np.arange(n)[:, None] + np.arange(width)[None, :]
    inside = e_idx < n
    e_idx = np.where(inside, e_idx, 0)
    scores = start[:, None] + end[e_idx]
    valid = inside & ok[:, None] & ok[e_idx]
    if not valid.any():
        raise NoAnswerError("no admissible answer span")
    scores = np.where(valid, scores, -np.inf)
    flat = int(np.argmax(scores))
    s, k = divmod(flat, width)
    return s, s + k


def extend_positions(params: dict[str, np.ndarray], new_max: int,
                     source_rows: int = SHORT_MAX_POSITIONS) -> dict[str, np.ndarray]:
    """Grow the position table by cycling its first ``source_rows`` rows."""
    table = params["embed.positions"]
    old = table.shape[0]
    if new_max <= old:
        return dict(params)
    src = table[:min(source_rows, old)]
    reps = np.arange(old, new_max) % src.shape[0]
    out = dict(params)
    out["embed.positions"] = np.concatenate([table, src[reps]], axis=0)
    return out


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"LCECKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def to_model(self) -> Model:
        return Model(self.config, self.params)

    @classmethod
    def from_model(cls, model: Model, **kw) -> "Checkpoint":
        return cls(replace(model.cfg), model.state(), **kw)

    def save(self, path) -> None:
        arrays = [("param", k, v) for k, v in self.params.items()]
        arrays += [("optim", k, v) for k, v in self.optimizer.items()]
        header = {
            "config": self.config.to_dict(),
            "step": self.step,
            "rng_state": self.rng_state,
            "meta": self.meta,
            "tensors": [{"group": g, "name": k, "dtype": str(v.dtype)} for g, k, v in arrays],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            for _, _, v in arrays:
                arr = np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<"))
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<IQ", data, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 8 + struct.calcsize("<IQ")
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        params, optim = {}, {}
        for entry in header["tensors"]:
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            count = math.prod(shape)
            arr = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(shape)
            pos += count * dt.itemsize
            target = params if entry["group"] == "param" else optim
            target[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        return cls(ModelConfig.from_dict(header["config"]), params, header["step"],
                   header["rng_state"], header["meta"], optim)
