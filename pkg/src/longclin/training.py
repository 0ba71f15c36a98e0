"""MLM pre-training and task fine-tuning loops.

All randomness is drawn from stateless generators keyed on
``(seed, purpose, step, ...)``, so a run resumed from a checkpoint at step k
replays the unbroken run exactly.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tasks
from . import tensor as T
from .corpus.types import TaskExample
from .corpus.windows import IGNORE, LONG_MAX_LEN, MODES
from .model import Checkpoint, Model, ModelConfig, extend_positions
from .tokenizer import BYTE_OFFSET, CLS, MASK, BpeModel

log = logging.getLogger(__name__)

PRETRAIN_LR = 3e-5
LR_SWEEP = (1e-5, 2e-5, 5e-5)
FINETUNE_EPOCHS = 6
MASKING_RATE = 0.15
CLIP_NORM = 1.0

# stream ids for the stateless generators
_ORDER, _MASKING, _DROPOUT, _FT_ORDER = 1, 2, 3, 4


class InitError(ValueError):
    pass


class SkipExample(Exception):
    """Raised by the masker when a sequence has nothing to mask."""


@dataclass
class TrainConfig:
    lr: float = PRETRAIN_LR
    batch_size: int = 8
    steps: int = 1000
    epochs: int = FINETUNE_EPOCHS
    seed: int = 0
    lr_sweep: tuple[float, ...] = LR_SWEEP
    selection_metric: str | None = None
    masking_rate: float = MASKING_RATE
    clip_norm: float = CLIP_NORM
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 0
    max_len: int = LONG_MAX_LEN
    mode: str = "truncate-long"

    def __post_init__(self):
        self.lr_sweep = tuple(float(x) for x in self.lr_sweep)
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr > 0 or any(not x > 0 for x in self.lr_sweep):
            raise ValueError("learning rates must be > 0")
        if not self.lr_sweep:
            raise ValueError("lr_sweep must hold at least one learning rate")
        if not 0.0 < self.masking_rate < 1.0:
            raise ValueError(f"masking_rate must lie in (0, 1), got {self.masking_rate}")
        if self.batch_size < 1 or self.steps < 0 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1, steps >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_sweep"] = list(self.lr_sweep)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    kind: str
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    selected: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        lines += [json.dumps({"type": "epoch", **e}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"type": "summary", "kind": self.kind, "selected": self.selected,
                                 "wall_clock_s": round(self.wall_clock_s, 3)}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunRecord":
        rec = cls("")
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            d = json.loads(line)
            typ = d.pop("type")
            if typ == "step":
                rec.steps.append(d)
            elif typ == "epoch":
                rec.epochs.append(d)
            else:
                rec.kind, rec.selected, rec.wall_clock_s = d["kind"], d["selected"], d["wall_clock_s"]
        return rec


# --------------------------------------------------------------------------
# masking


def mask_for_mlm(ids, masking_rate: float, seed, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``ceil(rate * maskable)`` non-special positions, 80/10/10.

    Returns ``(corrupted, labels)``; labels hold the original id at selected
    positions and IGNORE elsewhere.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if (ids == MASK).any():
        raise ValueError("input already contains MASK tokens")
    if not 0.0 < masking_rate < 1.0:
        raise ValueError(f"masking_rate must lie in (0, 1), got {masking_rate}")
    maskable = np.flatnonzero(ids >= BYTE_OFFSET)
    if maskable.size == 0:
        raise SkipExample("no maskable tokens")
    k = math.ceil(masking_rate * maskable.size)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(maskable, size=k, replace=False))
    u = rng.random(k)
    random_ids = rng.integers(BYTE_OFFSET, vocab_size, size=k)
    corrupted = ids.copy()
    corrupted[chosen] = np.where(u < 0.8, MASK, np.where(u < 0.9, random_ids, ids[chosen]))
    labels = np.full_like(ids, IGNORE)
    labels[chosen] = ids[chosen]
    return corrupted, labels


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam without weight decay; moments keyed by parameter name."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, T.Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0]) if "t" in state else 0
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v/")}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to a global norm of at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def _collect_grads(model: Model, count: int) -> dict[str, np.ndarray]:
    return {k: p.grad / count for k, p in model.params.items() if p.grad is not None}


def _apply(model: Model, opt: Adam, cfg: TrainConfig, count: int) -> None:
    grads = _collect_grads(model, count)
    clip_grad_norm(grads, cfg.clip_norm)
    opt.step(model.params, grads)
    model.zero_grad()


# --------------------------------------------------------------------------
# pre-training


def init_model(source, cfg: ModelConfig | None = None) -> Model:
    """Build a model from a config, a model or a donor checkpoint.

    With a donor and a target ``cfg``, the architectures must agree except for
    the attention pattern and the position table (which is grown cyclically).
    """
    if isinstance(source, Model):
        return source
    if isinstance(source, ModelConfig):
        return Model(source)
    if not isinstance(source, Checkpoint):
        raise InitError(f"cannot initialise a model from {type(source).__name__}")
    if cfg is None:
        return source.to_model()
    donor = source.config
    for name in ("vocab_size", "dim", "layers", "heads", "ffn_dim"):
        if getattr(donor, name) != getattr(cfg, name):
            raise InitError(f"donor checkpoint {name}={getattr(donor, name)} "
                            f"does not match the target {name}={getattr(cfg, name)}")
    params = {k: v for k, v in source.params.items() if not k.startswith("head.")}
    if cfg.max_positions > donor.max_positions:
        params = extend_positions(params, cfg.max_positions, donor.max_positions)
    elif cfg.max_positions < donor.max_positions:
        params["embed.positions"] = params["embed.positions"][:cfg.max_positions]
    heads = {k: v for k, v in source.params.items() if k.startswith("head.mlm.")}
    return Model(cfg, {**params, **heads})


def _example_order(seed: int, n: int, index: int) -> int:
    epoch, offset = divmod(index, n)
    return int(np.random.default_rng([seed, _ORDER, epoch]).permutation(n)[offset])


def _check_corpus(corpus: Sequence[np.ndarray], vocab_size: int, max_positions: int) -> None:
    if not corpus:
        raise ValueError("pretrain: corpus is empty")
    for i, seq in enumerate(corpus):
        seq = np.asarray(seq)
        if seq.size and (seq.max() >= vocab_size or seq.min() < 0):
            raise InitError(f"corpus sequence {i} holds ids outside the model vocabulary "
                            f"of {vocab_size}")
        if seq.size > max_positions:
            raise InitError(f"corpus sequence {i} has {seq.size} tokens, more than "
                            f"max_positions={max_positions}")


def mlm_loss(model: Model, corrupted: np.ndarray, labels: np.ndarray) -> T.Tensor:
    positions = np.flatnonzero(labels != IGNORE)
    hidden = model.encode(corrupted, global_positions=(0,) if corrupted[0] == CLS else ())
    return T.cross_entropy(model.mlm_head(hidden, positions), labels[positions])


def pretrain(source, corpus: Sequence[np.ndarray], cfg: TrainConfig, *,
             model_config: ModelConfig | None = None, checkpoint_dir=None,
             on_step: Callable[[dict], None] | None = None) -> tuple[Checkpoint, RunRecord]:
    """MLM training for ``cfg.steps`` optimizer steps.

    ``source`` is a ModelConfig (random init), a Model, or a Checkpoint. A
    checkpoint written by ``pretrain`` resumes from its step with its optimizer
    state unless ``model_config`` asks for a (differently shaped) new model,
    in which case it only donates weights.
    """
    started = time.perf_counter()
    resume = isinstance(source, Checkpoint) and source.meta.get("kind") == "pretrain" \
        and model_config is None
    model = init_model(source, model_config)
    _check_corpus(corpus, model.cfg.vocab_size, model.cfg.max_positions)
    if not model.has_head("mlm"):
        model.add_head("mlm", seed=cfg.seed)
    opt = Adam(cfg.lr, cfg.betas, cfg.eps)
    start = 0
    if resume:
        opt.load_state(source.optimizer)
        start = source.step
    record = RunRecord("pretrain")
    n = len(corpus)
    model.training = True
    for step in range(start, cfg.steps):
        losses = []
        for j in range(cfg.batch_size):
            ids = np.asarray(corpus[_example_order(cfg.seed, n, step * cfg.batch_size + j)])
            try:
                corrupted, labels = mask_for_mlm(ids, cfg.masking_rate, [cfg.seed, _MASKING, step, j],
                                                 model.cfg.vocab_size)
            except SkipExample:
                continue
            model.set_dropout_seed([cfg.seed, _DROPOUT, step, j])
            loss = mlm_loss(model, corrupted, labels)
            T.backward(loss)
            losses.append(loss.item())
        if not losses:
            log.warning("step %d: no maskable example in batch, skipped", step)
            continue
        _apply(model, opt, cfg, len(losses))
        entry = {"step": step + 1, "loss": float(np.mean(losses)), "lr": cfg.lr}
        record.steps.append(entry)
        if on_step:
            on_step(entry)
        if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _pretrain_checkpoint(model, opt, step + 1, cfg).save(
                Path(checkpoint_dir) / f"step-{step + 1:07d}.ckpt")
    model.training = False
    record.wall_clock_s = time.perf_counter() - started
    record.selected = {"checkpoint_id": f"step-{cfg.steps}"}
    return _pretrain_checkpoint(model, opt, max(cfg.steps, start), cfg), record


def _pretrain_checkpoint(model: Model, opt: Adam, step: int, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint.from_model(model, step=step, optimizer=opt.state(),
                                 rng_state={"seed": cfg.seed, "next_step": step},
                                 meta={"kind": "pretrain", "train_config": cfg.to_dict()})


def encode_corpus(texts: Sequence[str], tokenizer: BpeModel, max_len: int) -> list[np.ndarray]:
    """CLS text SEP, cut into consecutive chunks of at most ``max_len`` tokens."""
    out = []
    body_len = max_len - 2
    for text in texts:
        ids = tokenizer.encode(text, add_specials=False).ids
        for lo in range(0, max(len(ids), 1), body_len):
            chunk = ids[lo:lo + body_len]
            if chunk:
                out.append(np.array([CLS] + chunk + [2], dtype=np.int64))
    return out


# --------------------------------------------------------------------------
# fine-tuning


def finetune(checkpoint: Checkpoint, train: list[TaskExample], dev: list[TaskExample],
             cfg: TrainConfig, tokenizer: BpeModel, *, spec: tasks.TaskSpec | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, RunRecord]:
    """Sweep ``cfg.lr_sweep`` x ``cfg.epochs``; keep the best dev checkpoint.

    Each learning rate starts from the same encoder weights and a freshly
    initialised head. Ties on the dev metric keep the earliest cell.
    """
    started = time.perf_counter()
    if not train:
        raise ValueError("finetune: train split is empty")
    if not dev:
        raise ValueError("finetune: dev split is empty")
    spec = spec or tasks.TaskSpec.infer(list(train) + list(dev))
    metric = cfg.selection_metric or spec.selection_metric
    base_cfg = checkpoint.config
    if cfg.max_len > base_cfg.max_positions:
        base_cfg = replace(base_cfg, max_positions=cfg.max_len)
    base = init_model(checkpoint, base_cfg).state()
    base = {k: v for k, v in base.items() if not k.startswith("head.")}

    train_w = spec.windows(train, tokenizer, cfg.max_len, cfg.mode)
    dev_w = spec.windows(dev, tokenizer, cfg.max_len, cfg.mode)
    units = spec.units(train_w)
    record = RunRecord("finetune")
    best_value, best_state, best_cell = -math.inf, None, None
    global_step = 0
    for li, lr in enumerate(cfg.lr_sweep):
        model = Model(base_cfg, base)
        model.add_head(spec.head, spec.num_labels, seed=cfg.seed)
        opt = Adam(lr, cfg.betas, cfg.eps)
        model.training = True
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, _FT_ORDER, li, epoch]).permutation(len(units))
            for b in range(0, len(order), cfg.batch_size):
                losses = []
                for j, u in enumerate(order[b:b + cfg.batch_size]):
                    model.set_dropout_seed([cfg.seed, _DROPOUT, li, global_step, j])
                    loss = tasks.unit_loss(model, spec, units[u])
                    if loss is None:
                        continue
                    T.backward(loss)
                    losses.append(loss.item())
                if not losses:
                    continue
                _apply(model, opt, cfg, len(losses))
                global_step += 1
                record.steps.append({"step": global_step, "loss": float(np.mean(losses)),
                                     "lr": lr, "epoch": epoch})
            model.training = False
            report = tasks.score(spec, dev, tasks.predict(model, spec, dev, dev_w))
            model.training = True
            if metric not in report.metrics:
                raise ValueError(f"selection metric {metric!r} not produced for task "
                                 f"{spec.kind}; available: {sorted(report.metrics)}")
            value = report.metrics[metric]
            cell = {"lr": lr, "epoch": epoch, "metric": metric, "value": value,
                    "dev": report.to_dict()["metrics"], "checkpoint_id": f"lr{lr:g}-epoch{epoch}"}
            record.epochs.append(cell)
            if on_epoch:
                on_epoch(cell)
            if value > best_value:
                best_value, best_state, best_cell = value, model.state(), cell
        model.training = False
    record.selected = dict(best_cell)
    record.wall_clock_s = time.perf_counter() - started
    meta = {"kind": "finetune", "task": spec.to_dict(), "max_len": cfg.max_len, "mode": cfg.mode,
            "selected": record.selected, "train_config": cfg.to_dict()}
    return Checkpoint(base_cfg, best_state, step=global_step, meta=meta), record
