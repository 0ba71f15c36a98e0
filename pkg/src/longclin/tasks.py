"""Task adapters: which head a task uses, its loss, its predictions and metrics."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import tensor as T
from .corpus.types import NLI_LABELS, TaskExample
from .corpus.windows import EncodedWindow, group_by_parent, window_examples
from .model import (DEFAULT_MAX_ANSWER_LEN, MULTILABEL_THRESHOLD, Model, NoAnswerError,
                    decode_span, sigmoid, softmax)
from .threads import worker_count
from .tokenizer import BpeModel

TASK_HEADS = {"qa": "span", "ner": "token-cls", "doc-cls": "seq-cls", "pair-cls": "seq-cls"}
SELECTION_METRIC = {"qa": "f1", "ner": "f1", "pair-cls": "accuracy"}


@dataclass
class TaskSpec:
    kind: str
    num_labels: int = 0
    tags: list[str] = field(default_factory=list)
    multilabel: bool = False
    pool: str = "mean"
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN

    @property
    def head(self) -> str:
        return TASK_HEADS[self.kind]

    @property
    def selection_metric(self) -> str:
        if self.kind == "doc-cls":
            return "auc" if self.multilabel or self.num_labels == 2 else "accuracy"
        return SELECTION_METRIC[self.kind]

    @property
    def tag_map(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tags)}

    @classmethod
    def infer(cls, examples: list[TaskExample], multilabel: bool | None = None,
              pool: str = "mean") -> "TaskSpec":
        kinds = {ex.kind for ex in examples}
        if len(kinds) != 1:
            raise ValueError(f"expected examples of one task kind, got {sorted(kinds)}")
        kind = kinds.pop()
        if kind not in TASK_HEADS:
            raise ValueError(f"no fine-tuning head for kind {kind!r}")
        if kind == "ner":
            tags = sorted({t for ex in examples for t in ex.tags} - {"O"})
            return cls(kind, len(tags) + 1, ["O"] + tags)
        if kind == "pair-cls":
            return cls(kind, len(NLI_LABELS), pool=pool)
        if kind == "doc-cls":
            if multilabel is None:
                multilabel = any(len(ex.labels) != 1 for ex in examples)
            n = max(c for ex in examples for c in ex.labels) + 1
            return cls(kind, max(n, 2), multilabel=multilabel, pool=pool)
        return cls(kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_labels": self.num_labels, "tags": list(self.tags),
                "multilabel": self.multilabel, "pool": self.pool,
                "max_answer_len": self.max_answer_len}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)

    def windows(self, examples, tokenizer: BpeModel, max_len: int, mode: str):
        return window_examples(examples, tokenizer, max_len, mode, tag_map=self.tag_map)

    def units(self, windows: list[EncodedWindow]) -> list[list[EncodedWindow]]:
        """Training units: one window, or all snippets of a document for pooled heads."""
        if self.head == "seq-cls":
            return group_by_parent(windows)
        return [[w] for w in windows]


# --------------------------------------------------------------------------
# losses


def _hidden(model: Model, w: EncodedWindow) -> T.Tensor:
    return model.encode(w.input_ids, w.global_positions)


def _cls_logits(model: Model, spec: TaskSpec, unit: list[EncodedWindow]) -> T.Tensor:
    hiddens = [_hidden(model, w) for w in unit]
    if len(hiddens) == 1:
        return model.seq_cls_logits(hiddens[0])
    return model.pooled_seq_cls_logits(hiddens, spec.pool)


def unit_loss(model: Model, spec: TaskSpec, unit: list[EncodedWindow]) -> T.Tensor | None:
    """Task loss for one training unit; None when it carries no supervision."""
    if spec.head == "seq-cls":
        logits = _cls_logits(model, spec, unit)
        labels = unit[0].labels
        if spec.multilabel:
            target = np.zeros((1, spec.num_labels))
            target[0, list(labels)] = 1.0
            return T.binary_cross_entropy(logits, target)
        return T.cross_entropy(logits, [labels[0]])
    (w,) = unit
    if spec.head == "span":
        # windows without the answer point both ends at CLS
        return T.cross_entropy(model.span_logits(_hidden(model, w)), [w.start, w.end])
    if (w.token_labels < 0).all():
        return None
    return T.cross_entropy(model.token_cls_head(_hidden(model, w)), w.token_labels)


# --------------------------------------------------------------------------
# prediction


def _map_ordered(fn, items):
    n = worker_count()
    if n <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _qa_window(model: Model, spec: TaskSpec, w: EncodedWindow):
    logits = model.span_logits(_hidden(model, w)).data
    try:
        s, e = decode_span(logits[0], logits[1], spec.max_answer_len, w.answer_mask)
    except NoAnswerError:
        return None
    return float(logits[0, s] + logits[1, e]), s, e


def predict(model: Model, spec: TaskSpec, examples: list[TaskExample],
            windows: list[EncodedWindow]) -> list:
    """One JSON-serializable prediction per example, in input order."""
    groups = group_by_parent(windows)
    if len(groups) != len(examples):
        raise ValueError(f"{len(groups)} window groups for {len(examples)} examples")
    with T.no_grad():
        if spec.kind == "qa":
            return _map_ordered(lambda g: _predict_qa(model, spec, examples[g[0].parent_index], g),
                                groups)
        if spec.kind == "ner":
            return _map_ordered(lambda g: _predict_ner(model, spec, examples[g[0].parent_index], g),
                                groups)
        return _map_ordered(lambda g: _predict_cls(model, spec, g), groups)


def _predict_qa(model, spec, ex, group) -> str:
    best = None
    for w in group:
        hit = _qa_window(model, spec, w)
        if hit is not None and (best is None or hit[0] > best[0]):
            best = hit + (w,)
    if best is None:
        return ""
    _, s, e, w = best
    return ex.context[w.char_spans[s, 0]:w.char_spans[e, 1]]


def _predict_ner(model, spec, ex, group) -> list[str]:
    tags = ["O"] * len(ex.tokens)
    for w in group:
        logits = model.token_cls_head(_hidden(model, w)).data
        for pos in np.flatnonzero(w.word_index >= 0):
            tags[int(w.word_index[pos])] = spec.tags[int(np.argmax(logits[pos]))]
    return tags


def _predict_cls(model, spec, group) -> list[float]:
    logits = _cls_logits(model, spec, group).data[0].astype(np.float64)
    probs = sigmoid(logits) if spec.multilabel else softmax(logits)
    return [round(float(p), 12) for p in probs]


# --------------------------------------------------------------------------
# scoring


def score(spec: TaskSpec, examples: list[TaskExample], predictions: list) -> M.EvalReport:
    n = len(examples)
    if spec.kind == "qa":
        em = np.mean([M.exact_match(p, ex.answer_text) for p, ex in zip(predictions, examples)])
        f1 = np.mean([M.qa_f1(p, ex.answer_text) for p, ex in zip(predictions, examples)])
        metrics = {"exact_match": float(em), "f1": float(f1)}
    elif spec.kind == "ner":
        p, r, f = M.entity_f1(predictions, [ex.tags for ex in examples])
        metrics = {"precision": p, "recall": r, "f1": f}
        spans = [t for ex in examples for t, _, _ in M.extract_spans(ex.tags)]
        support = {t: spans.count(t) for t in sorted(set(spans))}
        return M.EvalReport(spec.kind, metrics, support, n, M.digest(predictions))
    elif spec.multilabel:
        y = np.zeros((n, spec.num_labels), dtype=np.int64)
        for i, ex in enumerate(examples):
            y[i, list(ex.labels)] = 1
        scores = np.array(predictions)
        auc, excluded = M.weighted_multilabel_auc(scores, y)
        hard = (scores >= MULTILABEL_THRESHOLD).astype(np.int64)
        metrics = {"auc": auc, "subset_accuracy": float((hard == y).all(axis=1).mean())}
        support = {str(c): int(y[:, c].sum()) for c in range(spec.num_labels)}
        report = M.EvalReport(spec.kind, metrics, support, n, M.digest(predictions))
        if excluded:
            report.notes.append(f"classes without both label values excluded from AUC: {excluded}")
        return report
    else:
        gold = [_gold_class(spec, ex) for ex in examples]
        pred = [int(np.argmax(p)) for p in predictions]
        metrics = {"accuracy": M.accuracy(pred, gold)}
        if spec.num_labels == 2 and len(set(gold)) == 2:
            metrics["auc"] = M.roc_auc([p[1] for p in predictions], gold)
        names = NLI_LABELS if spec.kind == "pair-cls" else [str(c) for c in range(spec.num_labels)]
        support = {names[c]: gold.count(c) for c in range(spec.num_labels)}
        return M.EvalReport(spec.kind, metrics, support, n, M.digest(predictions))
    return M.EvalReport(spec.kind, metrics, {"questions": n}, n, M.digest(predictions))


def _gold_class(spec: TaskSpec, ex: TaskExample) -> int:
    if ex.kind == "pair-cls":
        return NLI_LABELS.index(ex.label)
    return int(ex.labels[0])


def evaluate(model: Model, spec: TaskSpec, examples, tokenizer: BpeModel, max_len: int,
             mode: str) -> tuple[M.EvalReport, list]:
    windows = spec.windows(examples, tokenizer, max_len, mode)
    preds = predict(model, spec, examples, windows)
    return score(spec, examples, preds), preds
