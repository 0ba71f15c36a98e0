"""Evaluation metrics: QA (EM, token F1), IOB entity F1, accuracy, ROC AUC."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def token_f1(pred_tokens: Sequence[str], gold_tokens: Sequence[str]) -> float:
    """Multiset-overlap F1; 1.0 when both sides are empty."""
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(pred_tokens)
    r = overlap / len(gold_tokens)
    return 2 * p * r / (p + r)


def qa_f1(pred: str, gold: str) -> float:
    return token_f1(normalize_answer(pred).split(), normalize_answer(gold).split())


# --------------------------------------------------------------------------
# entity-level F1 over IOB tags


def _split(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, _, typ = tag.partition("-")
    return prefix, typ


def extract_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Typed spans (type, start, end-inclusive), conll style.

    An ``I-X`` that does not continue a span of type X opens a new span.
    """
    spans = set()
    cur_type, cur_start = None, -1
    for i, tag in enumerate(tags):
        prefix, typ = _split(tag)
        continues = prefix == "I" and typ == cur_type
        if cur_type is not None and not continues:
            spans.add((cur_type, cur_start, i - 1))
            cur_type = None
        if prefix in ("B", "I") and not continues:
            cur_type, cur_start = typ, i
    if cur_type is not None:
        spans.add((cur_type, cur_start, len(tags) - 1))
    return spans


def entity_counts(pred_tags: Sequence[str], gold_tags: Sequence[str]) -> tuple[int, int, int]:
    """(true positives, predicted spans, gold spans) for one sequence."""
    if len(pred_tags) != len(gold_tags):
        raise MetricError(f"tag sequences differ in length: {len(pred_tags)} vs {len(gold_tags)}")
    pred, gold = extract_spans(pred_tags), extract_spans(gold_tags)
    return len(pred & gold), len(pred), len(gold)


def prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def entity_f1(pred_tags, gold_tags) -> tuple[float, float, float]:
    """Micro P/R/F1 over exact (type, start, end) matches.

    Accepts one tag sequence per side or a list of sequences (spans never
    cross sequence boundaries).
    """
    if len(pred_tags) != len(gold_tags):
        raise MetricError(f"tag sequences differ in length: {len(pred_tags)} vs {len(gold_tags)}")
    if pred_tags and not isinstance(pred_tags[0], str):
        totals = np.zeros(3, dtype=np.int64)
        for p, g in zip(pred_tags, gold_tags):
            totals += entity_counts(p, g)
        return prf(*totals.tolist())
    return prf(*entity_counts(pred_tags, gold_tags))


# --------------------------------------------------------------------------
# classification


def accuracy(preds, labels) -> float:
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise MetricError(f"{len(preds)} predictions for {len(labels)} labels")
    if not preds:
        raise MetricError("accuracy of an empty set is undefined")
    return sum(int(p == g) for p, g in zip(preds, labels)) / len(preds)


def binary_f1(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    tp = int(((preds == 1) & (labels == 1)).sum())
    return prf(tp, int((preds == 1).sum()), int((labels == 1).sum()))[2]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg).

    Computed through midranks, which is the same quantity in n log n.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined without both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def weighted_multilabel_auc(scores, labels) -> tuple[float, list[int]]:
    """Positive-count weighted mean of per-class AUC.

    ``scores`` and ``labels`` are [n_samples, n_classes]. Classes missing
    either label value are skipped; their indices are returned.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 2:
        raise MetricError("scores and labels must both be [samples, classes]")
    total, weight, excluded = 0.0, 0, []
    for c in range(s.shape[1]):
        support = int((y[:, c] == 1).sum())
        if support == 0 or support == y.shape[0]:
            excluded.append(c)
            continue
        total += support * roc_auc(s[:, c], y[:, c])
        weight += support
    if weight == 0:
        raise MetricError("no class has both positive and negative samples")
    return total / weight, excluded


# --------------------------------------------------------------------------
# reports


def digest(predictions) -> str:
    blob = json.dumps(predictions, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    support: dict[str, int] = field(default_factory=dict)
    n_samples: int = 0
    predictions_digest: str = ""
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"metric {k}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metrics": {k: round(float(v), 12) for k, v in sorted(self.metrics.items())},
            "support": dict(sorted(self.support.items())),
            "n_samples": self.n_samples,
            "predictions_digest": self.predictions_digest,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["task"], dict(d["metrics"]), dict(d.get("support", {})),
                   d.get("n_samples", 0), d.get("predictions_digest", ""), list(d.get("notes", [])))


def render_table(rows: dict[str, dict[str, float]], columns: Sequence[str] | None = None,
                 title: str = "") -> str:
    """Plain-text table: one row per model variant, one column per metric."""
    if columns is None:
        columns = sorted({c for r in rows.values() for c in r})
    names = list(rows)
    w0 = max([len("model")] + [len(n) for n in names])
    widths = [max(len(c), 5) for c in columns]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(["model".ljust(w0)] + [c.rjust(w) for c, w in zip(columns, widths)]))
    lines.append("-" * len(lines[-1]))
    for n in names:
        cells = []
        for c, w in zip(columns, widths):
            v = rows[n].get(c)
            cells.append(("-" if v is None else f"{v:.3f}").rjust(w))
        lines.append("  ".join([n.ljust(w0)] + cells))
    return "\n".join(lines) + "\n"
