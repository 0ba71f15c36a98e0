"""Unified task examples and their invariants."""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

KINDS = ("mlm-text", "qa", "ner", "doc-cls", "pair-cls")
NLI_LABELS = ("entailment", "contradiction", "neutral")
_TAG = re.compile(r"^(O|[BI]-[^\s]+)$")


class ValidationError(ValueError):
    pass


@dataclass
class TaskExample:
    kind: str
    id: str = ""
    # mlm-text, doc-cls
    text: str = ""
    labels: tuple[int, ...] = ()
    # qa
    context: str = ""
    question: str = ""
    answer_start: int = -1
    answer_end: int = -1
    answer_text: str = ""
    # ner
    tokens: list[str] = field(default_factory=list)
    tags: list[str] = field(default_factory=list)
    # pair-cls
    premise: str = ""
    hypothesis: str = ""
    label: str = ""

    def validate(self) -> "TaskExample":
        where = f"example {self.id!r} ({self.kind})"
        if self.kind not in KINDS:
            raise ValidationError(f"{where}: unknown kind")
        if self.kind == "qa":
            if not 0 <= self.answer_start < self.answer_end <= len(self.context):
                raise ValidationError(
                    f"{where}: answer span [{self.answer_start}, {self.answer_end}) "
                    f"outside context of length {len(self.context)}")
            if self.context[self.answer_start:self.answer_end] != self.answer_text:
                raise ValidationError(f"{where}: answer text does not match its span")
        elif self.kind == "ner":
            if len(self.tokens) != len(self.tags):
                raise ValidationError(
                    f"{where}: {len(self.tokens)} tokens but {len(self.tags)} tags")
            for t in self.tags:
                if not _TAG.match(t):
                    raise ValidationError(f"{where}: malformed tag {t!r}")
        elif self.kind == "pair-cls":
            if self.label not in NLI_LABELS:
                raise ValidationError(f"{where}: label {self.label!r} not in {NLI_LABELS}")
        elif self.kind == "doc-cls":
            if not self.labels or any(int(c) < 0 for c in self.labels):
                raise ValidationError(f"{where}: needs at least one non-negative class id")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d
