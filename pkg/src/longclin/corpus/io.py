"""Readers and writers for the task file formats and dataset manifests.

``iob2col``
    one ``token<TAB>tag`` per line, blank line between sentences.
``qa-json``
    JSON array of ``{"id", "context", "question", "answers": [{"text", "start"}]}``.
``cls-json``
    JSON array of ``{"id", "text", "labels"}``, or ``{"premise", "hypothesis",
    "label"}`` for sentence pairs.
``text``
    one raw note per line (MLM corpora).
"""
from __future__ import annotations

import json
from pathlib import Path

from .types import TaskExample, ValidationError

FORMATS = ("iob2col", "qa-json", "cls-json", "text", "examples-json")


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = str(path), line


def _json_records(path: Path) -> list[dict]:
    raw = path.read_text(encoding="utf-8")
    if not raw.strip():
        return []
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if isinstance(data, dict) and "data" in data:
        data = data["data"]
    if not isinstance(data, list):
        raise ParseError(path, 1, "expected a JSON array of records")
    return data


def _read_iob(path: Path) -> list[TaskExample]:
    out, tokens, tags = [], [], []

    def flush():
        if tokens:
            out.append(TaskExample("ner", id=f"{path.stem}-{len(out)}",
                                   tokens=list(tokens), tags=list(tags)).validate())
            tokens.clear()
            tags.clear()

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ParseError(path, lineno, f"expected 'token<TAB>tag', got {line!r}")
            tokens.append(parts[0])
            tags.append(parts[1].strip())
    flush()
    return out


def _read_qa(path: Path) -> list[TaskExample]:
    out = []
    for i, rec in enumerate(_json_records(path)):
        try:
            answer = rec["answers"][0]
            start = int(answer["start"])
            ex = TaskExample("qa", id=str(rec.get("id", i)), context=rec["context"],
                             question=rec["question"], answer_start=start,
                             answer_end=start + len(answer["text"]), answer_text=answer["text"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ParseError(path, i + 1, f"record {i}: malformed qa record ({exc!r})") from None
        out.append(ex.validate())
    return out


def _read_cls(path: Path) -> list[TaskExample]:
    out = []
    for i, rec in enumerate(_json_records(path)):
        try:
            if "premise" in rec:
                ex = TaskExample("pair-cls", id=str(rec.get("id", i)), premise=rec["premise"],
                                 hypothesis=rec["hypothesis"], label=rec["label"])
            else:
                labels = rec["labels"]
                if isinstance(labels, int):
                    labels = [labels]
                ex = TaskExample("doc-cls", id=str(rec.get("id", i)), text=rec["text"],
                                 labels=tuple(int(c) for c in labels))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, i + 1, f"record {i}: malformed cls record ({exc!r})") from None
        out.append(ex.validate())
    return out


def _read_text(path: Path) -> list[TaskExample]:
    with path.open(encoding="utf-8") as fh:
        return [TaskExample("mlm-text", id=f"{path.stem}-{i}", text=line.rstrip("\n"))
                for i, line in enumerate(fh) if line.strip()]


def _read_examples(path: Path) -> list[TaskExample]:
    out = []
    for i, rec in enumerate(_json_records(path)):
        try:
            rec = dict(rec)
            rec["labels"] = tuple(rec.get("labels", ()))
            ex = TaskExample(**rec)
        except TypeError as exc:
            raise ParseError(path, i + 1, f"record {i}: {exc}") from None
        out.append(ex.validate())
    return out


_READERS = {"iob2col": _read_iob, "qa-json": _read_qa, "cls-json": _read_cls,
            "text": _read_text, "examples-json": _read_examples}


def load_dataset(path, format: str) -> list[TaskExample]:
    """Parse ``path`` in ``format`` and validate every example."""
    if format not in _READERS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    return _READERS[format](Path(path))


def infer_format(examples: list[TaskExample]) -> str:
    kinds = {ex.kind for ex in examples}
    if len(kinds) > 1:
        raise ValidationError(f"mixed example kinds {sorted(kinds)}")
    kind = kinds.pop() if kinds else "mlm-text"
    return {"ner": "iob2col", "qa": "qa-json", "doc-cls": "cls-json",
            "pair-cls": "cls-json", "mlm-text": "text"}[kind]


def save_dataset(examples: list[TaskExample], path, format: str | None = None) -> str:
    """Write examples in ``format`` (inferred from their kind when omitted)."""
    format = format or infer_format(examples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "iob2col":
        blocks = ["".join(f"{t}\t{g}\n" for t, g in zip(ex.tokens, ex.tags)) for ex in examples]
        text = "\n".join(blocks)
    elif format == "qa-json":
        recs = [{"id": ex.id, "context": ex.context, "question": ex.question,
                 "answers": [{"text": ex.answer_text, "start": ex.answer_start}]} for ex in examples]
        text = json.dumps(recs, indent=1) + "\n"
    elif format == "cls-json":
        recs = []
        for ex in examples:
            if ex.kind == "pair-cls":
                recs.append({"id": ex.id, "premise": ex.premise, "hypothesis": ex.hypothesis,
                             "label": ex.label})
            else:
                recs.append({"id": ex.id, "text": ex.text, "labels": list(ex.labels)})
        text = json.dumps(recs, indent=1) + "\n"
    elif format == "text":
        text = "".join(ex.text.replace("\n", " ") + "\n" for ex in examples)
    elif format == "examples-json":
        text = json.dumps([ex.to_dict() for ex in examples], indent=1) + "\n"
    else:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    path.write_text(text, encoding="utf-8")
    return format


# --------------------------------------------------------------------------
# dataset manifests: {"format": ..., "kind": ..., "splits": {"train": path, ...}}

SPLITS = ("train", "dev", "test")


def write_manifest(path, splits: dict[str, str], format: str, kind: str, **extra) -> None:
    path = Path(path)
    rel = {k: str(Path(v).relative_to(path.parent)) if Path(v).is_absolute() and
           Path(v).is_relative_to(path.parent) else str(v) for k, v in splits.items()}
    body = {"format": format, "kind": kind, "splits": rel, **extra}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        body = json.loads(path.read_text(encoding="utf-8"))
        splits = body["splits"]
        body["format"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(path, 1, f"malformed dataset manifest ({exc!r})") from None
    body["splits"] = {k: str((path.parent / v) if not Path(v).is_absolute() else Path(v))
                      for k, v in splits.items()}
    return body


def load_split(manifest_path, split: str) -> list[TaskExample]:
    manifest = read_manifest(manifest_path)
    if split not in manifest["splits"]:
        raise ValidationError(f"dataset manifest {manifest_path} has no {split!r} split")
    return load_dataset(manifest["splits"][split], manifest["format"])
