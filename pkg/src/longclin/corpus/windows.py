"""Task examples -> fixed-length encoder windows.

Two regimes:

``truncate-long``
    keep the first ``max_len`` tokens, specials included (one window).
``segment-short``
    truncate to ``truncate_to`` tokens first, then tile the body into
    consecutive non-overlapping snippets of at most ``max_len - 2``
    tokens, each wrapped in CLS ... SEP and tagged with its parent id.

Bodies are ``question SEP context`` for QA, ``premise SEP hypothesis`` for
pairs and the plain text otherwise. Text is encoded word by word so that
token boundaries coincide with word boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tokenizer import CLS, SEP, BpeModel
from .types import NLI_LABELS, TaskExample

MODES = ("truncate-long", "segment-short")
LONG_MAX_LEN = 3072
SHORT_MAX_LEN = 384
TRUNCATE_TO = 4096
IGNORE = -100


@dataclass
class EncodedWindow:
    input_ids: np.ndarray
    global_positions: tuple[int, ...]
    parent_id: str
    snippet_index: int
    kind: str
    parent_index: int = 0
    # qa: token span of the answer inside this window; (0, 0) when absent
    start: int = 0
    end: int = 0
    answerable: bool = False
    # qa: per-token (char_start, char_end) into the context, (-1, -1) otherwise
    char_spans: np.ndarray | None = field(default=None, repr=False)
    # ner: tag id on the first sub-token of each word, IGNORE elsewhere
    token_labels: np.ndarray | None = field(default=None, repr=False)
    word_index: np.ndarray | None = field(default=None, repr=False)
    # doc-cls / pair-cls
    labels: tuple[int, ...] = ()

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def answer_mask(self) -> np.ndarray:
        """Positions that may start or end a predicted answer (context tokens)."""
        if self.char_spans is None:
            return np.zeros(len(self), dtype=bool)
        return self.char_spans[:, 0] >= 0


def _byte_to_char(text: str) -> np.ndarray:
    widths = [len(c.encode("utf-8")) for c in text]
    b2c = np.zeros(sum(widths) + 1, dtype=np.int64)
    pos = 0
    for i, w in enumerate(widths):
        b2c[pos:pos + w] = i
        pos += w
    b2c[pos] = len(text)
    return b2c


@dataclass
class _Body:
    ids: list[int]
    question: list[bool]
    char_spans: list[tuple[int, int]]
    token_labels: list[int]
    word_index: list[int]
    answer: tuple[int, int] | None = None


def _empty_body() -> _Body:
    return _Body([], [], [], [], [])


def _append_text(body: _Body, tok: BpeModel, text: str, question=False, spans=False) -> None:
    seq = tok.encode_words(text)
    b2c = _byte_to_char(text) if spans else None
    for tid, (bs, be) in zip(seq.ids, seq.offsets):
        body.ids.append(tid)
        body.question.append(question)
        body.char_spans.append((int(b2c[bs]), int(b2c[be])) if spans else (-1, -1))
        body.token_labels.append(IGNORE)
        body.word_index.append(-1)


def _append_sep(body: _Body) -> None:
    body.ids.append(SEP)
    body.question.append(False)
    body.char_spans.append((-1, -1))
    body.token_labels.append(IGNORE)
    body.word_index.append(-1)


def _build_body(ex: TaskExample, tok: BpeModel, tag_map: dict[str, int] | None) -> _Body:
    body = _empty_body()
    if ex.kind == "qa":
        _append_text(body, tok, ex.question, question=True)
        _append_sep(body)
        offset = len(body.ids)
        _append_text(body, tok, ex.context, spans=True)
        spans = body.char_spans[offset:]
        # first token ending after the answer start, last token starting before its end
        s = next((i for i, (a, b) in enumerate(spans) if b > ex.answer_start), None)
        e = next((i for i in range(len(spans) - 1, -1, -1) if spans[i][0] < ex.answer_end), None)
        if s is not None and e is not None and s <= e:
            body.answer = (offset + s, offset + e)
        # spans include a leading space; trim it so decoded answers are exact
        for i in range(offset, len(body.ids)):
            a, b = body.char_spans[i]
            if a < b and ex.context[a] == " ":
                body.char_spans[i] = (a + 1, b)
    elif ex.kind == "pair-cls":
        _append_text(body, tok, ex.premise)
        _append_sep(body)
        _append_text(body, tok, ex.hypothesis)
    elif ex.kind == "ner":
        for wi, (word, tag) in enumerate(zip(ex.tokens, ex.tags)):
            piece = word if wi == 0 else " " + word
            for j, tid in enumerate(tok.encode_words(piece).ids):
                body.ids.append(tid)
                body.question.append(False)
                body.char_spans.append((-1, -1))
                first = j == 0
                body.token_labels.append(tag_map.get(tag, 0) if first and tag_map else IGNORE)
                body.word_index.append(wi if first else -1)
    else:
        _append_text(body, tok, ex.text)
    return body


def _labels_of(ex: TaskExample) -> tuple[int, ...]:
    if ex.kind == "pair-cls":
        return (NLI_LABELS.index(ex.label),)
    if ex.kind == "doc-cls":
        return tuple(int(c) for c in ex.labels)
    return ()


def _window(ex: TaskExample, body: _Body, lo: int, hi: int, index: int,
            parent: int) -> EncodedWindow:
    ids = np.array([CLS] + body.ids[lo:hi] + [SEP], dtype=np.int64)
    globals_ = (0,) + tuple(1 + i - lo for i in range(lo, hi) if body.question[i])
    spans = np.array([(-1, -1)] + body.char_spans[lo:hi] + [(-1, -1)], dtype=np.int64)
    win = EncodedWindow(ids, globals_, ex.id, index, ex.kind, parent, labels=_labels_of(ex))
    if ex.kind == "qa":
        win.char_spans = spans
        if body.answer is not None and lo <= body.answer[0] and body.answer[1] < hi:
            win.start, win.end = body.answer[0] - lo + 1, body.answer[1] - lo + 1
            win.answerable = True
    if ex.kind == "ner":
        win.token_labels = np.array([IGNORE] + body.token_labels[lo:hi] + [IGNORE], dtype=np.int64)
        win.word_index = np.array([-1] + body.word_index[lo:hi] + [-1], dtype=np.int64)
    return win


def window_examples(examples, tokenizer: BpeModel, max_len: int, mode: str = "truncate-long", *,
                    truncate_to: int = TRUNCATE_TO,
                    tag_map: dict[str, int] | None = None) -> list[EncodedWindow]:
    """Encode examples into windows of at most ``max_len`` tokens."""
    if max_len < 8:
        raise ValueError(f"max_len must be >= 8, got {max_len}")
    if mode not in MODES:
        raise ValueError(f"unknown windowing mode {mode!r}; expected one of {MODES}")
    out: list[EncodedWindow] = []
    for parent, ex in enumerate(examples):
        body = _build_body(ex, tokenizer, tag_map)
        n = len(body.ids)
        if mode == "truncate-long":
            out.append(_window(ex, body, 0, min(n, max_len - 2), 0, parent))
            continue
        n = min(n, truncate_to - 2)
        step = max_len - 2
        for index, lo in enumerate(range(0, max(n, 1), step)):
            out.append(_window(ex, body, lo, min(n, lo + step), index, parent))
    return out


def group_by_parent(windows: list[EncodedWindow]) -> list[list[EncodedWindow]]:
    """Snippets grouped per parent example, in input order."""
    groups: dict[int, list[EncodedWindow]] = {}
    for w in windows:
        groups.setdefault(w.parent_index, []).append(w)
    return list(groups.values())
