"""Byte-level BPE tokenizer.

Ids 0-3 are the special tokens, 4-259 the raw bytes and every id from 260
on is a learned merge, in merge order. Text is first cut into pieces and
merges never cross a piece boundary. Two pre-tokenizers exist:

``words`` (default)
    each piece is a word with its leading spaces; newlines and trailing
    space runs are pieces of their own. Token boundaries therefore always
    fall on word boundaries.
``lines``
    each line is one piece, so the space byte is an ordinary byte and
    merges may span words.

Both are lossless: concatenating the pieces gives back the input.
"""
from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIALS = {"PAD": PAD, "CLS": CLS, "SEP": SEP, "MASK": MASK}
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL
FORMAT_VERSION = 1
MIN_VOCAB = 256 + N_SPECIAL
DEFAULT_VOCAB_SIZE = 8192
PRETOKENIZERS = {
    "words": re.compile(rb"\n|[ ]*[^ \n]+|[ ]+"),
    "lines": re.compile(rb"\n|[^\n]+"),
}


class VocabError(KeyError):
    pass


def bytes_to_unicode() -> dict[int, str]:
    """GPT-2 printable mapping used to store byte tokens as JSON strings."""
    bs = (list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1))
          + list(range(ord("®"), ord("ÿ") + 1)))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


_B2U = bytes_to_unicode()
_U2B = {v: k for k, v in _B2U.items()}


def _to_str(b: bytes) -> str:
    return "".join(_B2U[x] for x in b)


def _from_str(s: str) -> bytes:
    return bytes(_U2B[c] for c in s)


@dataclass
class TokenSequence:
    ids: list[int]
    offsets: list[tuple[int, int]]   # byte offsets; (0, 0) for specials

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class BpeModel:
    merges: list[tuple[int, int]] = field(default_factory=list)
    pretokenizer: str = "words"

    def __post_init__(self):
        if self.pretokenizer not in PRETOKENIZERS:
            raise ValueError(f"unknown pretokenizer {self.pretokenizer!r}")
        self._split = PRETOKENIZERS[self.pretokenizer].findall
        self.token_bytes: list[bytes] = [b""] * N_SPECIAL + [bytes([b]) for b in range(256)]
        self.ranks: dict[tuple[int, int], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            if a >= len(self.token_bytes) or b >= len(self.token_bytes):
                raise VocabError(f"merge {rank} uses a token defined later")
            self.ranks[(a, b)] = rank
            self.token_bytes.append(self.token_bytes[a] + self.token_bytes[b])
        self._cache: dict[bytes, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.token_bytes)

    @property
    def vocab(self) -> dict[bytes, int]:
        out = {name.encode(): i for name, i in SPECIALS.items()}
        out.update({b: i for i, b in enumerate(self.token_bytes) if i >= N_SPECIAL})
        return out

    # ---------------------------------------------------------------- encode
    def encode_bytes(self, data: bytes) -> list[int]:
        if not data:
            return []
        ids = [b + BYTE_OFFSET for b in data]
        if not self.ranks or len(ids) == 1:
            return ids
        n = len(ids)
        nxt = list(range(1, n + 1))
        prv = list(range(-1, n - 1))
        alive = [True] * n
        ranks = self.ranks
        heap = []
        for i in range(n - 1):
            r = ranks.get((ids[i], ids[i + 1]))
            if r is not None:
                heap.append((r, i, ids[i], ids[i + 1]))
        heapq.heapify(heap)
        while heap:
            r, i, a, b = heapq.heappop(heap)
            j = nxt[i] if alive[i] else n
            if j >= n or ids[i] != a or ids[j] != b:
                continue
            ids[i] = BYTE_OFFSET + 256 + r
            alive[j] = False
            k = nxt[j]
            nxt[i] = k
            if k < n:
                prv[k] = i
            p = prv[i]
            if p >= 0:
                rr = ranks.get((ids[p], ids[i]))
                if rr is not None:
                    heapq.heappush(heap, (rr, p, ids[p], ids[i]))
            if k < n:
                rr = ranks.get((ids[i], ids[k]))
                if rr is not None:
                    heapq.heappush(heap, (rr, i, ids[i], ids[k]))
        return [ids[i] for i in range(n) if alive[i]]

    def _encode_piece(self, piece: bytes) -> list[int]:
        ids = self._cache.get(piece)
        if ids is None:
            ids = self.encode_bytes(piece)
            if len(self._cache) < 1 << 16:
                self._cache[piece] = ids
        return ids

    def encode(self, text: str, add_specials: bool = True) -> TokenSequence:
        ids: list[int] = []
        offsets: list[tuple[int, int]] = []
        pos = 0
        for piece in self._split(text.encode("utf-8")):
            for tok in self._encode_piece(piece):
                width = len(self.token_bytes[tok])
                ids.append(tok)
                offsets.append((pos, pos + width))
                pos += width
        if add_specials:
            ids = [CLS] + ids + [SEP]
            offsets = [(0, 0)] + offsets + [(0, 0)]
        return TokenSequence(ids, offsets)

    def encode_words(self, text: str) -> TokenSequence:
        """Encoding without specials; byte offsets index into ``text``."""
        return self.encode(text, add_specials=False)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.token_bytes):
                raise VocabError(f"unknown token id {i}")
            out += self.token_bytes[i]
        return bytes(out)

    # ----------------------------------------------------------------- files
    def to_json(self) -> str:
        payload = {
            "version": FORMAT_VERSION,
            "specials": dict(SPECIALS),
            "pretokenizer": self.pretokenizer,
            "merges": [[_to_str(self.token_bytes[a]), _to_str(self.token_bytes[b])]
                       for a, b in self.merges],
        }
        return json.dumps(payload, ensure_ascii=False, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "BpeModel":
        payload = json.loads(text)
        if payload.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported tokenizer version {payload.get('version')!r}")
        if payload.get("specials") != SPECIALS:
            raise ValueError("tokenizer file has unexpected special-token ids")
        lookup = {bytes([b]): b + BYTE_OFFSET for b in range(256)}
        merges = []
        for rank, pair in enumerate(payload["merges"]):
            a, b = (_from_str(s) for s in pair)
            if a not in lookup or b not in lookup:
                raise VocabError(f"merge {rank} references an undefined token")
            merges.append((lookup[a], lookup[b]))
            lookup[a + b] = BYTE_OFFSET + 256 + rank
        return cls(merges, payload.get("pretokenizer", "words"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def naive_encode(model: BpeModel, data: bytes) -> list[int]:
    """Reference encoder: repeatedly merge the lowest-ranked pair, left to right."""
    ids = [b + BYTE_OFFSET for b in data]
    while len(ids) > 1:
        best = min((model.ranks.get(p, len(model.merges)) for p in zip(ids, ids[1:])))
        if best == len(model.merges):
            break
        a, b = model.merges[best]
        out, i = [], 0
        while i < len(ids):
            if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                out.append(BYTE_OFFSET + 256 + best)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return ids


def _count_line_pairs(seq: Sequence[int]) -> Counter:
    return Counter(zip(seq, seq[1:]))


def train_bpe(corpus: Iterable[str], vocab_size: int = DEFAULT_VOCAB_SIZE,
              pretokenizer: str = "words") -> BpeModel:
    """Greedy BPE: merge the most frequent adjacent pair until the budget is spent.

    Ties go to the lexicographically smallest (left bytes, right bytes) pair;
    training stops early once no pair occurs at least twice.
    """
    if vocab_size < MIN_VOCAB:
        raise ValueError(f"vocab_size must be >= {MIN_VOCAB}, got {vocab_size}")
    if pretokenizer not in PRETOKENIZERS:
        raise ValueError(f"unknown pretokenizer {pretokenizer!r}")
    split = PRETOKENIZERS[pretokenizer].findall
    lines = Counter()
    empty = True
    for text in corpus:
        empty = empty and not text
        for piece in split(text.encode("utf-8")):
            if len(piece) > 1:
                lines[piece] += 1
    if empty:
        raise ValueError("train_bpe: corpus is empty")

    seqs = [[b + BYTE_OFFSET for b in line] for line in lines]
    weights = list(lines.values())
    token_bytes = [b""] * N_SPECIAL + [bytes([b]) for b in range(256)]

    counts: Counter = Counter()
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for idx, seq in enumerate(seqs):
        for pair, c in _count_line_pairs(seq).items():
            counts[pair] += c * weights[idx]
            where[pair].add(idx)

    def key(pair):
        return (-counts[pair], token_bytes[pair[0]], token_bytes[pair[1]])

    known = set(token_bytes[N_SPECIAL:])
    banned: set[tuple[int, int]] = set()
    heap = [key(p) + (p,) for p in counts]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []
    while len(token_bytes) < vocab_size and heap:
        neg, _, _, pair = heapq.heappop(heap)
        cur = counts.get(pair, 0)
        if cur != -neg:
            continue   # stale entry; a fresh one was pushed when the count changed
        if cur < 2:
            break
        a, b = pair
        if token_bytes[a] + token_bytes[b] in known:
            # a different split already produced these bytes; keep tokens unique
            counts.pop(pair, None)
            banned.add(pair)
            continue
        new_id = len(token_bytes)
        known.add(token_bytes[a] + token_bytes[b])
        merges.append(pair)
        token_bytes.append(token_bytes[a] + token_bytes[b])
        touched: set[tuple[int, int]] = set()
        for idx in sorted(where.pop(pair, ())):
            seq, w = seqs[idx], weights[idx]
            before = _count_line_pairs(seq)
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[idx] = out
            after = _count_line_pairs(out)
            for p in before.keys() | after.keys():
                delta = after.get(p, 0) - before.get(p, 0)
                if delta:
                    counts[p] += delta * w
                    touched.add(p)
                if p in after:
                    where[p].add(idx)
                elif p != pair:
                    where[p].discard(idx)
        counts.pop(pair, None)
        for p in touched:
            c = counts.get(p, 0)
            if c <= 0:
                counts.pop(p, None)
                where.pop(p, None)
            elif p != pair and p not in banned:
                heapq.heappush(heap, key(p) + (p,))
    return BpeModel(merges, pretokenizer)
