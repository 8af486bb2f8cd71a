"""In-context example selection: random draw, Okapi BM25, embedding cosine.

Indexes and embedding maps are immutable after build and safe for
concurrent read-only queries. Ties are always broken by corpus insertion
order so selections are reproducible.
"""

from __future__ import annotations

import json
import math
import random
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .exceptions import DataError

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

# maximal runs of alphanumeric characters (unicode-aware, underscore excluded)
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SelectionResult:
    """Ranked in-context example ids with scores, highest-scoring first."""

    selected: tuple[tuple[str, float], ...]
    method: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "selected", tuple(self.selected))

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(doc_id for doc_id, _ in self.selected)


@dataclass(frozen=True)
class Bm25Index:
    k1: float
    b: float
    doc_ids: tuple[str, ...]
    term_freqs: dict[str, Counter]  # doc_id -> term -> count
    doc_lens: dict[str, int]
    doc_freq: dict[str, int]  # term -> number of docs containing it
    avg_doc_len: float

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)


def build_bm25_index(
    docs: Iterable[tuple[str, str]], k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> Bm25Index:
    """Index (doc_id, text) pairs for Okapi BM25 scoring."""
    if k1 <= 0:
        raise ValueError(f"k1 must be > 0, got {k1}")
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"b must be in [0, 1], got {b}")
    doc_ids: list[str] = []
    term_freqs: dict[str, Counter] = {}
    doc_lens: dict[str, int] = {}
    doc_freq: Counter = Counter()
    for doc_id, text in docs:
        if doc_id in term_freqs:
            raise DataError(f"duplicate document id {doc_id!r}")
        tokens = tokenize(text)
        counts = Counter(tokens)
        doc_ids.append(doc_id)
        term_freqs[doc_id] = counts
        doc_lens[doc_id] = len(tokens)
        for term in counts:
            doc_freq[term] += 1
    total_len = sum(doc_lens.values())
    avg_doc_len = total_len / len(doc_ids) if doc_ids else 0.0
    return Bm25Index(
        k1=k1,
        b=b,
        doc_ids=tuple(doc_ids),
        term_freqs=term_freqs,
        doc_lens=doc_lens,
        doc_freq=dict(doc_freq),
        avg_doc_len=avg_doc_len,
    )


def bm25_score(index: Bm25Index, query_tokens: Sequence[str], doc_id: str) -> float:
    """Okapi BM25 score of one document against query tokens.

    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); repeated query tokens
    contribute once per occurrence.
    """
    if doc_id not in index.term_freqs:
        raise DataError(f"unknown document id {doc_id!r}")
    counts = index.term_freqs[doc_id]
    doc_len = index.doc_lens[doc_id]
    n = index.doc_count
    norm = index.k1 * (1.0 - index.b + index.b * doc_len / index.avg_doc_len)
    score = 0.0
    for term in query_tokens:
        tf = counts.get(term, 0)
        if tf == 0:
            continue
        df = index.doc_freq[term]
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        score += idf * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def select_bm25(index: Bm25Index, query_text: str, k: int) -> SelectionResult:
    """The k highest-BM25 documents for the query, ties by insertion order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query_tokens = tokenize(query_text)
    scored = [
        (doc_id, bm25_score(index, query_tokens, doc_id)) for doc_id in index.doc_ids
    ]
    ranked = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
    return SelectionResult(
        selected=tuple(scored[i] for i in ranked[:k]), method="bm25"
    )


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise DataError(f"embedding length mismatch: {len(a)} vs {len(b)}")
    dot = 0.0
    norm_a = 0.0
    norm_b = 0.0
    for x, y in zip(a, b):
        dot += x * y
        norm_a += x * x
        norm_b += y * y
    if norm_a == 0.0 or norm_b == 0.0:
        raise DataError("cosine similarity of a zero vector is undefined")
    return dot / (math.sqrt(norm_a) * math.sqrt(norm_b))


def select_embedding(
    train_embeddings: Mapping[str, Sequence[float]],
    query: Sequence[float],
    k: int,
) -> SelectionResult:
    """The k ids with highest cosine similarity, ties by insertion order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not train_embeddings:
        return SelectionResult(selected=(), method="embedding")
    scored = [
        (doc_id, cosine_similarity(vector, query))
        for doc_id, vector in train_embeddings.items()
    ]
    ranked = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
    return SelectionResult(
        selected=tuple(scored[i] for i in ranked[:k]), method="embedding"
    )


def select_random(train_ids: Sequence[str], k: int, seed: int) -> SelectionResult:
    """k distinct ids sampled without replacement, deterministic per seed.

    Returns all ids when k exceeds the pool; scores are reported as 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = random.Random(seed)
    chosen = rng.sample(list(train_ids), min(k, len(train_ids)))
    return SelectionResult(
        selected=tuple((doc_id, 0.0) for doc_id in chosen), method="random"
    )


def load_embeddings(path: str | Path) -> dict[str, tuple[float, ...]]:
    """Load a precomputed embeddings file: JSONL of {"id", "vector"} objects.

    All vectors must share one length and contain only finite numbers.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"embeddings file not found: {path}")
    embeddings: dict[str, tuple[float, ...]] = {}
    dim: int | None = None
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"embeddings line {line_no}: invalid JSON ({exc.msg})") from exc
            doc_id = record.get("id") if isinstance(record, dict) else None
            vector = record.get("vector") if isinstance(record, dict) else None
            if not isinstance(doc_id, str) or not doc_id:
                raise DataError(f"embeddings line {line_no}: field 'id' must be a non-empty string")
            if doc_id in embeddings:
                raise DataError(f"embeddings line {line_no}: duplicate id {doc_id!r}")
            if not isinstance(vector, list) or not vector:
                raise DataError(f"embeddings line {line_no}: field 'vector' must be a non-empty list")
            values = []
            for value in vector:
                if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                    raise DataError(f"embeddings line {line_no}: vector entries must be finite numbers")
                values.append(float(value))
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DataError(
                    f"embeddings line {line_no}: vector length {len(values)} != expected {dim}"
                )
            embeddings[doc_id] = tuple(values)
    return embeddings
