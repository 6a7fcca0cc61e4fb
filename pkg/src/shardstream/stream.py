"""Document streams: date resolution, ordering, passage windows, corpora.

Also hosts the synthetic drifting-vocabulary generator used by the benches
and the test-suite. Synthetic documents are bags of integer token ids; each
concept owns a contiguous block of ``vocab_per_concept`` ids, so any
embedder can recover a token's concept from its id alone.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DuplicateIdError, FormatError, InvalidSpecError

DEFAULT_MAX_PASSAGE_TOKENS = 180
_INT_TOKEN = re.compile(r"^\d+$")
_TOKEN_SPACE = 2**31


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    timestamp: float
    title: str = ""
    body: str = ""

    def tokens(self) -> list[int]:
        return tokenize(f"{self.title} {self.body}")


@dataclass(frozen=True)
class DateCandidates:
    crawl_date: float
    extracted_date: float | None = None
    last_modified: float | None = None
    header_date: float | None = None


@dataclass(frozen=True)
class PassageRecord:
    passage_id: int
    doc_id: str
    window_index: int
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str


@dataclass(frozen=True)
class SyntheticStreamSpec:
    n_docs: int
    n_concepts: int
    concept_birth_times: tuple[float, ...]
    tokens_per_doc: int = 24
    dim: int = 32
    n_queries: int = 96
    seed: int = 0
    vocab_per_concept: int = 64
    query_tokens: int = 8
    noise_scale: float = 0.5
    n_topics: int = 8
    concept_spread: float = 0.3
    burst: float = 0.0
    burst_decay: float = 0.05
    start_timestamp: float = 1_451_606_400.0  # 2016-01-01T00:00:00Z

    def validate(self) -> None:
        if self.n_concepts <= 0:
            raise InvalidSpecError("n_concepts must be >= 1")
        if len(self.concept_birth_times) != self.n_concepts:
            raise InvalidSpecError(
                f"{len(self.concept_birth_times)} birth times for {self.n_concepts} concepts"
            )
        births = list(self.concept_birth_times)
        if births != sorted(births):
            raise InvalidSpecError("concept_birth_times must be sorted ascending")
        if births[0] != 0.0:
            raise InvalidSpecError("at least one concept must be born at 0.0")
        if any(not 0.0 <= b <= 1.0 for b in births):
            raise InvalidSpecError("birth times must lie in [0, 1]")
        for name in ("n_docs", "tokens_per_doc", "dim", "vocab_per_concept", "query_tokens", "n_topics"):
            if getattr(self, name) < 1:
                raise InvalidSpecError(f"{name} must be >= 1")
        if self.n_queries < 0:
            raise InvalidSpecError("n_queries must be >= 0")
        if self.burst < 0 or self.burst_decay <= 0:
            raise InvalidSpecError("burst must be >= 0 and burst_decay > 0")


@dataclass
class DriftStream:
    docs: list[DocumentRecord]
    queries: list[Query]
    qrels: dict[str, dict[str, int]]
    doc_concepts: dict[str, int] = field(default_factory=dict)
    query_concepts: dict[str, int] = field(default_factory=dict)


def tokenize(text: str) -> list[int]:
    """Whitespace tokenizer producing integer token ids.

    Words that are plain decimal integers are taken as literal token ids (the
    synthetic corpora are written this way); any other word is lower-cased and
    hashed into ``[0, 2**31)``.
    """
    out = []
    for word in text.split():
        if _INT_TOKEN.match(word):
            out.append(int(word))
        else:
            digest = hashlib.blake2b(word.lower().encode("utf-8"), digest_size=8).digest()
            out.append(int.from_bytes(digest, "little") % _TOKEN_SPACE)
    return out


def resolve_date(cands: DateCandidates) -> float:
    for value in (cands.extracted_date, cands.last_modified, cands.header_date):
        if value is not None:
            return value
    return cands.crawl_date


def order_stream(docs: Iterable[DocumentRecord]) -> list[DocumentRecord]:
    """Sort by (timestamp, doc_id); duplicate ids are rejected."""
    docs = list(docs)
    seen: set[str] = set()
    for d in docs:
        if d.doc_id in seen:
            raise DuplicateIdError(f"duplicate doc_id {d.doc_id!r}")
        seen.add(d.doc_id)
    return sorted(docs, key=lambda d: (d.timestamp, d.doc_id))


def split_passages(
    doc: DocumentRecord,
    max_passage_tokens: int = DEFAULT_MAX_PASSAGE_TOKENS,
    first_passage_id: int = 0,
    overlap: int = 0,
    tokens: Sequence[int] | None = None,
) -> list[PassageRecord]:
    if max_passage_tokens < 1:
        raise ValueError("max_passage_tokens must be >= 1")
    if not 0 <= overlap < max_passage_tokens:
        raise ValueError("overlap must be in [0, max_passage_tokens)")
    toks = list(doc.tokens() if tokens is None else tokens)
    stride = max_passage_tokens - overlap
    out = []
    start = 0
    while start < len(toks):
        window = tuple(toks[start : start + max_passage_tokens])
        out.append(PassageRecord(first_passage_id + len(out), doc.doc_id, len(out), window))
        if start + max_passage_tokens >= len(toks):
            break
        start += stride
    return out


def passage_stream(
    docs: Iterable[DocumentRecord], max_passage_tokens: int, overlap: int = 0
) -> Iterator[tuple[DocumentRecord, list[PassageRecord]]]:
    """Yield each non-empty document with its passages.

    Passage ids are assigned sequentially from 0 in stream order; documents
    that tokenize to nothing are skipped and consume no ids.
    """
    next_pid = 0
    for doc in docs:
        passages = split_passages(doc, max_passage_tokens, next_pid, overlap)
        if not passages:
            continue
        next_pid += len(passages)
        yield doc, passages


# -- corpus files -----------------------------------------------------------


def _parse_time(value, field_name: str, line_no: int) -> float | None:
    if value is None or value == "":
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
        try:
            dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
        except ValueError as exc:
            raise FormatError(f"line {line_no}: bad {field_name} {value!r}") from exc
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp()
    raise FormatError(f"line {line_no}: bad {field_name} {value!r}")


def read_corpus(path: str | Path) -> list[DocumentRecord]:
    """Read a JSON-lines corpus and resolve each record's timestamp."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
            if not isinstance(rec, dict) or "doc_id" not in rec:
                raise FormatError(f"{path}:{line_no}: record needs a doc_id")
            crawl = _parse_time(rec.get("crawl_date"), "crawl_date", line_no)
            if crawl is None:
                raise FormatError(f"{path}:{line_no}: crawl_date is required")
            cands = DateCandidates(
                crawl_date=crawl,
                extracted_date=_parse_time(rec.get("date"), "date", line_no),
                last_modified=_parse_time(rec.get("last_modified"), "last_modified", line_no),
                header_date=_parse_time(rec.get("header_date"), "header_date", line_no),
            )
            docs.append(
                DocumentRecord(
                    doc_id=str(rec["doc_id"]),
                    timestamp=resolve_date(cands),
                    title=str(rec.get("title") or ""),
                    body=str(rec.get("body") or ""),
                )
            )
    return docs


def write_corpus(docs: Iterable[DocumentRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            rec = {"doc_id": d.doc_id, "title": d.title, "body": d.body, "crawl_date": d.timestamp}
            fh.write(json.dumps(rec) + "\n")


def write_order_manifest(docs: Iterable[DocumentRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(f"{d.doc_id}\t{d.timestamp!r}\n")


def read_queries(path: str | Path) -> list[Query]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{line_no}: expected query_id<TAB>text")
            qid, text = line.split("\t", 1)
            out.append(Query(qid, text))
    return out


def write_queries(queries: Iterable[Query], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            if "\t" in q.query_id or "\n" in q.text:
                raise DataError(f"query {q.query_id!r} cannot be written as TSV")
            fh.write(f"{q.query_id}\t{q.text}\n")


# -- synthetic drifting stream -----------------------------------------------


def default_birth_times(n_concepts: int) -> tuple[float, ...]:
    """Two concepts present from the start, the rest born at evenly spaced
    positions up to 0.97, so every stream quarter sees new concepts arrive."""
    if n_concepts < 1:
        raise InvalidSpecError("n_concepts must be >= 1")
    if n_concepts <= 2:
        return tuple([0.0] * n_concepts)
    return tuple([0.0, 0.0] + [round(0.97 * k / (n_concepts - 2), 4) for k in range(1, n_concepts - 1)])


def drift_spec(n_docs: int = 2000, n_concepts: int = 24, seed: int = 0, **kw) -> SyntheticStreamSpec:
    return SyntheticStreamSpec(
        n_docs=n_docs, n_concepts=n_concepts,
        concept_birth_times=default_birth_times(n_concepts), seed=seed, **kw,
    )


def stationary_spec(n_docs: int = 2000, n_concepts: int = 24, seed: int = 0, **kw) -> SyntheticStreamSpec:
    return SyntheticStreamSpec(
        n_docs=n_docs, n_concepts=n_concepts,
        concept_birth_times=tuple([0.0] * n_concepts), seed=seed, **kw,
    )


def generate_drift_stream(spec: SyntheticStreamSpec) -> DriftStream:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5EED])
    births = np.asarray(spec.concept_birth_times, dtype=np.float64)
    V = spec.vocab_per_concept

    docs: list[DocumentRecord] = []
    doc_concepts: dict[str, int] = {}
    width = max(6, len(str(spec.n_docs)))
    for i in range(spec.n_docs):
        position = i / spec.n_docs
        alive = np.flatnonzero(births <= position)
        # a newly born concept is "hot" for a while and takes a larger share
        w = 1.0 + spec.burst * np.exp(-(position - births[alive]) / spec.burst_decay)
        concept = int(alive[rng.choice(len(alive), p=w / w.sum())])
        toks = concept * V + rng.integers(0, V, size=spec.tokens_per_doc)
        doc_id = f"doc{i:0{width}d}"
        docs.append(
            DocumentRecord(
                doc_id=doc_id,
                timestamp=spec.start_timestamp + 3600.0 * i,
                body=" ".join(str(int(t)) for t in toks),
            )
        )
        doc_concepts[doc_id] = concept

    present = sorted(set(doc_concepts.values()))
    queries: list[Query] = []
    query_concepts: dict[str, int] = {}
    qrels: dict[str, dict[str, int]] = {}
    for j in range(spec.n_queries):
        concept = present[j % len(present)]
        toks = concept * V + rng.integers(0, V, size=spec.query_tokens)
        qid = f"q{j:04d}"
        queries.append(Query(qid, " ".join(str(int(t)) for t in toks)))
        query_concepts[qid] = concept
        qrels[qid] = {d: int(c == concept) for d, c in doc_concepts.items()}
    return DriftStream(docs, queries, qrels, doc_concepts, query_concepts)


def stream_fraction_docs(docs: Sequence[DocumentRecord], fraction: float) -> list[DocumentRecord]:
    """The first ``fraction`` of a stream (at least one document when fraction > 0)."""
    n = min(len(docs), math.ceil(fraction * len(docs) - 1e-9))
    return list(docs[: max(n, 1 if fraction > 0 else 0)])
