"""Fan a query out over a set of shards and merge the results.

Shard scores are merged as they are: every shard scores with the same
embedder, so raw MaxSim values are comparable without normalization.
Passages are rolled up into documents with MaxP.
"""

from __future__ import annotations

import heapq
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from .embed import QueryEmbedding
from .errors import ConfigError, EmptyShardError, FormatError, IncompatibleEmbedderError, InvariantViolation
from .shard import ScoredPassage, SearchParams, ShardIndex, search_shard


@dataclass
class MergedResult:
    query_id: str
    ranking: list[tuple[str, float]]  # (doc_id, score), score desc then doc_id asc
    shard_latencies: dict[str, float] = field(default_factory=dict)
    merge_seconds: float = 0.0

    @property
    def latency(self) -> float:
        """Wall time with shards searched in parallel: slowest shard plus merge."""
        return max(self.shard_latencies.values(), default=0.0) + self.merge_seconds

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.ranking]


def merge_rankings(per_shard: Sequence[Sequence[ScoredPassage]], top_docs: int) -> list[tuple[str, float]]:
    """k-way merge of per-shard passage lists into a MaxP document ranking.

    Each input list must already be ordered by (score desc, passage_id asc).
    A document showing up in two different shards breaks the partition
    invariant and raises :class:`InvariantViolation`.
    """
    if top_docs < 1:
        raise ConfigError("top_docs must be >= 1")
    owner: dict[str, int] = {}
    for i, lst in enumerate(per_shard):
        for sp in lst:
            if owner.setdefault(sp.doc_id, i) != i:
                raise InvariantViolation(f"document {sp.doc_id} returned by two shards")
    streams = [((-sp.score, sp.passage_id, sp.doc_id) for sp in lst) for lst in per_shard]
    best: dict[str, float] = {}
    for neg, _, doc in heapq.merge(*streams):
        if doc not in best:
            best[doc] = -neg  # first sighting is the max passage score
    ranking = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranking[:top_docs]


def check_snapshot(shards: Sequence[ShardIndex], fingerprint: bytes | None = None) -> bytes:
    if not shards:
        raise EmptyShardError("no shards to search")
    fp = bytes(fingerprint) if fingerprint is not None else shards[0].embedder_fingerprint
    for s in shards:
        if s.embedder_fingerprint != fp:
            raise IncompatibleEmbedderError(f"shard {s.shard_id} was built with a different embedder")
    return fp


def _timed_search(q: QueryEmbedding, s: ShardIndex, params: SearchParams):
    t0 = time.perf_counter()
    hits = search_shard(q, s, params)
    return hits, time.perf_counter() - t0


def search_all(
    q: QueryEmbedding,
    shards: Sequence[ShardIndex],
    params: SearchParams = SearchParams(),
    top_docs: int = 1000,
    workers: int = 1,
    fingerprint: bytes | None = None,
    pool: ThreadPoolExecutor | None = None,
) -> MergedResult:
    """Search every shard of a snapshot and merge by raw score."""
    check_snapshot(shards, fingerprint)
    if pool is not None:
        outs = list(pool.map(lambda s: _timed_search(q, s, params), shards))
    elif workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(lambda s: _timed_search(q, s, params), shards))
    else:
        outs = [_timed_search(q, s, params) for s in shards]
    t0 = time.perf_counter()
    ranking = merge_rankings([h for h, _ in outs], top_docs)
    merge_s = time.perf_counter() - t0
    lat = {s.shard_id: dt for s, (_, dt) in zip(shards, outs)}
    return MergedResult(q.query_id, ranking, lat, merge_s)


def search_many(
    queries: Iterable[QueryEmbedding],
    shards: Sequence[ShardIndex],
    params: SearchParams = SearchParams(),
    top_docs: int = 1000,
    workers: int = 1,
) -> list[MergedResult]:
    queries = list(queries)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return [search_all(q, shards, params, top_docs, pool=ex) for q in queries]
    return [search_all(q, shards, params, top_docs) for q in queries]


# -- run files ---------------------------------------------------------------------


def format_run(results: Iterable[MergedResult], tag: str = "shardstream") -> str:
    lines = []
    for r in results:
        for rank, (doc, score) in enumerate(r.ranking, start=1):
            lines.append(f"{r.query_id} Q0 {doc} {rank} {score!r} {tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_run(results: Iterable[MergedResult], path: str | Path | TextIO, tag: str = "shardstream") -> None:
    text = format_run(results, tag)
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_run(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    """Rankings by query id, in file order (assumed rank order)."""
    runs: dict[str, list[tuple[str, float]]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{n}: expected 6 columns, got {len(parts)}")
        try:
            score = float(parts[4])
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: bad score {parts[4]!r}") from exc
        runs.setdefault(parts[0], []).append((parts[2], score))
    return runs
