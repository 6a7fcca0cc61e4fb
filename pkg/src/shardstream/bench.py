"""Desk-scale experiments: model staleness sweep, sharded vs single-model
oracle, and indexing throughput."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import EngineConfig
from .embed import Embedder, QueryEmbedding
from .engine import embed_queries, embed_stream, new_lifecycle
from .evaluate import DEFAULT_METRICS, MetricReport, evaluate_run
from .lifecycle import IngestDoc, Lifecycle
from .model import build_shard_model
from .search import MergedResult, search_many
from .shard import ShardIndex, build_compressed_shard, build_exact_shard
from .stream import DriftStream

log = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = (0.05, 0.75, 0.90, 1.00)
THROUGHPUT_FIELDS = (
    "n_docs", "n_passages", "n_tokens", "ingest_seconds", "docs_per_hour", "encode_passes",
    "encode_passes_per_doc", "shard_builds", "n_queries", "mean_query_latency", "max_query_latency",
)


@dataclass
class SweepRow:
    checkpoint: float
    n_train_docs: int
    n_train_tokens: int
    n_centroids: int
    ndcg_at_20: float
    recall_at_1000: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_results(results: Sequence[MergedResult], qrels, metrics=DEFAULT_METRICS) -> MetricReport:
    run = {r.query_id: r.doc_ids() for r in results}
    return evaluate_run(run, qrels, metrics)


def _single_model_shard(docs: Sequence[IngestDoc], train_docs: Sequence[IngestDoc], config: EngineConfig,
                        fingerprint: bytes, shard_id: str) -> ShardIndex:
    mats = [m for d in train_docs for m in d.matrices]
    pids = [p.passage_id for d in train_docs for p in d.passages]
    model = build_shard_model(mats, config.model_config(), fingerprint, shard_id, pids)
    return build_compressed_shard(
        shard_id,
        [p for d in docs for p in d.passages],
        [m for d in docs for m in d.matrices],
        model, fingerprint,
        [d.ordinal for d in docs for _ in d.passages],
    )


def prepare_stream(stream: DriftStream, config: EngineConfig, embedder: Embedder | None):
    if embedder is None:
        embedder = config.make_embedder()
    docs = list(embed_stream(stream.docs, embedder, config.max_passage_tokens, config.passage_overlap))
    queries = embed_queries(stream.queries, embedder)
    return embedder, docs, queries


def drift_sweep(
    stream: DriftStream,
    config: EngineConfig,
    checkpoints: Sequence[float] = DEFAULT_CHECKPOINTS,
    embedder: Embedder | None = None,
    min_training_tokens: int | None = None,
) -> list[SweepRow]:
    """Train one model on each stream prefix and index the whole stream with it."""
    for p in checkpoints:
        if not 0 < p <= 1:
            raise ValueError(f"checkpoint {p} is outside (0, 1]")
    embedder, docs, queries = prepare_stream(stream, config, embedder)
    floor = config.k_min if min_training_tokens is None else min_training_tokens
    rows = []
    for p in checkpoints:
        n_train = min(len(docs), max(1, int(np.ceil(p * len(docs) - 1e-9))))
        train = docs[:n_train]
        n_tok = sum(len(m) for d in train for m in d.matrices)
        if n_tok < floor:
            log.warning("checkpoint %.2f has only %d training tokens; skipped", p, n_tok)
            continue
        shard = _single_model_shard(docs, train, config, embedder.fingerprint, f"p{p:.2f}")
        results = search_many(queries, [shard], config.search_params(), config.top_docs)
        rep = evaluate_results(results, stream.qrels, ("ndcg@20", "recall@1000"))
        rows.append(SweepRow(p, n_train, n_tok, shard.model.n_centroids,
                             rep.mean["ndcg@20"], rep.mean["recall@1000"]))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    head = "Model trained on " + " ".join(f"{r.checkpoint:>7.0%}" for r in rows)
    nd = "nDCG@20          " + " ".join(f"{r.ndcg_at_20:7.3f}" for r in rows)
    rc = "R@1000           " + " ".join(f"{r.recall_at_1000:7.3f}" for r in rows)
    return "\n".join([head, nd, rc])


def run_lifecycle_search(docs: Sequence[IngestDoc], queries: Sequence[QueryEmbedding], config: EngineConfig,
                         embedder: Embedder) -> tuple[Lifecycle, list[MergedResult], float]:
    t0 = time.perf_counter()
    lc = new_lifecycle(config, embedder)
    for d in docs:
        lc.ingest(d)
    elapsed = time.perf_counter() - t0
    lc.check_invariants()
    results = search_many(queries, lc.snapshot(), config.search_params(), config.top_docs, config.workers)
    return lc, results, elapsed


def oracle_comparison(
    stream: DriftStream,
    config: EngineConfig,
    embedder: Embedder | None = None,
    frozen_fraction: float = 0.05,
    exact: bool = False,
) -> dict:
    """Full lifecycle run vs one model trained on everything (the oracle) vs
    one model trained on an early prefix (frozen).

    With ``exact=True`` every index stores raw vectors instead, so the
    sharded run must equal the oracle exactly.
    """
    embedder, docs, queries = prepare_stream(stream, config, embedder)
    fp = embedder.fingerprint
    params, top = config.search_params(), config.top_docs
    all_p = [p for d in docs for p in d.passages]
    all_m = [m for d in docs for m in d.matrices]
    all_o = [d.ordinal for d in docs for _ in d.passages]

    if exact:
        oracle = build_exact_shard("oracle", all_p, all_m, config.dim, fp, all_o)
        parts = []
        step = config.B
        for s in range(0, len(docs), step):
            blk = docs[s : s + step]
            parts.append(build_exact_shard(
                f"X{s // step:06d}", [p for d in blk for p in d.passages], [m for d in blk for m in d.matrices],
                config.dim, fp, [d.ordinal for d in blk for _ in d.passages]))
        sharded_results = search_many(queries, parts, params, top)
        lc_info = {"n_shards": len(parts)}
        frozen = None
    else:
        oracle = _single_model_shard(docs, docs, config, fp, "oracle")
        lc, sharded_results, _ = run_lifecycle_search(docs, queries, config, embedder)
        lc_info = {"n_shards": len(lc.snapshot())}
        n_frozen = max(1, int(np.ceil(frozen_fraction * len(docs) - 1e-9)))
        frozen = _single_model_shard(docs, docs[:n_frozen], config, fp, "frozen")

    oracle_rep = evaluate_results(search_many(queries, [oracle], params, top), stream.qrels)
    sharded_rep = evaluate_results(sharded_results, stream.qrels)
    out = {
        "oracle": oracle_rep.mean,
        "sharded": sharded_rep.mean,
        "ratio": {m: (sharded_rep.mean[m] / oracle_rep.mean[m] if oracle_rep.mean[m] else float("nan"))
                  for m in sharded_rep.mean},
        **lc_info,
    }
    if frozen is not None:
        out["frozen"] = evaluate_results(search_many(queries, [frozen], params, top), stream.qrels).mean
        out["frozen_fraction"] = frozen_fraction
    return out


def throughput_report(lc: Lifecycle, results: Sequence[MergedResult], ingest_seconds: float) -> dict:
    """Schema-stable summary of one lifecycle run and a batch of searches."""
    snap = lc.snapshot()
    lat = [r.latency for r in results]
    n = lc.n_ingested
    report = {
        "n_docs": n,
        "n_passages": int(sum(s.n_passages for s in snap)),
        "n_tokens": int(sum(s.n_tokens for s in snap)),
        "ingest_seconds": ingest_seconds,
        "docs_per_hour": n / ingest_seconds * 3600.0 if ingest_seconds > 0 else float("inf"),
        "encode_passes": int(sum(lc.passes)),
        "encode_passes_per_doc": sorted({int(x) for x in lc.passes}),
        "shard_builds": [b.__dict__ for b in lc.builds],
        "n_queries": len(results),
        "mean_query_latency": float(np.mean(lat)) if lat else 0.0,
        "max_query_latency": float(np.max(lat)) if lat else 0.0,
    }
    assert tuple(report) == THROUGHPUT_FIELDS
    return report


def throughput_bench(stream: DriftStream, config: EngineConfig, embedder: Embedder | None = None) -> dict:
    embedder, docs, queries = prepare_stream(stream, config, embedder)
    lc, results, elapsed = run_lifecycle_search(docs, queries, config, embedder)
    return throughput_report(lc, results, elapsed)


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=float)
