"""Glue between the stream, an embedder, the lifecycle and the on-disk store."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .config import EngineConfig
from .embed import Embedder, QueryEmbedding
from .errors import ConfigError, DataError
from .lifecycle import IndexStore, IngestDoc, Lifecycle, check_partition
from .search import MergedResult, search_many
from .shard import ShardIndex
from .stream import DocumentRecord, Query, passage_stream

log = logging.getLogger(__name__)


def embed_stream(docs: Iterable[DocumentRecord], embedder: Embedder, max_passage_tokens: int,
                 overlap: int = 0) -> Iterator[IngestDoc]:
    """Split and embed documents in stream order, numbering them from 0."""
    for ordinal, (doc, passages) in enumerate(passage_stream(docs, max_passage_tokens, overlap)):
        yield IngestDoc(ordinal, doc, passages, [embedder.embed_passage(p) for p in passages])


def embed_queries(queries: Sequence[Query], embedder: Embedder) -> list[QueryEmbedding]:
    return [embedder.embed_query(q.text, q.query_id) for q in queries]


def new_lifecycle(config: EngineConfig, embedder: Embedder, store: IndexStore | None = None,
                  manifest_extra: dict | None = None) -> Lifecycle:
    if embedder.dim != config.dim:
        raise ConfigError(f"embedder dim {embedder.dim} != configured dim {config.dim}")
    return Lifecycle(config.lifecycle_config(), config.model_config(), config.dim,
                     embedder.fingerprint, store, manifest_extra)


def run_lifecycle(docs: Iterable[DocumentRecord], config: EngineConfig, embedder: Embedder,
                  check: bool = False) -> Lifecycle:
    """In-memory lifecycle over a whole stream."""
    lc = new_lifecycle(config, embedder)
    for d in embed_stream(docs, embedder, config.max_passage_tokens, config.passage_overlap):
        lc.ingest(d)
        if check:
            lc.check_invariants()
    return lc


@dataclass
class IngestOutcome:
    lifecycle: Lifecycle | None
    n_ingested: int
    resumed_from: int
    noop: bool = False


def ingest_to_store(docs: Sequence[DocumentRecord], config: EngineConfig, embedder: Embedder,
                    out_dir: str | Path, corpus_digest: str = "", limit: int | None = None) -> IngestOutcome:
    """Index a stream into ``out_dir``, resuming from its manifest if present.

    ``limit`` stops after that many documents without finalizing, which
    leaves the directory as an interrupted run would.
    """
    store = IndexStore(out_dir)
    extra = {"config": config.to_ini(), "corpus_digest": corpus_digest}
    resumed_from = 0
    if store.exists():
        man = store.read_manifest()
        if man.get("corpus_digest") != corpus_digest or man.get("config") != config.to_ini():
            raise DataError(f"{out_dir} holds an index of a different corpus or config")
        if man.get("complete"):
            return IngestOutcome(None, int(man["n_ingested"]), int(man["n_ingested"]), noop=True)
        lc = Lifecycle.resume(config.lifecycle_config(), config.model_config(), config.dim,
                              embedder.fingerprint, store, extra)
        resumed_from = lc.sealed_upto
    else:
        lc = new_lifecycle(config, embedder, store, extra)
        store.write_manifest(lc._manifest())
    log.info("ingest into %s from document %d", out_dir, resumed_from)

    for d in embed_stream(docs, embedder, config.max_passage_tokens, config.passage_overlap):
        if d.ordinal < lc.block_start:
            continue
        if d.ordinal < resumed_from:
            lc.restore_raw(d)
            continue
        if limit is not None and d.ordinal >= limit:
            return IngestOutcome(lc, lc.n_ingested, resumed_from)
        lc.ingest(d)
    lc.check_invariants()
    lc.finalize()
    return IngestOutcome(lc, lc.n_ingested, resumed_from)


def load_index(index_dir: str | Path) -> tuple[list[ShardIndex], dict]:
    store = IndexStore(index_dir)
    man = store.read_manifest()
    if not man.get("complete"):
        raise DataError(f"{index_dir}: ingest did not finish; rerun ingest to resume")
    shards = store.load_snapshot()
    check_partition(shards, int(man["n_ingested"]))
    return shards, man


def search_queries(queries: Sequence[QueryEmbedding], shards: Sequence[ShardIndex],
                   config: EngineConfig) -> list[MergedResult]:
    return search_many(queries, shards, config.search_params(), config.top_docs, config.workers)
