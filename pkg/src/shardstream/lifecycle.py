"""Hierarchical shard lifecycle for a time-ordered document stream.

Documents are grouped by stream ordinal into blocks of ``B`` (small) and
``A = k*B`` (large) documents. Each document is indexed three times:

1. on arrival, into the newest (incomplete) shard using the most recently
   trained model, or into the exact bootstrap shard if no model exists yet;
2. when its B-block fills, with a model trained on that block;
3. when its A-block fills, with a model trained on the whole A-block, at
   which point the block's small shards are retired.

At every moment the active shards partition the ingested documents.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .config import LifecycleConfig
from .embed import fingerprint_of
from .errors import ConfigError, DataError, FormatError, InvariantViolation, OrderingError
from .model import ModelConfig, ShardModel, build_shard_model
from .shard import Phase, ShardBuilder, ShardIndex, load_shard, save_shard
from .stream import DocumentRecord, PassageRecord

log = logging.getLogger(__name__)

BOOTSTRAP_ID = "boot"
MANIFEST_VERSION = 1


@dataclass
class IngestDoc:
    """A stream document ready for indexing: passages plus their token vectors."""

    ordinal: int
    doc: DocumentRecord
    passages: list[PassageRecord]
    matrices: list[np.ndarray]

    @property
    def doc_id(self) -> str:
        return self.doc.doc_id


# -- events -------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapExact:
    ordinal: int
    doc_id: str


@dataclass(frozen=True)
class IndexedIntoIncomplete:
    ordinal: int
    doc_id: str
    model_id: str


@dataclass(frozen=True)
class SmallShardSealed:
    ordinal: int
    shard_id: str
    model_id: str
    doc_range: tuple[int, int]
    retired: tuple[str, ...] = ()


@dataclass(frozen=True)
class LargeShardSealed:
    ordinal: int
    shard_id: str
    model_id: str
    doc_range: tuple[int, int]
    retired: tuple[str, ...] = ()


LifecycleEvent = Union[BootstrapExact, IndexedIntoIncomplete, SmallShardSealed, LargeShardSealed]


# -- shard arithmetic ------------------------------------------------------------------


def shard_count(N: int, A: int, B: int) -> tuple[int, int, int, int]:
    """(large, small, incomplete, total) active shards after N documents."""
    if B < 1 or A < 2 * B or A % B != 0:
        raise ConfigError(f"need A = k*B with k >= 2 (got A={A}, B={B})")
    if N < 0:
        raise ConfigError("N must be >= 0")
    n_large, r = divmod(N, A)
    n_small, rest = divmod(r, B)
    n_incomplete = 1 if rest else 0
    return n_large, n_small, n_incomplete, n_large + n_small + n_incomplete


def reindex_count(doc_position_in_block: int, bootstrap: bool = False) -> int:
    """Index passes a document receives over its lifetime.

    Position within the block does not matter: every document is indexed
    once on arrival (exactly, for bootstrap documents) and is then rebuilt
    with its small-shard and large-shard models.
    """
    if doc_position_in_block < 0:
        raise ValueError("position must be >= 0")
    return 1 + 2


def reindex_work(N: int, A: int, B: int) -> dict[str, int]:
    """Document-index passes needed for N documents (no bootstrap absorption)."""
    n_large, n_small, n_inc, _ = shard_count(N, A, B)
    arrival = N
    small = (n_large * A // B + n_small) * B
    large = n_large * A
    return {"arrival": arrival, "small_rebuilds": small, "large_rebuilds": large,
            "total": arrival + small + large}


def check_partition(shards: Sequence[ShardIndex], n_ingested: int) -> None:
    """Raise InvariantViolation unless the shards tile ordinals [0, n_ingested) exactly."""
    spans = []
    for s in shards:
        if s.n_passages == 0:
            continue
        ords = np.unique(s.doc_ordinals)
        lo, hi = int(ords[0]), int(ords[-1])
        if hi - lo + 1 != len(ords):
            raise InvariantViolation(f"shard {s.shard_id} covers a non-contiguous ordinal set")
        spans.append((lo, hi, s.shard_id))
    spans.sort()
    expected = 0
    for lo, hi, sid in spans:
        if lo != expected:
            kind = "overlaps" if lo < expected else "leaves a gap before"
            raise InvariantViolation(f"shard {sid} {kind} ordinal {expected}")
        expected = hi + 1
    if expected != n_ingested:
        raise InvariantViolation(f"active shards cover {expected} documents, {n_ingested} ingested")


# -- persistence ---------------------------------------------------------------------


class IndexStore:
    """Directory holding sealed shards plus an engine manifest.

    The manifest is rewritten atomically after every seal. Shards that are
    not yet sealed (the incomplete shard or the bootstrap shard) are written
    as *tail* shards only when an ingest run finishes; a resumed run discards
    them and replays their documents from the stream.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.shard_dir = self.root / "shards"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def read_manifest(self) -> dict:
        try:
            man = json.loads(self.manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.manifest_path}: unreadable manifest ({exc})") from exc
        if man.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"{self.manifest_path}: unsupported manifest version")
        return man

    def write_manifest(self, man: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        man = dict(man, format_version=MANIFEST_VERSION)
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.manifest_path)

    def save(self, shard: ShardIndex) -> None:
        target = self.shard_dir / shard.shard_id
        if target.exists():
            shutil.rmtree(target)
        tmp = self.shard_dir / f".{shard.shard_id}.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        save_shard(shard, tmp)
        os.replace(tmp, target)

    def load(self, shard_id: str) -> ShardIndex:
        return load_shard(self.shard_dir / shard_id)

    def remove(self, shard_id: str) -> None:
        target = self.shard_dir / shard_id
        if target.exists():
            shutil.rmtree(target)

    def load_snapshot(self) -> list[ShardIndex]:
        man = self.read_manifest()
        ids = [a["shard_id"] for a in man["active"]] + list(man.get("tail", []))
        return [self.load(sid) for sid in ids]


def _shard_entry(s: ShardIndex) -> dict:
    return {"shard_id": s.shard_id, "phase": s.phase.value, "doc_range": list(s.doc_range),
            "model_id": s.model_id}


# -- the state machine --------------------------------------------------------------------


@dataclass
class BuildRecord:
    shard_id: str
    phase: str
    n_docs: int
    seconds: float


class Lifecycle:
    """Single-writer ingest state machine.

    ``snapshot()`` returns an immutable tuple of sealed shard views covering
    every ingested document; searchers use it without blocking ingest.
    """

    def __init__(self, config: LifecycleConfig, model_config: ModelConfig, dim: int,
                 embedder_fingerprint: bytes, store: IndexStore | None = None,
                 manifest_extra: dict | None = None):
        config.validate()
        model_config.validate()
        self.config = config
        self.model_config = model_config
        self.dim = dim
        self.fingerprint = bytes(embedder_fingerprint)
        self.store = store
        self.manifest_extra = dict(manifest_extra or {})

        self.n_ingested = 0
        self.large: list[ShardIndex] = []
        self.small: list[ShardIndex] = []
        self.retired: list[str] = []
        self.bootstrap: ShardBuilder | None = None
        self.bootstrap_done = False
        self.incomplete: ShardBuilder | None = None
        self.raw: list[IngestDoc] = []  # documents whose large shard is not yet sealed
        self.last_model: ShardModel | None = None
        self.events: list[LifecycleEvent] = []
        self.passes: list[int] = []
        self.builds: list[BuildRecord] = []
        self.sealed_upto = 0
        self._snapshot: tuple[ShardIndex, ...] | None = None

    # -- queries over the state --------------------------------------------------------------

    @property
    def A(self) -> int:
        return self.config.A

    @property
    def B(self) -> int:
        return self.config.B

    def select_prior_model(self) -> ShardModel | None:
        """Most recently sealed model of either size; None means bootstrap (exact) indexing.

        A large shard is always sealed right after the last small shard of its
        block, so strict recency already prefers a fresh large model.
        """
        return self.last_model

    def snapshot(self) -> tuple[ShardIndex, ...]:
        if self._snapshot is None:
            shards = list(self.large) + list(self.small)
            if self.bootstrap is not None and len(self.bootstrap):
                shards.append(self.bootstrap.snapshot())
            if self.incomplete is not None and len(self.incomplete):
                shards.append(self.incomplete.snapshot())
            self._snapshot = tuple(shards)
        return self._snapshot

    def active_counts(self) -> tuple[int, int, int, int]:
        inc = 1 if (self.incomplete is not None and len(self.incomplete)) else 0
        boot = 1 if (self.bootstrap is not None and len(self.bootstrap)) else 0
        n_l, n_s, n_i = len(self.large), len(self.small), inc + boot
        return n_l, n_s, n_i, n_l + n_s + n_i

    def check_invariants(self) -> None:
        check_partition(self.snapshot(), self.n_ingested)
        if len(self.small) > self.config.k - 1:
            raise InvariantViolation(f"{len(self.small)} small shards active, at most k-1 allowed")
        if self.bootstrap_done and self.active_counts() != shard_count(self.n_ingested, self.A, self.B):
            raise InvariantViolation(
                f"active shards {self.active_counts()} != {shard_count(self.n_ingested, self.A, self.B)}"
            )

    # -- ingest --------------------------------------------------------------------------------

    def ingest(self, d: IngestDoc) -> list[LifecycleEvent]:
        if d.ordinal != self.n_ingested:
            raise OrderingError(f"expected ordinal {self.n_ingested}, got {d.ordinal}")
        if not d.passages:
            raise DataError(f"document {d.doc_id} has no passages")
        events: list[LifecycleEvent] = []
        self.raw.append(d)
        self.passes.append(1)
        if not self.bootstrap_done:
            if self.bootstrap is None:
                self.bootstrap = ShardBuilder(BOOTSTRAP_ID, "exact", Phase.BOOTSTRAP, self.dim, self.fingerprint)
            self.bootstrap.add(d.ordinal, d.passages, d.matrices)
            events.append(BootstrapExact(d.ordinal, d.doc_id))
        else:
            if self.incomplete is None:
                model = self.select_prior_model()
                sid = f"I{d.ordinal // self.B:06d}"
                self.incomplete = ShardBuilder(sid, "compressed", Phase.SMALL_PRIOR, self.dim,
                                               self.fingerprint, model)
            self.incomplete.add(d.ordinal, d.passages, d.matrices)
            events.append(IndexedIntoIncomplete(d.ordinal, d.doc_id, self.incomplete.model.model_id))
        self.n_ingested += 1
        self._snapshot = None

        if self.n_ingested % self.B == 0:
            if not self.bootstrap_done:
                if self._bootstrap_ready():
                    starts = list(range(0, self.n_ingested, self.B))
                    for i, start in enumerate(starts):
                        last = i == len(starts) - 1
                        events += self._seal_small(start, retire_bootstrap=last)
                    self.bootstrap = None
                    self.bootstrap_done = True
            else:
                self.incomplete = None
                events += self._seal_small(self.n_ingested - self.B)
            self._snapshot = None
        self.events.extend(events)
        return events

    def _bootstrap_ready(self) -> bool:
        n_passages = sum(len(d.passages) for d in self.raw)
        return (n_passages >= self.config.min_bootstrap_passages
                and self.n_ingested >= self.config.min_bootstrap_docs)

    def _block_docs(self, start: int, size: int) -> list[IngestDoc]:
        first = self.raw[0].ordinal
        docs = self.raw[start - first : start - first + size]
        if len(docs) != size or docs[0].ordinal != start:
            raise InvariantViolation(f"raw buffer does not hold ordinals [{start}, {start + size})")
        return docs

    def _train_and_build(self, shard_id: str, phase: Phase, docs: list[IngestDoc]) -> ShardIndex:
        t0 = time.perf_counter()
        passages = [p for d in docs for p in d.passages]
        mats = [m for d in docs for m in d.matrices]
        ords = [d.ordinal for d in docs for _ in d.passages]
        seed = int.from_bytes(fingerprint_of({"seed": self.model_config.seed, "shard": shard_id})[:8], "little")
        mc = ModelConfig(**{**self.model_config.__dict__, "seed": seed})
        model = build_shard_model(mats, mc, self.fingerprint, shard_id, [p.passage_id for p in passages])
        builder = ShardBuilder(shard_id, "compressed", phase, self.dim, self.fingerprint, model)
        builder.add(ords, passages, mats)
        shard = builder.seal()
        for d in docs:
            self.passes[d.ordinal] += 1
        self.last_model = model
        self.builds.append(BuildRecord(shard_id, phase.value, len(docs), time.perf_counter() - t0))
        return shard

    def _seal_small(self, start: int, retire_bootstrap: bool = False) -> list[LifecycleEvent]:
        docs = self._block_docs(start, self.B)
        sid = f"S{start // self.B:06d}"
        shard = self._train_and_build(sid, Phase.SMALL_OWN, docs)
        self.small.append(shard)
        retired = (BOOTSTRAP_ID,) if retire_bootstrap else ()
        end = start + self.B
        events: list[LifecycleEvent] = [SmallShardSealed(self.n_ingested - 1, sid, shard.model_id, (start, end - 1), retired)]
        self._persist_seal(shard, retired, sealed_upto=end)
        if end % self.A == 0:
            events += self._seal_large(end - self.A)
        return events

    def _seal_large(self, start: int) -> list[LifecycleEvent]:
        docs = self._block_docs(start, self.A)
        sid = f"L{start // self.A:05d}"
        shard = self._train_and_build(sid, Phase.LARGE, docs)
        end = start + self.A
        retired = tuple(s.shard_id for s in self.small)
        if any(s.doc_range[0] < start or s.doc_range[1] >= end for s in self.small):
            raise InvariantViolation(f"small shards outside A-block [{start}, {end}) at large seal")
        self.small = []
        self.large.append(shard)
        self.raw = [d for d in self.raw if d.ordinal >= end]
        self._persist_seal(shard, retired, sealed_upto=end)
        return [LargeShardSealed(self.n_ingested - 1, sid, shard.model_id, (start, end - 1), retired)]

    # -- persistence ------------------------------------------------------------------------------

    def _manifest(self, complete: bool = False, tail: Sequence[str] = ()) -> dict:
        return {
            **self.manifest_extra,
            "embedder_fingerprint": self.fingerprint.hex(),
            "A": self.A, "B": self.B,
            "sealed_upto": self.sealed_upto,
            "n_ingested": self.n_ingested if complete else self.sealed_upto,
            "complete": complete,
            "active": [_shard_entry(s) for s in self.large + self.small],
            "retired": list(self.retired),
            "last_model_shard": self.last_model.model_id if self.last_model is not None else None,
            "tail": list(tail),
        }

    def _persist_seal(self, shard: ShardIndex, retired: Sequence[str], sealed_upto: int) -> None:
        self.sealed_upto = sealed_upto
        self.retired.extend(retired)
        if self.store is None:
            return
        self.store.save(shard)
        self.store.write_manifest(self._manifest())
        for sid in retired:
            self.store.remove(sid)

    def finalize(self) -> None:
        """Persist the unsealed tail so the index on disk is searchable."""
        if self.store is None:
            return
        tail = []
        for b in (self.bootstrap, self.incomplete):
            if b is not None and len(b):
                self.store.save(b.snapshot())
                tail.append(b.shard_id)
        self.store.write_manifest(self._manifest(complete=True, tail=tail))

    @classmethod
    def resume(cls, config: LifecycleConfig, model_config: ModelConfig, dim: int,
               embedder_fingerprint: bytes, store: IndexStore,
               manifest_extra: dict | None = None) -> "Lifecycle":
        """Rebuild the state recorded at the last seal.

        Tail shards are dropped. The caller must then :meth:`restore_raw` the
        documents in ``[block_start, sealed_upto)`` and re-ingest from
        ``sealed_upto``.
        """
        man = store.read_manifest()
        if man["embedder_fingerprint"] != bytes(embedder_fingerprint).hex():
            raise DataError("index was built with a different embedder")
        if man["A"] != config.A or man["B"] != config.B:
            raise DataError("index was built with different shard sizes")
        lc = cls(config, model_config, dim, embedder_fingerprint, store, manifest_extra)
        for sid in man.get("tail", []):
            store.remove(sid)
        shards = [store.load(a["shard_id"]) for a in man["active"]]
        for s in shards:
            if s.embedder_fingerprint != lc.fingerprint:
                raise DataError(f"shard {s.shard_id} was built with a different embedder")
            (lc.large if s.phase == Phase.LARGE else lc.small).append(s)
        lc.retired = list(man.get("retired", []))
        lc.sealed_upto = lc.n_ingested = int(man["sealed_upto"])
        lc.bootstrap_done = lc.sealed_upto > 0
        last = man.get("last_model_shard")
        if last is not None:
            lc.last_model = next(s.model for s in shards if s.model_id == last)
        lc.passes = [0] * lc.n_ingested
        store.write_manifest(lc._manifest())
        return lc

    @property
    def block_start(self) -> int:
        return (self.sealed_upto // self.A) * self.A

    def restore_raw(self, d: IngestDoc) -> None:
        """Re-attach vectors of an already sealed document of the open A-block."""
        expected = self.block_start + len(self.raw)
        if d.ordinal != expected or d.ordinal >= self.sealed_upto:
            raise OrderingError(f"restore expected ordinal {expected}, got {d.ordinal}")
        self.raw.append(d)
