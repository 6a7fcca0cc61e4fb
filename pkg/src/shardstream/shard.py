"""Single-shard indexes and search.

A shard is either *compressed* (centroid ids + packed residuals, with
centroid inverted lists) or *exact* (raw token vectors, used only while the
stream is too young to train a model). Shards are built through
:class:`ShardBuilder` and are immutable once sealed.

Search over a compressed shard runs three stages:

1. probe the ``nprobe`` best centroids of every query token and collect the
   passages in their inverted lists;
2. score candidates with centroid vectors only;
3. decode the best ``candidate_factor * n_per_shard`` candidates and score
   them exactly.

Every ranking is ordered by (score desc, passage_id asc).
"""

from __future__ import annotations

import enum
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec
from .embed import QueryEmbedding, read_vectors, write_vectors
from .errors import (
    ConfigError,
    FormatError,
    IncompatibleEmbedderError,
    InvariantViolation,
    StateError,
)
from .model import ShardModel
from .stream import PassageRecord

SHARD_FORMAT_VERSION = 1
PSIV_MAGIC = b"PSIV"
_POSTING = np.dtype([("pid", "<u8"), ("pos", "<u4")])


class Phase(str, enum.Enum):
    BOOTSTRAP = "bootstrap"
    SMALL_PRIOR = "small_prior_model"
    SMALL_OWN = "small_own_model"
    LARGE = "large"
    STANDALONE = "standalone"


@dataclass(frozen=True)
class SearchParams:
    n_per_shard: int = 50
    nprobe: int = 4
    candidate_factor: int = 4

    def __post_init__(self):
        if min(self.n_per_shard, self.nprobe, self.candidate_factor) < 1:
            raise ConfigError("search parameters must all be >= 1")


@dataclass(frozen=True)
class ScoredPassage:
    passage_id: int
    doc_id: str
    score: float
    shard_id: str = ""


def exact_maxsim(q: np.ndarray, p: np.ndarray) -> float:
    """Sum over query rows of the best dot product against passage rows."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.ndim != 2 or p.ndim != 2 or (len(p) and q.shape[1] != p.shape[1]):
        raise ConfigError(f"dimension mismatch: query {q.shape}, passage {p.shape}")
    if len(p) == 0:
        return float("-inf")
    return float((q @ p.T).max(axis=1).sum())


def token_similarities(q: np.ndarray, vectors: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """(n_query, n_tokens) dot products in float64.

    Each entry is summed over the contiguous last axis, so its value depends
    only on the two vectors involved and not on how many other tokens share
    the call. BLAS blocking gives no such guarantee, and exact shards must
    score identically however the corpus is partitioned.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(vectors, dtype=np.float64)
    out = np.empty((len(q), len(v)))
    for s in range(0, len(v), chunk):
        out[:, s : s + chunk] = (q[:, None, :] * v[None, s : s + chunk, :]).sum(axis=2)
    return out


def _segment_maxsim(q: np.ndarray, vectors: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """MaxSim of ``q`` against consecutive non-empty segments of ``vectors``."""
    if len(lengths) == 0:
        return np.zeros(0)
    sims = token_similarities(q, vectors)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return np.maximum.reduceat(sims, starts, axis=1).sum(axis=0)


def _gather(offsets: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Token indices of the given passages (concatenated) and their lengths."""
    starts = offsets[rows]
    lengths = offsets[rows + 1] - starts
    total = int(lengths.sum())
    seg_start = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    idx = np.repeat(starts - seg_start, lengths) + np.arange(total)
    return idx, lengths


@dataclass
class ShardIndex:
    shard_id: str
    kind: str  # "compressed" | "exact"
    phase: Phase
    dim: int
    embedder_fingerprint: bytes
    passage_ids: np.ndarray  # (P,) int64, ascending
    doc_ids: np.ndarray  # (P,) object
    window_index: np.ndarray  # (P,) int64
    doc_ordinals: np.ndarray  # (P,) int64
    offsets: np.ndarray  # (P + 1,) int64 token offsets
    model: ShardModel | None = None
    centroid_ids: np.ndarray | None = None
    residuals: np.ndarray | None = None
    vectors: np.ndarray | None = None
    ivf_offsets: np.ndarray | None = None
    ivf_rows: np.ndarray | None = None  # local passage row of each posting
    ivf_positions: np.ndarray | None = None
    sealed: bool = True
    build_seconds: float = 0.0

    @property
    def n_passages(self) -> int:
        return len(self.passage_ids)

    @property
    def n_tokens(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_docs(self) -> int:
        return len(np.unique(self.doc_ordinals))

    @property
    def doc_range(self) -> tuple[int, int] | None:
        if self.n_passages == 0:
            return None
        return int(self.doc_ordinals.min()), int(self.doc_ordinals.max())

    @property
    def model_id(self) -> str | None:
        return self.model.model_id if self.model is not None else None

    def doc_id_set(self) -> set[str]:
        return set(self.doc_ids.tolist())

    def postings(self, centroid: int) -> list[tuple[int, int]]:
        s, e = self.ivf_offsets[centroid], self.ivf_offsets[centroid + 1]
        return list(zip(self.passage_ids[self.ivf_rows[s:e]].tolist(), self.ivf_positions[s:e].tolist()))

    def passage_vectors(self, row: int) -> np.ndarray:
        """Stored (exact) or decoded (compressed) vectors of one passage."""
        s, e = self.offsets[row], self.offsets[row + 1]
        if self.kind == "exact":
            return self.vectors[s:e]
        return codec.decode_tokens(self.centroid_ids[s:e], self.residuals[s:e], self.model)

    def check_invariants(self) -> None:
        P = self.n_passages
        if np.any(np.diff(self.passage_ids) <= 0):
            raise InvariantViolation(f"shard {self.shard_id}: passage ids not strictly ascending")
        if len(self.offsets) != P + 1 or np.any(np.diff(self.offsets) < 1):
            raise InvariantViolation(f"shard {self.shard_id}: empty or malformed passage")
        if P:
            ords = np.unique(self.doc_ordinals)
            if ords[-1] - ords[0] + 1 != len(ords):
                raise InvariantViolation(f"shard {self.shard_id}: doc range is not contiguous")
        if self.kind == "compressed":
            if self.ivf_offsets[-1] != self.n_tokens:
                raise InvariantViolation(f"shard {self.shard_id}: postings do not cover every token")
            seen = np.zeros(self.n_tokens, dtype=np.int64)
            np.add.at(seen, self.offsets[self.ivf_rows] + self.ivf_positions, 1)
            if np.any(seen != 1):
                raise InvariantViolation(f"shard {self.shard_id}: a token is not in exactly one posting")

    # -- search -----------------------------------------------------------------

    def search(self, q: QueryEmbedding, params: SearchParams) -> list[ScoredPassage]:
        return search_shard(q, self, params)


def search_shard(q: QueryEmbedding, s: ShardIndex, params: SearchParams) -> list[ScoredPassage]:
    if not s.sealed:
        raise StateError(f"shard {s.shard_id} is not sealed")
    if q.vectors.shape[1] != s.dim:
        raise ConfigError(f"query dim {q.vectors.shape[1]} != shard dim {s.dim}")
    if s.n_passages == 0:
        return []
    Q = np.asarray(q.vectors, dtype=np.float64)
    if s.kind == "exact":
        rows = np.arange(s.n_passages)
        scores = _segment_maxsim(Q, s.vectors, np.diff(s.offsets))
    else:
        rows, scores = _search_compressed(Q, s, params)
    order = np.lexsort((s.passage_ids[rows], -scores))[: params.n_per_shard]
    return [
        ScoredPassage(int(s.passage_ids[rows[i]]), str(s.doc_ids[rows[i]]), float(scores[i]), s.shard_id)
        for i in order
    ]


def _search_compressed(Q: np.ndarray, s: ShardIndex, params: SearchParams) -> tuple[np.ndarray, np.ndarray]:
    model = s.model
    K = model.n_centroids
    C = np.asarray(model.centroids, dtype=np.float64)
    cscores = Q @ C.T  # (nq, K)

    # stage 1: probe
    nprobe = min(params.nprobe, K)
    probes = np.argsort(-cscores, axis=1, kind="stable")[:, :nprobe]
    probe_mask = np.zeros_like(cscores, dtype=bool)
    np.put_along_axis(probe_mask, probes, True, axis=1)
    probed = np.flatnonzero(probe_mask.any(axis=0))
    if probed.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    post_idx, _ = _gather(s.ivf_offsets, probed)
    cand = np.unique(s.ivf_rows[post_idx])
    if cand.size == 0:
        return cand, np.zeros(0)

    # stage 2: centroid-only scores; a query token only sees tokens in its own probes
    tok, lengths = _gather(s.offsets, cand)
    cid = s.centroid_ids[tok].astype(np.int64)
    sims = np.where(probe_mask[:, cid], cscores[:, cid], -np.inf)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    best = np.maximum.reduceat(sims, starts, axis=1)
    approx = np.where(np.isneginf(best), 0.0, best).sum(axis=0)

    # stage 3: exact scores on decoded vectors for the best candidates
    keep = params.candidate_factor * params.n_per_shard
    top = np.lexsort((s.passage_ids[cand], -approx))[:keep]
    rows = cand[top]
    tok, lengths = _gather(s.offsets, rows)
    decoded = codec.decode_tokens(s.centroid_ids[tok], s.residuals[tok], model)
    return rows, _segment_maxsim(Q, decoded, lengths)


# -- building -----------------------------------------------------------------------


class ShardBuilder:
    """Accumulates passages for one shard; ``seal`` freezes it.

    ``snapshot`` returns a sealed copy of the current contents without ending
    the build, which is how the still-growing newest shard stays searchable.
    """

    def __init__(self, shard_id: str, kind: str, phase: Phase, dim: int, embedder_fingerprint: bytes,
                 model: ShardModel | None = None):
        if kind not in ("compressed", "exact"):
            raise ConfigError(f"unknown shard kind {kind!r}")
        if kind == "compressed":
            if model is None:
                raise ConfigError("a compressed shard needs a model")
            model.check_fingerprint(embedder_fingerprint)
            if model.dim != dim:
                raise ConfigError(f"model dim {model.dim} != engine dim {dim}")
        self.shard_id = shard_id
        self.kind = kind
        self.phase = phase
        self.dim = dim
        self.fingerprint = bytes(embedder_fingerprint)
        self.model = model
        self._pids: list[int] = []
        self._docs: list[str] = []
        self._windows: list[int] = []
        self._ordinals: list[int] = []
        self._lengths: list[int] = []
        self._payload: list[tuple[np.ndarray, ...]] = []
        self._sealed = False
        self._cache: ShardIndex | None = None
        self._seconds = 0.0

    def __len__(self) -> int:
        return len(self._pids)

    @property
    def doc_ordinals(self) -> list[int]:
        return sorted(set(self._ordinals))

    def add(self, doc_ordinal, passages: Sequence[PassageRecord], matrices: Sequence[np.ndarray]) -> None:
        """Append passages; ``doc_ordinal`` is one ordinal or one per passage."""
        if self._sealed:
            raise StateError(f"shard {self.shard_id} is sealed")
        t0 = time.perf_counter()
        passages = list(passages)
        ordinals = ([int(doc_ordinal)] * len(passages) if np.isscalar(doc_ordinal)
                    else [int(o) for o in doc_ordinal])
        if len(ordinals) != len(passages) or len(matrices) != len(passages):
            raise ConfigError("passages, matrices and ordinals must have equal length")
        keep, mats = [], []
        last = self._pids[-1] if self._pids else -1
        for i, (p, m) in enumerate(zip(passages, matrices)):
            m = np.asarray(m, dtype=np.float32)
            if m.ndim != 2 or m.shape[1] != self.dim:
                raise ConfigError(f"passage {p.passage_id}: vectors {m.shape}, engine dim {self.dim}")
            if len(m) == 0:
                continue
            if p.passage_id <= last:
                raise InvariantViolation(f"shard {self.shard_id}: passage ids must be added in ascending order")
            last = p.passage_id
            keep.append(i)
            mats.append(m)
        if not keep:
            return
        lengths = [len(m) for m in mats]
        block = np.concatenate(mats)
        if self.kind == "compressed":
            ids, packed = codec.encode_tokens(block, self.model)
            self._payload.append((ids, packed))
        else:
            self._payload.append((block,))
        for i, n in zip(keep, lengths):
            p = passages[i]
            self._pids.append(p.passage_id)
            self._docs.append(p.doc_id)
            self._windows.append(p.window_index)
            self._ordinals.append(ordinals[i])
            self._lengths.append(n)
        self._cache = None
        self._seconds += time.perf_counter() - t0

    def _freeze(self) -> ShardIndex:
        if self._cache is not None:
            return self._cache
        t0 = time.perf_counter()
        lengths = np.asarray(self._lengths, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        idx = ShardIndex(
            shard_id=self.shard_id, kind=self.kind, phase=self.phase, dim=self.dim,
            embedder_fingerprint=self.fingerprint,
            passage_ids=np.asarray(self._pids, dtype=np.int64),
            doc_ids=np.asarray(self._docs, dtype=object),
            window_index=np.asarray(self._windows, dtype=np.int64),
            doc_ordinals=np.asarray(self._ordinals, dtype=np.int64),
            offsets=offsets, model=self.model,
        )
        if self.kind == "exact":
            idx.vectors = (np.concatenate([p[0] for p in self._payload]) if self._payload
                           else np.zeros((0, self.dim), np.float32))
        else:
            nb = codec.code_bytes(self.dim, self.model.residual_bits)
            idx.centroid_ids = (np.concatenate([p[0] for p in self._payload]) if self._payload
                                else np.zeros(0, np.uint32))
            idx.residuals = (np.concatenate([p[1] for p in self._payload]) if self._payload
                             else np.zeros((0, nb), np.uint8))
            _attach_inverted_lists(idx)
        self._seconds += time.perf_counter() - t0
        idx.build_seconds = self._seconds
        self._cache = idx
        return idx

    def snapshot(self) -> ShardIndex:
        return self._freeze()

    def seal(self) -> ShardIndex:
        idx = self._freeze()
        self._sealed = True
        return idx


def _attach_inverted_lists(idx: ShardIndex) -> None:
    K = idx.model.n_centroids
    rows = np.repeat(np.arange(idx.n_passages), np.diff(idx.offsets))
    positions = np.arange(idx.n_tokens) - idx.offsets[rows]
    order = np.argsort(idx.centroid_ids, kind="stable")  # keeps (passage, position) order
    counts = np.bincount(idx.centroid_ids.astype(np.int64), minlength=K)
    idx.ivf_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    idx.ivf_rows = rows[order]
    idx.ivf_positions = positions[order]


def build_compressed_shard(
    shard_id: str,
    passages: Sequence[PassageRecord],
    matrices: Sequence[np.ndarray],
    model: ShardModel,
    embedder_fingerprint: bytes,
    doc_ordinals: Sequence[int],
    phase: Phase = Phase.STANDALONE,
) -> ShardIndex:
    """Encode passages (with their parent-doc stream ordinals) into a sealed shard."""
    b = ShardBuilder(shard_id, "compressed", phase, model.dim, embedder_fingerprint, model)
    b.add(list(doc_ordinals), passages, matrices)
    return b.seal()


def build_exact_shard(
    shard_id: str,
    passages: Sequence[PassageRecord],
    matrices: Sequence[np.ndarray],
    dim: int,
    embedder_fingerprint: bytes,
    doc_ordinals: Sequence[int],
    phase: Phase = Phase.STANDALONE,
) -> ShardIndex:
    b = ShardBuilder(shard_id, "exact", phase, dim, embedder_fingerprint)
    b.add(list(doc_ordinals), passages, matrices)
    return b.seal()


# -- persistence ----------------------------------------------------------------------


def _write_inverted(path: Path, idx: ShardIndex) -> None:
    K = idx.model.n_centroids
    parts = [PSIV_MAGIC, struct.pack("<I", K)]
    for c in range(K):
        s, e = idx.ivf_offsets[c], idx.ivf_offsets[c + 1]
        rec = np.empty(e - s, dtype=_POSTING)
        rec["pid"] = idx.passage_ids[idx.ivf_rows[s:e]]
        rec["pos"] = idx.ivf_positions[s:e]
        parts.append(struct.pack("<Q", e - s))
        parts.append(rec.tobytes())
    path.write_bytes(b"".join(parts))


def _read_inverted(path: Path, idx: ShardIndex) -> None:
    data = path.read_bytes()
    if data[:4] != PSIV_MAGIC:
        raise FormatError(f"{path}: not a PSIV inverted-lists file")
    (K,) = struct.unpack_from("<I", data, 4)
    if K != idx.model.n_centroids:
        raise FormatError(f"{path}: {K} lists but model has {idx.model.n_centroids} centroids")
    off = 8
    counts, pids, poss = [], [], []
    try:
        for _ in range(K):
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            rec = np.frombuffer(data, _POSTING, n, off)
            off += n * _POSTING.itemsize
            counts.append(n)
            pids.append(rec["pid"].astype(np.int64))
            poss.append(rec["pos"].astype(np.int64))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated inverted lists ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    idx.ivf_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    all_pids = np.concatenate(pids) if pids else np.zeros(0, np.int64)
    idx.ivf_rows = np.searchsorted(idx.passage_ids, all_pids)
    idx.ivf_positions = np.concatenate(poss) if poss else np.zeros(0, np.int64)
    if np.any(idx.ivf_rows >= idx.n_passages) or np.any(idx.passage_ids[np.minimum(idx.ivf_rows, idx.n_passages - 1)] != all_pids):
        raise FormatError(f"{path}: posting refers to an unknown passage")


def save_shard(idx: ShardIndex, directory: str | Path) -> None:
    if not idx.sealed:
        raise StateError("only sealed shards can be saved")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "passage_map.tsv", "w", encoding="utf-8") as fh:
        for pid, doc, w, o in zip(idx.passage_ids, idx.doc_ids, idx.window_index, idx.doc_ordinals):
            fh.write(f"{pid}\t{doc}\t{w}\t{o}\n")
    lengths = np.diff(idx.offsets)
    if idx.kind == "exact":
        write_vectors(d / "vectors.psev", idx.dim,
                      ((int(pid), idx.vectors[s:s + n]) for pid, s, n in zip(idx.passage_ids, idx.offsets[:-1], lengths)))
    else:
        idx.model.save(d / "model.psmd")
        codec.write_codes(d / "codes.pscd", (
            codec.CompressedPassage(int(pid), idx.centroid_ids[s:s + n], idx.residuals[s:s + n])
            for pid, s, n in zip(idx.passage_ids, idx.offsets[:-1], lengths)
        ))
        _write_inverted(d / "inverted.psiv", idx)
    manifest = {
        "format_version": SHARD_FORMAT_VERSION,
        "shard_id": idx.shard_id,
        "kind": idx.kind,
        "phase": idx.phase.value,
        "doc_range": list(idx.doc_range) if idx.doc_range else None,
        "model_id": idx.model_id,
        "dim": idx.dim,
        "embedder_fingerprint": idx.embedder_fingerprint.hex(),
        "counts": {"docs": idx.n_docs, "passages": idx.n_passages, "tokens": idx.n_tokens},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_shard(directory: str | Path) -> ShardIndex:
    d = Path(directory)
    try:
        man = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}: unreadable shard manifest ({exc})") from exc
    if man.get("format_version") != SHARD_FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported shard format {man.get('format_version')}")
    pids, docs, wins, ords = [], [], [], []
    with open(d / "passage_map.tsv", encoding="utf-8") as fh:
        for line in fh:
            pid, doc, w, o = line.rstrip("\n").split("\t")
            pids.append(int(pid)); docs.append(doc); wins.append(int(w)); ords.append(int(o))
    dim = int(man["dim"])
    fp = bytes.fromhex(man["embedder_fingerprint"])
    idx = ShardIndex(
        shard_id=man["shard_id"], kind=man["kind"], phase=Phase(man["phase"]), dim=dim,
        embedder_fingerprint=fp, passage_ids=np.asarray(pids, dtype=np.int64),
        doc_ids=np.asarray(docs, dtype=object), window_index=np.asarray(wins, dtype=np.int64),
        doc_ordinals=np.asarray(ords, dtype=np.int64), offsets=np.zeros(1, np.int64),
    )
    if idx.kind == "exact":
        vdim, recs = read_vectors(d / "vectors.psev")
        if vdim != dim:
            raise FormatError(f"{d}: vector dim {vdim} != manifest dim {dim}")
        mats = [recs[p] for p in pids]
        idx.vectors = np.concatenate(mats) if mats else np.zeros((0, dim), np.float32)
        lengths = [len(m) for m in mats]
    else:
        idx.model = ShardModel.load(d / "model.psmd")
        if idx.model.embedder_fingerprint != fp:
            raise IncompatibleEmbedderError(f"{d}: model and shard fingerprints differ")
        codes = codec.read_codes(d / "codes.pscd", dim, idx.model.residual_bits)
        if [c.passage_id for c in codes] != pids:
            raise FormatError(f"{d}: codes and passage map disagree")
        nb = codec.code_bytes(dim, idx.model.residual_bits)
        idx.centroid_ids = np.concatenate([c.centroid_ids for c in codes]) if codes else np.zeros(0, np.uint32)
        idx.residuals = np.concatenate([c.residuals for c in codes]) if codes else np.zeros((0, nb), np.uint8)
        lengths = [len(c) for c in codes]
    idx.offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    if idx.kind == "compressed":
        _read_inverted(d / "inverted.psiv", idx)
    idx.check_invariants()
    return idx
