"""Token embedders.

Every embedder returns float32 matrices with unit-norm rows. One embedder
instance serves all shards and queries of an engine; its ``fingerprint`` is
stamped into every shard model so scores from incompatible embedders are
never merged.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import ConfigError, FormatError
from .stream import PassageRecord, SyntheticStreamSpec, tokenize

DEFAULT_DIM = 64
DEFAULT_MAX_QUERY_TOKENS = 64
NORM_TOL = 1e-5

PSEV_MAGIC = b"PSEV"
PSEV_VERSION = 1

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class QueryEmbedding:
    query_id: str
    vectors: np.ndarray  # (n_tokens, dim) float32, unit rows

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


class Embedder(Protocol):
    dim: int

    @property
    def fingerprint(self) -> bytes: ...

    def config(self) -> dict: ...

    def embed_passage(self, passage: PassageRecord) -> np.ndarray: ...

    def embed_query(self, text: str, query_id: str = "") -> QueryEmbedding: ...


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConfigError("cannot normalize a zero vector")
    return (m / norms).astype(np.float32)


def check_token_matrix(m: np.ndarray, dim: int) -> np.ndarray:
    if m.ndim != 2 or m.shape[1] != dim:
        raise ConfigError(f"token matrix has shape {m.shape}, engine dim is {dim}")
    return m


def fingerprint_of(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).digest()


# -- counter-based pseudo-random vectors --------------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return x ^ (x >> np.uint64(31))


def token_keys(seeds, token_ids) -> np.ndarray:
    """uint64 noise keys for (seed, token id) pairs; broadcasts."""
    seeds = np.asarray(seeds).astype(np.uint64)
    toks = np.asarray(token_ids).astype(np.uint64)
    with np.errstate(over="ignore"):
        return _splitmix64(_splitmix64(seeds) ^ toks)


def context_seed(seed: int, prev_token_ids) -> np.ndarray:
    """Per-position seed derived from the engine seed and the previous token (-1 at start)."""
    prev = np.asarray(prev_token_ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        return _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(prev + np.uint64(1)))


def hashed_directions(keys: np.ndarray, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit vectors, one per uint64 key.

    Gaussian components come from Box-Muller over splitmix64 streams, so the
    result depends only on (key, dim) and is identical across processes.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    out = np.empty((keys.size, dim), dtype=np.float64)
    todo = np.arange(keys.size)
    nonce = 0
    while todo.size:
        k = keys[todo][:, None]
        idx = np.arange(dim, dtype=np.uint64)[None, :]
        with np.errstate(over="ignore"):
            base = _splitmix64(k ^ _splitmix64(np.uint64(nonce) * np.uint64(2 * dim + 1) + idx))
            u1 = ((base >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
            u2 = ((_splitmix64(base) >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
        g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        norms = np.linalg.norm(g, axis=1)
        ok = norms > 0
        out[todo[ok]] = g[ok] / norms[ok, None]
        todo = todo[~ok]
        nonce += 1
    return out


def synthetic_embed(token_id: int, concept_vector: np.ndarray, noise_scale: float, seed: int) -> np.ndarray:
    """normalize(concept + noise_scale * h(token_id, seed)); exact concept when noise is 0."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    concept_vector = np.asarray(concept_vector, dtype=np.float64)
    if noise_scale == 0:
        return concept_vector.copy()
    key = token_keys(np.array([seed], dtype=np.uint64), [token_id])
    while True:
        h = hashed_directions(key, concept_vector.size)[0]
        v = concept_vector + noise_scale * h
        n = np.linalg.norm(v)
        if n > 0:
            return v / n
        key = _splitmix64(key)


def concept_vectors(n_concepts: int, dim: int, seed: int, n_topics: int = 1, spread: float = 1.0) -> np.ndarray:
    """Unit concept vectors grouped around ``n_topics`` topic directions.

    Topics own contiguous runs of concept ids (concept c belongs to topic
    ``c * n_topics // n_concepts``), so when concepts are born in id order a
    young stream covers only the first topics. ``spread`` controls how far
    siblings sit from their shared topic direction.
    """
    rng = np.random.default_rng([seed, 0xC0C0])
    g = rng.standard_normal((dim, n_topics + n_concepts))
    if dim >= n_topics + n_concepts:
        # mutually orthogonal directions: every sibling pair sits at the same angle
        basis = np.linalg.qr(g)[0].T
    else:
        basis = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
    topics, own = basis[:n_topics], basis[n_topics:]
    vecs = topics[np.arange(n_concepts) * n_topics // n_concepts] + spread * own
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


class SyntheticEmbedder:
    """Concept-blob embedder for synthetic streams.

    Token id ``t`` belongs to concept ``(t // vocab_per_concept) % n_concepts``.
    Its vector is that concept's direction plus noise keyed by the token id and
    the preceding token id, which gives every occurrence a context-dependent
    vector the way a contextual encoder would.
    """

    kind = "synthetic"

    def __init__(
        self,
        dim: int = DEFAULT_DIM,
        n_concepts: int = 24,
        vocab_per_concept: int = 64,
        noise_scale: float = 0.5,
        n_topics: int = 8,
        concept_spread: float = 0.3,
        seed: int = 0,
        max_query_tokens: int = DEFAULT_MAX_QUERY_TOKENS,
    ):
        if dim < 1 or n_concepts < 1 or vocab_per_concept < 1 or n_topics < 1:
            raise ConfigError("synthetic embedder sizes must be >= 1")
        if noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        self.dim = dim
        self.n_concepts = n_concepts
        self.vocab_per_concept = vocab_per_concept
        self.noise_scale = float(noise_scale)
        self.n_topics = n_topics
        self.concept_spread = float(concept_spread)
        self.seed = seed
        self.max_query_tokens = max_query_tokens
        self.concepts = concept_vectors(n_concepts, dim, seed, n_topics, concept_spread)
        self._fingerprint = fingerprint_of(self.config())

    @classmethod
    def from_stream_spec(cls, spec: SyntheticStreamSpec, **overrides) -> "SyntheticEmbedder":
        kw = dict(
            dim=spec.dim, n_concepts=spec.n_concepts, vocab_per_concept=spec.vocab_per_concept,
            noise_scale=spec.noise_scale, n_topics=spec.n_topics,
            concept_spread=spec.concept_spread, seed=spec.seed,
        )
        kw.update(overrides)
        return cls(**kw)

    def config(self) -> dict:
        return {
            "kind": self.kind, "dim": self.dim, "n_concepts": self.n_concepts,
            "vocab_per_concept": self.vocab_per_concept, "noise_scale": self.noise_scale,
            "n_topics": self.n_topics, "concept_spread": self.concept_spread, "seed": self.seed,
        }

    @property
    def fingerprint(self) -> bytes:
        return self._fingerprint

    def concept_of(self, token_ids) -> np.ndarray:
        return (np.asarray(token_ids, dtype=np.int64) // self.vocab_per_concept) % self.n_concepts

    def embed_tokens(self, token_ids) -> np.ndarray:
        toks = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if toks.size == 0:
            return np.zeros((0, self.dim), dtype=np.float32)
        base = self.concepts[self.concept_of(toks)]
        if self.noise_scale == 0:
            return base.astype(np.float32)
        prev = np.concatenate([[-1], toks[:-1]])
        keys = token_keys(context_seed(self.seed, prev), toks)
        v = base + self.noise_scale * hashed_directions(keys, self.dim)
        return normalize_rows(v)

    def embed_passage(self, passage: PassageRecord) -> np.ndarray:
        if not passage.tokens:
            raise ConfigError(f"passage {passage.passage_id} is empty")
        return self.embed_tokens(passage.tokens)

    def embed_query(self, text: str, query_id: str = "") -> QueryEmbedding:
        toks = tokenize(text)[: self.max_query_tokens]
        if not toks:
            raise ConfigError(f"query {query_id!r} has no tokens")
        return QueryEmbedding(query_id, self.embed_tokens(toks))


# -- precomputed vectors ------------------------------------------------------


def query_key(query_id: str) -> int:
    """u64 key under which a query's vectors are stored in a PSEV file."""
    if query_id.isdigit():
        return int(query_id)
    return int.from_bytes(hashlib.blake2b(query_id.encode("utf-8"), digest_size=8).digest(), "little")


def write_vectors(path: str | Path, dim: int, records: Iterable[tuple[int, np.ndarray]]) -> None:
    """Write a PSEV file: header then (id u64, n u32, n*dim float32) records."""
    with open(path, "wb") as fh:
        fh.write(PSEV_MAGIC + struct.pack("<II", PSEV_VERSION, dim))
        for key, mat in records:
            mat = np.ascontiguousarray(mat, dtype="<f4")
            if mat.ndim != 2 or mat.shape[1] != dim:
                raise ConfigError(f"record {key} has shape {mat.shape}, expected (*, {dim})")
            fh.write(struct.pack("<QI", key, mat.shape[0]))
            fh.write(mat.tobytes())


def read_vectors(path: str | Path) -> tuple[int, dict[int, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != PSEV_MAGIC:
        raise FormatError(f"{path}: not a PSEV vector file")
    version, dim = struct.unpack_from("<II", data, 4)
    if version != PSEV_VERSION:
        raise FormatError(f"{path}: unsupported PSEV version {version}")
    out: dict[int, np.ndarray] = {}
    off = 12
    while off < len(data):
        if off + 12 > len(data):
            raise FormatError(f"{path}: truncated record header at byte {off}")
        key, n = struct.unpack_from("<QI", data, off)
        off += 12
        nbytes = 4 * n * dim
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated record {key}")
        out[key] = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim).astype(np.float32)
        off += nbytes
    return dim, out


class FileEmbedder:
    """Replays externally computed token vectors keyed by passage id.

    Query vectors live in an optional second PSEV file keyed by
    :func:`query_key`. Rows are re-normalized on load.
    """

    kind = "file"

    def __init__(self, passages_path: str | Path, queries_path: str | Path | None = None,
                 max_query_tokens: int = DEFAULT_MAX_QUERY_TOKENS):
        self.passages_path = str(passages_path)
        self.queries_path = str(queries_path) if queries_path else None
        self.max_query_tokens = max_query_tokens
        self.dim, raw = read_vectors(passages_path)
        self._passages = {k: normalize_rows(v) for k, v in raw.items() if len(v)}
        self._queries: dict[int, np.ndarray] = {}
        if queries_path:
            qdim, qraw = read_vectors(queries_path)
            if qdim != self.dim:
                raise ConfigError(f"query vectors have dim {qdim}, passages have {self.dim}")
            self._queries = {k: normalize_rows(v) for k, v in qraw.items() if len(v)}
        self._digest = hashlib.sha256(Path(passages_path).read_bytes()).hexdigest()
        self._fingerprint = fingerprint_of(self.config())

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "passages_sha256": self._digest}

    @property
    def fingerprint(self) -> bytes:
        return self._fingerprint

    def embed_passage(self, passage: PassageRecord) -> np.ndarray:
        try:
            return self._passages[passage.passage_id]
        except KeyError:
            raise ConfigError(f"no precomputed vectors for passage {passage.passage_id}") from None

    def embed_query(self, text: str, query_id: str = "") -> QueryEmbedding:
        try:
            vecs = self._queries[query_key(query_id)]
        except KeyError:
            raise ConfigError(f"no precomputed vectors for query {query_id!r}") from None
        return QueryEmbedding(query_id, vecs[: self.max_query_tokens])
