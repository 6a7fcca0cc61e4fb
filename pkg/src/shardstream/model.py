"""Shard models: centroid codebooks plus residual bucket quantization.

A shard model is trained from one shard's own token vectors. Centroids are
plain k-means means (not re-normalized) so that ``token - centroid`` is the
exact residual that gets quantized.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyShardError,
    FormatError,
    IncompatibleEmbedderError,
    InvalidKError,
    QuantizationError,
)

log = logging.getLogger(__name__)

PSMD_MAGIC = b"PSMD"
PSMD_VERSION = 1
FINGERPRINT_BYTES = 32
_CHUNK = 4096


@dataclass
class ModelConfig:
    residual_bits: int = 1
    c_mult: float = 16.0
    k_min: int = 16
    k_max: int = 65536
    max_training_tokens: int = 16384
    kmeans_iters: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.residual_bits not in (1, 2, 4, 8):
            raise ConfigError(f"residual_bits must be one of 1, 2, 4, 8 (got {self.residual_bits})")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigError("need 1 <= k_min <= k_max")
        if self.c_mult <= 0 or self.max_training_tokens < 1 or self.kmeans_iters < 1:
            raise ConfigError("c_mult, max_training_tokens and kmeans_iters must be positive")


@dataclass
class ShardModel:
    centroids: np.ndarray  # (K, dim) float32
    residual_bits: int
    bucket_cutoffs: np.ndarray  # (2**b - 1,) float32, strictly ascending
    bucket_values: np.ndarray  # (2**b,) float32
    embedder_fingerprint: bytes
    trained_on: str

    @property
    def model_id(self) -> str:
        return self.trained_on

    @property
    def n_centroids(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def validate(self) -> None:
        b = self.residual_bits
        if self.n_centroids < 1:
            raise ConfigError("a model needs at least one centroid")
        if not np.all(np.isfinite(self.centroids)):
            raise ConfigError("non-finite centroid")
        if self.bucket_cutoffs.shape != (2**b - 1,) or self.bucket_values.shape != (2**b,):
            raise ConfigError("bucket table size does not match residual_bits")
        if np.any(np.diff(self.bucket_cutoffs) <= 0):
            raise ConfigError("bucket cutoffs must be strictly ascending")
        if len(self.embedder_fingerprint) != FINGERPRINT_BYTES:
            raise ConfigError("embedder fingerprint must be 32 bytes")

    def check_fingerprint(self, fingerprint: bytes) -> None:
        if fingerprint != self.embedder_fingerprint:
            raise IncompatibleEmbedderError(
                f"model {self.model_id} was trained with a different embedder"
            )

    # -- serialization --------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(PSMD_MAGIC)
        out.write(struct.pack("<IIIB", PSMD_VERSION, self.dim, self.n_centroids, self.residual_bits))
        out.write(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
        out.write(np.ascontiguousarray(self.bucket_cutoffs, dtype="<f4").tobytes())
        out.write(np.ascontiguousarray(self.bucket_values, dtype="<f4").tobytes())
        out.write(self.embedder_fingerprint)
        name = self.trained_on.encode("utf-8")
        out.write(struct.pack("<I", len(name)) + name)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ShardModel":
        if data[:4] != PSMD_MAGIC:
            raise FormatError("not a PSMD model file")
        try:
            version, dim, K, b = struct.unpack_from("<IIIB", data, 4)
            if version != PSMD_VERSION:
                raise FormatError(f"unsupported model version {version}")
            off = 17
            cent = np.frombuffer(data, "<f4", K * dim, off).reshape(K, dim)
            off += 4 * K * dim
            cuts = np.frombuffer(data, "<f4", 2**b - 1, off)
            off += 4 * (2**b - 1)
            vals = np.frombuffer(data, "<f4", 2**b, off)
            off += 4 * 2**b
            fp = data[off : off + FINGERPRINT_BYTES]
            off += FINGERPRINT_BYTES
            (n,) = struct.unpack_from("<I", data, off)
            name = data[off + 4 : off + 4 + n].decode("utf-8")
            if off + 4 + n != len(data):
                raise FormatError("trailing bytes in model file")
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated model file: {exc}") from exc
        model = cls(cent.astype(np.float32), b, cuts.astype(np.float32), vals.astype(np.float32), fp, name)
        model.validate()
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ShardModel":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class TrainingSample:
    vectors: np.ndarray  # (n, dim)
    passage_ids: np.ndarray  # (n,) source passage of each row

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    distortion_history: list[float] = field(default_factory=list)


# -- sampling -----------------------------------------------------------------


def sample_training_tokens(
    passages: Sequence[np.ndarray],
    max_tokens: int,
    seed: int,
    passage_ids: Sequence[int] | None = None,
) -> TrainingSample:
    """Uniform sample without replacement of ``min(total, max_tokens)`` token rows."""
    if passage_ids is None:
        passage_ids = range(len(passages))
    counts = np.array([len(p) for p in passages], dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise EmptyShardError("cannot sample training tokens from an empty shard")
    owners = np.repeat(np.asarray(list(passage_ids), dtype=np.int64), counts)
    rows = np.concatenate([np.asarray(p) for p in passages if len(p)], axis=0)
    if total > max_tokens:
        rng = np.random.default_rng([seed, 0x5A])
        pick = np.sort(rng.choice(total, size=max_tokens, replace=False))
        rows, owners = rows[pick], owners[pick]
    return TrainingSample(np.asarray(rows), owners)


# -- k-means ------------------------------------------------------------------


def _sq_distances(X: np.ndarray, C: np.ndarray, x_sq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid by squared Euclidean distance, ties to the lowest index."""
    half_c_sq = 0.5 * np.einsum("ij,ij->i", C, C)
    assign = np.empty(len(X), dtype=np.int64)
    dist = np.empty(len(X), dtype=np.float64)
    for s in range(0, len(X), _CHUNK):
        g = X[s : s + _CHUNK] @ C.T
        g -= half_c_sq  # argmax(x.c - |c|^2/2) == argmin |x - c|^2
        a = np.argmax(g, axis=1)
        assign[s : s + _CHUNK] = a
        dist[s : s + _CHUNK] = np.maximum(x_sq[s : s + _CHUNK] - 2.0 * g[np.arange(len(a)), a], 0.0)
    return assign, dist


def kmeans_plus_plus(X: np.ndarray, K: int, rng: np.random.Generator, x_sq: np.ndarray | None = None) -> np.ndarray:
    n = len(X)
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", X, X)

    def dist_to(i: int) -> np.ndarray:
        return np.maximum(x_sq - 2.0 * (X @ X[i]) + x_sq[i], 0.0)

    chosen = [int(rng.integers(n))]
    d2 = dist_to(chosen[0])
    for _ in range(1, K):
        cum = np.cumsum(d2)
        if cum[-1] <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), n - 1)
        chosen.append(pick)
        np.minimum(d2, dist_to(pick), out=d2)
    return X[chosen].copy()


def lloyd(X: np.ndarray, K: int, iters: int, seed: int) -> KMeansResult:
    """k-means++ seeding followed by at most ``iters`` Lloyd iterations.

    Empty clusters are re-seeded from the point farthest from its current
    centroid. ``distortion_history[t]`` is the total squared error of the
    assignment made at the start of iteration t (plus one final entry).
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if K < 1 or K > n:
        raise InvalidKError(f"K={K} is invalid for {n} training points")
    if iters < 1:
        raise InvalidKError("iters must be >= 1")
    rng = np.random.default_rng([seed, 0x4B4D])
    x_sq = np.einsum("ij,ij->i", X, X)
    C = kmeans_plus_plus(X, K, rng, x_sq)
    history: list[float] = []
    assign, dist = _sq_distances(X, C, x_sq)
    for _ in range(iters):
        history.append(float(dist.sum()))
        counts = np.bincount(assign, minlength=K)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist))
            counts[assign[far]] -= 1
            assign[far] = j
            dist[far] = 0.0
            counts[j] = 1
            C[j] = X[far]
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_assign, dist = _sq_distances(X, C, x_sq)
        changed = np.any(new_assign != assign)
        assign = new_assign
        if not changed:
            break
    history.append(float(dist.sum()))
    return KMeansResult(C, assign, history)


def train_kmeans(sample: TrainingSample | np.ndarray, K: int, iters: int, seed: int) -> np.ndarray:
    X = sample.vectors if isinstance(sample, TrainingSample) else sample
    return lloyd(X, K, iters, seed).centroids


# -- residual buckets ------------------------------------------------------------


def compute_bucket_quantization(components, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-mass buckets over residual components.

    Cutoffs are the i/2^b quantiles (linear interpolation); each bucket decodes
    to the mean of the components that fall in it. A value equal to a cutoff
    belongs to the lower bucket.
    """
    if b < 1 or b > 8:
        raise QuantizationError(f"residual bits must be in [1, 8], got {b}")
    x = np.asarray(components, dtype=np.float64).reshape(-1)
    n_buckets = 2**b
    if np.unique(x).size < n_buckets:
        raise QuantizationError(f"need at least {n_buckets} distinct residual components")
    qs = np.quantile(x, np.arange(1, n_buckets) / n_buckets)
    cutoffs = qs.astype(np.float32)
    for i in range(1, len(cutoffs)):
        if cutoffs[i] <= cutoffs[i - 1]:
            cutoffs[i] = np.nextafter(cutoffs[i - 1], np.float32(np.inf))
    bucket = np.searchsorted(cutoffs, x, side="left")
    sums = np.bincount(bucket, weights=x, minlength=n_buckets)
    counts = np.bincount(bucket, minlength=n_buckets)
    values = np.empty(n_buckets, dtype=np.float32)
    for i in range(n_buckets):
        lo = cutoffs[i - 1] if i > 0 else None
        hi = cutoffs[i] if i < n_buckets - 1 else None
        if counts[i]:
            v = np.float32(sums[i] / counts[i])
        elif lo is None:
            v = hi
        elif hi is None:
            v = np.nextafter(lo, np.float32(np.inf))
        else:
            v = np.float32((float(lo) + float(hi)) / 2)
        if lo is not None and v <= lo:
            v = np.nextafter(lo, np.float32(np.inf))
        if hi is not None and v > hi:
            v = hi
        values[i] = v
    return cutoffs, values


# -- model building -------------------------------------------------------------


def k_for_sample(n_tokens: int, config: ModelConfig) -> int:
    """clamp(round(c_mult * sqrt(n)), k_min, k_max), never above n // 2.

    The n // 2 cap leaves clusters of two or more points on average, so tiny
    shards still have non-zero residuals to fit bucket cutoffs on.
    """
    k = int(math.floor(config.c_mult * math.sqrt(n_tokens) + 0.5))
    k = max(config.k_min, min(config.k_max, k))
    return max(1, min(k, n_tokens // 2))


def nearest_centroids(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """argmax_c dot(t, c) per row; ties go to the lowest centroid index."""
    V = np.asarray(vectors, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    out = np.empty(len(V), dtype=np.int64)
    for s in range(0, len(V), _CHUNK):
        out[s : s + _CHUNK] = np.argmax(V[s : s + _CHUNK] @ C.T, axis=1)
    return out


def build_shard_model(
    passages: Sequence[np.ndarray],
    config: ModelConfig,
    embedder_fingerprint: bytes,
    trained_on: str,
    passage_ids: Sequence[int] | None = None,
) -> ShardModel:
    config.validate()
    sample = sample_training_tokens(passages, config.max_training_tokens, config.seed, passage_ids)
    K = k_for_sample(sample.n, config)
    centroids = train_kmeans(sample, K, config.kmeans_iters, config.seed).astype(np.float32)
    X = sample.vectors.astype(np.float32)
    residuals = X - centroids[nearest_centroids(X, centroids)]
    cutoffs, values = compute_bucket_quantization(residuals, config.residual_bits)
    model = ShardModel(centroids, config.residual_bits, cutoffs, values, bytes(embedder_fingerprint), trained_on)
    model.validate()
    log.debug("trained model %s: K=%d on %d tokens", trained_on, K, sample.n)
    return model
