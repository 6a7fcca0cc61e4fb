"""Token compression: nearest centroid id plus bit-packed residual buckets.

Bit layout: bucket indices are written component-major, each index least
significant bit first, into a little-endian bit stream (bit k of the stream
is bit ``k % 8`` of byte ``k // 8``).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, EncodeError, FormatError
from .model import ShardModel, nearest_centroids

PSCD_MAGIC = b"PSCD"
PSCD_VERSION = 1


@dataclass(frozen=True)
class CompressedToken:
    centroid_id: int
    residual_code: bytes


@dataclass
class CompressedPassage:
    passage_id: int
    centroid_ids: np.ndarray  # (n,) uint32
    residuals: np.ndarray  # (n, code_bytes) uint8

    @property
    def tokens(self) -> list[CompressedToken]:
        return [CompressedToken(int(c), bytes(r)) for c, r in zip(self.centroid_ids, self.residuals)]

    def __len__(self) -> int:
        return len(self.centroid_ids)


def code_bytes(dim: int, b: int) -> int:
    return (dim * b + 7) // 8


# -- bit packing ----------------------------------------------------------------


def pack_rows(indices: np.ndarray, b: int) -> np.ndarray:
    """Pack an (n, dim) array of bucket indices into (n, ceil(dim*b/8)) bytes."""
    idx = np.asarray(indices)
    if idx.ndim != 2:
        raise EncodeError("pack_rows expects a 2-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= 2**b):
        raise EncodeError(f"bucket index out of range for b={b}")
    n, dim = idx.shape
    shifts = np.arange(b, dtype=np.uint16)
    bits = ((idx.astype(np.uint16)[:, :, None] >> shifts) & 1).astype(np.uint8).reshape(n, dim * b)
    return np.packbits(bits, axis=1, bitorder="little")


def unpack_rows(packed: np.ndarray, dim: int, b: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.ndim != 2 or packed.shape[1] != code_bytes(dim, b):
        raise FormatError(f"packed residuals have shape {packed.shape}, expected (*, {code_bytes(dim, b)})")
    bits = np.unpackbits(packed, axis=1, count=dim * b, bitorder="little").reshape(-1, dim, b)
    weights = (1 << np.arange(b)).astype(np.uint16)
    return (bits.astype(np.uint16) * weights).sum(axis=2).astype(np.uint8 if b <= 8 else np.uint16)


def pack_bits(indices: Sequence[int], b: int) -> bytes:
    return pack_rows(np.asarray(indices, dtype=np.int64)[None, :], b)[0].tobytes()


def unpack_bits(data: bytes, dim: int, b: int) -> list[int]:
    return unpack_rows(np.frombuffer(data, dtype=np.uint8)[None, :], dim, b)[0].astype(int).tolist()


# -- encode / decode --------------------------------------------------------------


def bucketize(residuals: np.ndarray, model: ShardModel) -> np.ndarray:
    # side="left": a component equal to a cutoff lands in the lower bucket
    return np.searchsorted(model.bucket_cutoffs, residuals, side="left")


def encode_tokens(vectors: np.ndarray, model: ShardModel) -> tuple[np.ndarray, np.ndarray]:
    """Encode an (n, dim) block; returns (centroid ids uint32, packed residuals)."""
    V = np.asarray(vectors, dtype=np.float32)
    if V.ndim != 2 or V.shape[1] != model.dim:
        raise ConfigError(f"vectors have shape {V.shape}, model dim is {model.dim}")
    ids = nearest_centroids(V, model.centroids)
    residual = V - model.centroids[ids]
    packed = pack_rows(bucketize(residual, model), model.residual_bits)
    return ids.astype(np.uint32), packed


def decode_tokens(centroid_ids: np.ndarray, residuals: np.ndarray, model: ShardModel) -> np.ndarray:
    ids = np.asarray(centroid_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= model.n_centroids):
        raise CorruptionError(f"centroid id out of range [0, {model.n_centroids})")
    buckets = unpack_rows(residuals, model.dim, model.residual_bits)
    return model.centroids[ids] + model.bucket_values[buckets]


def encode_token(t: np.ndarray, model: ShardModel) -> CompressedToken:
    ids, packed = encode_tokens(np.asarray(t)[None, :], model)
    return CompressedToken(int(ids[0]), packed[0].tobytes())


def decode_token(ct: CompressedToken, model: ShardModel) -> np.ndarray:
    if not 0 <= ct.centroid_id < model.n_centroids:
        raise CorruptionError(f"centroid id {ct.centroid_id} out of range [0, {model.n_centroids})")
    buckets = unpack_bits(ct.residual_code, model.dim, model.residual_bits)
    return model.centroids[ct.centroid_id] + model.bucket_values[np.asarray(buckets)]


def encode_passage(passage_id: int, vectors: np.ndarray, model: ShardModel) -> CompressedPassage:
    ids, packed = encode_tokens(vectors, model)
    return CompressedPassage(passage_id, ids, packed)


def decode_passage(cp: CompressedPassage, model: ShardModel) -> np.ndarray:
    return decode_tokens(cp.centroid_ids, cp.residuals, model)


# -- codes file -----------------------------------------------------------------


def write_codes(path: str | Path, passages: Iterable[CompressedPassage]) -> None:
    passages = list(passages)
    out = io.BytesIO()
    out.write(PSCD_MAGIC + struct.pack("<IQ", PSCD_VERSION, len(passages)))
    for cp in passages:
        out.write(struct.pack("<QI", cp.passage_id, len(cp)))
        out.write(np.ascontiguousarray(cp.centroid_ids, dtype="<u4").tobytes())
        out.write(np.ascontiguousarray(cp.residuals, dtype=np.uint8).tobytes())
    Path(path).write_bytes(out.getvalue())


def read_codes(path: str | Path, dim: int, b: int) -> list[CompressedPassage]:
    data = Path(path).read_bytes()
    if data[:4] != PSCD_MAGIC:
        raise FormatError(f"{path}: not a PSCD codes file")
    nb = code_bytes(dim, b)
    try:
        version, n_passages = struct.unpack_from("<IQ", data, 4)
        if version != PSCD_VERSION:
            raise FormatError(f"{path}: unsupported codes version {version}")
        off = 16
        out = []
        for _ in range(n_passages):
            pid, n = struct.unpack_from("<QI", data, off)
            off += 12
            ids = np.frombuffer(data, "<u4", n, off).astype(np.uint32)
            off += 4 * n
            res = np.frombuffer(data, np.uint8, n * nb, off).reshape(n, nb).copy()
            off += n * nb
            out.append(CompressedPassage(pid, ids, res))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated codes file ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes in codes file")
    return out
