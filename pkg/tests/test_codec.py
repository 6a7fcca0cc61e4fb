"""Bit packing, token encode/decode and the codes file."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import nearest_by_scan, pack_loops, unpack_loops
from shardstream.codec import (
    CompressedPassage,
    code_bytes,
    decode_passage,
    decode_token,
    decode_tokens,
    encode_passage,
    encode_token,
    encode_tokens,
    pack_bits,
    pack_rows,
    read_codes,
    unpack_bits,
    unpack_rows,
    write_codes,
)
from shardstream.errors import CorruptionError, EncodeError, FormatError
from shardstream.model import ModelConfig, ShardModel, build_shard_model

FP = bytes(32)


def _unit(rng, n, dim):
    x = rng.standard_normal((n, dim))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def _model(centroids, m=0.1):
    """b=1 model with symmetric buckets {-m, +m} around a 0 cutoff."""
    return ShardModel(np.asarray(centroids, np.float32), 1, np.array([0.0], np.float32),
                      np.array([-m, m], np.float32), FP, "hand")


# -- packing ---------------------------------------------------------------------------


def test_pack_b1_hand_example():
    assert pack_bits([1, 0, 1, 1, 0, 0, 0, 0], 1) == bytes([0x0D])


def test_pack_b2_hand_example():
    # 3 -> bits 1,1 ; 0 -> 0,0 ; 1 -> 1,0 ; 2 -> 0,1  => 0b10010011
    assert pack_bits([3, 0, 1, 2], 2) == bytes([0x93])
    assert pack_loops([3, 0, 1, 2], 2) == bytes([0x93])


@pytest.mark.parametrize("dim,b", [(1, 1), (7, 1), (9, 1), (3, 2), (5, 4), (3, 8), (128, 1), (33, 4)])
def test_packed_length(dim, b):
    assert len(pack_bits([0] * dim, b)) == code_bytes(dim, b) == -(-dim * b // 8)


@given(st.sampled_from([1, 2, 4, 8]).flatmap(
    lambda b: st.tuples(st.just(b), st.lists(st.integers(0, 2**b - 1), min_size=1, max_size=70))))
def test_pack_matches_loop_oracle(case):
    b, idx = case
    packed = pack_bits(idx, b)
    assert packed == pack_loops(idx, b)
    assert unpack_bits(packed, len(idx), b) == idx
    assert unpack_loops(packed, len(idx), b) == idx


@pytest.mark.parametrize("b", [1, 2, 4, 8])
def test_pack_rows_round_trip_bulk(b):
    idx = np.random.default_rng(b).integers(0, 2**b, size=(10_000, 16))
    assert np.array_equal(unpack_rows(pack_rows(idx, b), 16, b), idx)


def test_pack_rejects_out_of_range():
    with pytest.raises(EncodeError):
        pack_bits([4], 2)
    with pytest.raises(EncodeError):
        pack_bits([-1], 1)


def test_unpack_rejects_wrong_width():
    with pytest.raises(FormatError):
        unpack_rows(np.zeros((1, 3), np.uint8), 16, 1)


# -- encode / decode --------------------------------------------------------------------


def test_token_equal_to_centroid():
    rng = np.random.default_rng(0)
    C = _unit(rng, 10, 16)
    model = _model(C, m=0.05)
    ct = encode_token(C[7], model)
    assert ct.centroid_id == 7
    # zero residual lands in the bucket holding 0, which is the lower one
    assert unpack_bits(ct.residual_code, 16, 1) == [0] * 16
    err = np.linalg.norm(decode_token(ct, model) - C[7])
    assert err <= 0.05 * np.sqrt(16) + 1e-6


def test_equidistant_token_takes_lowest_index():
    C = np.zeros((6, 2), np.float32)
    C[2] = [1, 0]
    C[5] = [0, 1]
    C[[0, 1, 3, 4]] = [-1, -1]
    t = np.array([1, 1], np.float32) / np.sqrt(np.float32(2))
    assert encode_token(t, _model(C)).centroid_id == 2


def test_assignment_matches_scan():
    rng = np.random.default_rng(1)
    C = _unit(rng, 32, 16)
    T = _unit(rng, 10_000, 16)
    ids, _ = encode_tokens(T, _model(C))
    assert all(int(i) == nearest_by_scan(t, C) for i, t in zip(ids[:2000], T[:2000]))
    # the rest against a vectorised scan in float64
    ref = np.argmax(T[2000:].astype(np.float64) @ C.astype(np.float64).T, axis=1)
    assert np.array_equal(ids[2000:], ref)


def test_decode_deterministic_and_consistent():
    rng = np.random.default_rng(2)
    model = build_shard_model([_unit(rng, 40, 8) for _ in range(20)], ModelConfig(residual_bits=2), FP, "m")
    T = _unit(rng, 50, 8)
    ids, packed = encode_tokens(T, model)
    a = decode_tokens(ids, packed, model)
    assert np.array_equal(a, decode_tokens(ids, packed, model))
    for i in range(50):
        ct = encode_token(T[i], model)
        assert np.array_equal(decode_token(ct, model), a[i])


def test_decode_error_bounded_by_residual_plus_quantization():
    rng = np.random.default_rng(3)
    model = build_shard_model([_unit(rng, 40, 8) for _ in range(20)], ModelConfig(), FP, "m")
    T = _unit(rng, 200, 8)
    ids, packed = encode_tokens(T, model)
    dec = decode_tokens(ids, packed, model)
    r = T - model.centroids[ids]
    q = model.bucket_values[unpack_rows(packed, 8, 1)]
    assert np.all(np.linalg.norm(T - dec, axis=1) <= np.linalg.norm(r, axis=1) + np.linalg.norm(q - r, axis=1) + 1e-5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_decode_error_decreases_with_bits(seed):
    rng = np.random.default_rng(seed)
    corpus = [_unit(rng, 30, 16) for _ in range(60)]
    T = np.concatenate(corpus)
    errs = []
    for b in (1, 2, 4, 8):
        m = build_shard_model(corpus, ModelConfig(residual_bits=b, seed=seed), FP, "m")
        d = decode_tokens(*encode_tokens(T, m), m)
        errs.append(float(np.linalg.norm(T - d, axis=1).mean()))
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_decoded_vectors_not_renormalized():
    rng = np.random.default_rng(4)
    model = build_shard_model([_unit(rng, 40, 8) for _ in range(20)], ModelConfig(), FP, "m")
    d = decode_tokens(*encode_tokens(_unit(rng, 100, 8), model), model)
    assert not np.allclose(np.linalg.norm(d, axis=1), 1.0)


def test_bad_centroid_id():
    model = _model(np.eye(4))
    with pytest.raises(CorruptionError):
        decode_tokens(np.array([4]), np.zeros((1, 1), np.uint8), model)


# -- codes file ------------------------------------------------------------------------------


def test_codes_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    model = build_shard_model([_unit(rng, 40, 12) for _ in range(20)], ModelConfig(residual_bits=4), FP, "m")
    cps = [encode_passage(pid, _unit(rng, n, 12), model) for pid, n in [(0, 3), (5, 1), (9, 7)]]
    write_codes(tmp_path / "c.pscd", cps)
    back = read_codes(tmp_path / "c.pscd", 12, 4)
    assert [c.passage_id for c in back] == [0, 5, 9]
    for a, b in zip(cps, back):
        assert np.array_equal(a.centroid_ids, b.centroid_ids) and np.array_equal(a.residuals, b.residuals)
        assert np.array_equal(decode_passage(a, model), decode_passage(b, model))
    data = (tmp_path / "c.pscd").read_bytes()
    assert data[:4] == b"PSCD" and int.from_bytes(data[8:16], "little") == 3
    assert len(data) == 16 + sum(12 + 4 * len(c) + len(c) * code_bytes(12, 4) for c in cps)


def test_codes_file_truncated(tmp_path):
    cp = CompressedPassage(0, np.zeros(2, np.uint32), np.zeros((2, 1), np.uint8))
    write_codes(tmp_path / "c", [cp])
    data = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(data[:-1])
    with pytest.raises(FormatError):
        read_codes(tmp_path / "c", 8, 1)
    (tmp_path / "c").write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        read_codes(tmp_path / "c", 8, 1)
    assert len(cp.tokens) == 2
