"""Synthetic and file-backed embedders."""

from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardstream.embed import (
    FileEmbedder,
    SyntheticEmbedder,
    concept_vectors,
    fingerprint_of,
    hashed_directions,
    query_key,
    read_vectors,
    synthetic_embed,
    write_vectors,
)
from shardstream.errors import ConfigError, FormatError
from shardstream.stream import PassageRecord, drift_spec


def _passage(tokens, pid=0):
    return PassageRecord(pid, "d", 0, tuple(tokens))


def test_zero_noise_is_identity():
    e1 = np.eye(16)[0]
    assert np.array_equal(synthetic_embed(5, e1, 0.0, 3), e1.astype(np.float32))


def test_synthetic_embed_deterministic():
    c = concept_vectors(4, 16, 0)[1]
    assert np.array_equal(synthetic_embed(9, c, 0.4, 1), synthetic_embed(9, c, 0.4, 1))


def test_token_closer_to_own_concept():
    concepts = concept_vectors(5, 32, seed=2)
    own = np.array([synthetic_embed(t, concepts[0], 0.3, 7) for t in range(1000)], dtype=np.float64)
    cos_own = float((own @ concepts[0]).mean())
    for other in concepts[1:]:
        assert cos_own > float((own @ other).mean())


def test_passage_shape_and_norm():
    emb = SyntheticEmbedder(dim=16, n_concepts=4, n_topics=2)
    m = emb.embed_passage(_passage([1, 2, 3, 4, 5]))
    assert m.shape == (5, 16) and m.dtype == np.float32
    assert np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(m, emb.embed_passage(_passage([1, 2, 3, 4, 5], pid=9)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=50), st.floats(0, 3), st.integers(1, 48))
def test_rows_are_unit_norm(tokens, noise, dim):
    emb = SyntheticEmbedder(dim=dim, n_concepts=6, n_topics=3, noise_scale=noise)
    m = emb.embed_passage(_passage(tokens))
    assert np.all(np.abs(np.linalg.norm(m.astype(np.float64), axis=1) - 1) < 1e-5)


def test_same_concept_passages_more_similar():
    emb = SyntheticEmbedder(dim=32, n_concepts=8, vocab_per_concept=64, noise_scale=0.5, n_topics=8,
                            concept_spread=0.3, seed=4)
    rng = np.random.default_rng(0)

    def mean_cos(a, b):
        total, n = 0.0, 0
        for x in a:
            for y in b:
                total += float(np.dot(x, y))
                n += 1
        return total / n

    p = [emb.embed_passage(_passage(c * 64 + rng.integers(0, 64, 20))) for c in (2, 2, 6)]
    assert mean_cos(p[0], p[1]) > mean_cos(p[0], p[2])


def test_context_changes_embedding():
    emb = SyntheticEmbedder(dim=16)
    a = emb.embed_tokens([3, 7])[1]
    b = emb.embed_tokens([4, 7])[1]
    assert not np.array_equal(a, b)


def test_embedding_stable_across_processes():
    code = ("from shardstream.embed import SyntheticEmbedder;"
            "import sys;sys.stdout.write(SyntheticEmbedder(dim=16,seed=5).embed_tokens([1,900,33]).tobytes().hex())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert out == SyntheticEmbedder(dim=16, seed=5).embed_tokens([1, 900, 33]).tobytes().hex()


def test_hashed_directions_unit_and_distinct():
    d = hashed_directions(np.arange(100, dtype=np.uint64), 8)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    assert len({r.tobytes() for r in d}) == 100


def test_concept_vectors_share_topics():
    v = concept_vectors(8, 32, seed=1, n_topics=2, spread=0.3)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
    sims = v @ v.T
    # concepts 0-3 share a topic, 4-7 the other
    assert sims[0, 1] > sims[0, 5]


def test_fingerprint_tracks_config():
    a = SyntheticEmbedder(dim=16, seed=1)
    assert a.fingerprint == SyntheticEmbedder(dim=16, seed=1).fingerprint
    assert a.fingerprint != SyntheticEmbedder(dim=16, seed=2).fingerprint
    assert a.fingerprint == fingerprint_of(a.config())


def test_from_stream_spec():
    spec = drift_spec(n_docs=10, n_concepts=5, seed=3)
    emb = SyntheticEmbedder.from_stream_spec(spec)
    assert (emb.dim, emb.n_concepts, emb.seed) == (spec.dim, 5, 3)


def test_query_truncated():
    emb = SyntheticEmbedder(dim=8, max_query_tokens=4)
    q = emb.embed_query("1 2 3 4 5 6", "q")
    assert q.vectors.shape == (4, 8) and q.dim == 8


@pytest.mark.parametrize("bad", [dict(dim=0), dict(noise_scale=-1.0), dict(n_topics=0)])
def test_bad_synthetic_config(bad):
    with pytest.raises(ConfigError):
        SyntheticEmbedder(**bad)


def test_empty_inputs_rejected():
    emb = SyntheticEmbedder(dim=8)
    with pytest.raises(ConfigError):
        emb.embed_passage(_passage([]))
    with pytest.raises(ConfigError):
        emb.embed_query("", "q")


# -- vector files ---------------------------------------------------------------


def test_vector_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = {3: rng.standard_normal((4, 6)).astype(np.float32), 10: rng.standard_normal((1, 6)).astype(np.float32)}
    write_vectors(tmp_path / "v.bin", 6, recs.items())
    dim, got = read_vectors(tmp_path / "v.bin")
    assert dim == 6 and set(got) == {3, 10}
    for k in recs:
        assert np.array_equal(got[k], recs[k])


def test_vector_file_header_layout(tmp_path):
    write_vectors(tmp_path / "v.bin", 2, [(1, np.ones((1, 2), np.float32))])
    data = (tmp_path / "v.bin").read_bytes()
    assert data[:4] == b"PSEV"
    assert data[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert data[12:20] == (1).to_bytes(8, "little") and data[20:24] == (1).to_bytes(4, "little")
    assert len(data) == 24 + 8


def test_vector_file_corruption(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"nope")
    with pytest.raises(FormatError):
        read_vectors(tmp_path / "a.bin")
    write_vectors(tmp_path / "b.bin", 4, [(0, np.ones((3, 4), np.float32))])
    data = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(data[:-5])
    with pytest.raises(FormatError):
        read_vectors(tmp_path / "b.bin")


def test_file_embedder(tmp_path):
    rng = np.random.default_rng(1)
    p = rng.standard_normal((3, 5))
    q = rng.standard_normal((2, 5))
    write_vectors(tmp_path / "p.bin", 5, [(7, p)])
    write_vectors(tmp_path / "q.bin", 5, [(query_key("q1"), q)])
    emb = FileEmbedder(tmp_path / "p.bin", tmp_path / "q.bin")
    got = emb.embed_passage(_passage([1], pid=7))
    assert np.allclose(got, p / np.linalg.norm(p, axis=1, keepdims=True), atol=1e-6)
    assert emb.embed_query("", "q1").vectors.shape == (2, 5)
    with pytest.raises(ConfigError):
        emb.embed_passage(_passage([1], pid=8))
    with pytest.raises(ConfigError):
        emb.embed_query("", "q2")
    assert query_key("42") == 42
