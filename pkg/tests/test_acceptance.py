"""Acceptance criteria, each at its stated tolerance. Every test prints one PASS/FAIL line."""

from __future__ import annotations

import contextlib
import time
from functools import partial

import numpy as np
import pytest

from corpus import cli_pipeline, embedded_stream, event_trace, flatten, random_passages, random_queries
from oracles import (
    ap_loops,
    bootstrap_exit_by_scan,
    expected_lifecycle_trace,
    filter_then_score,
    maxsim_loops,
    ndcg_loops,
    nearest_by_scan,
    pack_loops,
    unpack_loops,
)
from shardstream import bench
from shardstream.codec import decode_tokens, encode_tokens, pack_bits, pack_rows, unpack_bits, unpack_rows
from shardstream.config import EngineConfig
from shardstream.embed import QueryEmbedding, SyntheticEmbedder
from shardstream.evaluate import average_precision, condense, judged_at_k, metric_value, ndcg_at_k
from shardstream.lifecycle import IngestDoc, Lifecycle, LifecycleConfig, shard_count
from shardstream.model import ModelConfig, ShardModel, build_shard_model
from shardstream.search import search_all
from shardstream.shard import SearchParams, build_compressed_shard, build_exact_shard, search_shard
from shardstream.stream import DocumentRecord, PassageRecord, drift_spec, generate_drift_stream, stationary_spec

FP = bytes(range(32))


@pytest.fixture
def criterion(capsys):
    """``with criterion(n, title) as note:`` prints PASS or FAIL for criterion n; ``note(text)`` adds detail."""

    @contextlib.contextmanager
    def run(n, title):
        details = []
        t0 = time.perf_counter()
        try:
            yield details.append
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nACCEPTANCE {n:2d} FAIL  {title}: {type(exc).__name__}: {exc}".rstrip())
            raise
        with capsys.disabled():
            extra = "; ".join(details)
            print(f"\nACCEPTANCE {n:2d} PASS  {title} [{time.perf_counter() - t0:.1f}s]" + (f" {extra}" if extra else ""))

    return run


def _matching_config(spec, **kw) -> tuple[EngineConfig, SyntheticEmbedder]:
    emb = SyntheticEmbedder.from_stream_spec(spec)
    cfg = EngineConfig(dim=spec.dim, n_concepts=emb.n_concepts, vocab_per_concept=emb.vocab_per_concept,
                       noise_scale=emb.noise_scale, n_topics=emb.n_topics, concept_spread=emb.concept_spread,
                       embedder_seed=emb.seed, **kw)
    return cfg, emb


# 1 ------------------------------------------------------------------------------------------------


def test_01_shard_arithmetic(criterion):
    with criterion(1, "shard arithmetic") as note:
        assert shard_count(504_000_000, 5_000_000, 500_000) == (100, 8, 0, 108)
        rng = np.random.default_rng(0)
        lo = 20 * 500_000
        ns = [lo + 1, lo + 99_999] + rng.integers(lo + 1, lo + 100_000, size=1000).tolist()
        assert all(shard_count(n, 500_000, 100_000)[3] == 21 for n in ns)
        note(f"{len(ns)} sizes in the open window give 21 shards")


# 2 ------------------------------------------------------------------------------------------------


def test_02_bounded_reindexing(criterion):
    with criterion(2, "bounded re-indexing trace") as note:
        A, B = 600, 100
        t0 = time.perf_counter()
        _, _, docs, _ = embedded_stream(n_docs=2 * A, dim=16, max_passage_tokens=8)
        cfg = LifecycleConfig(A, B, 2000, B)
        lc = Lifecycle(cfg, ModelConfig(), 16, FP)
        for d in docs:
            lc.ingest(d)
        elapsed = time.perf_counter() - t0
        exit_at = bootstrap_exit_by_scan(docs, B, 2000, B)
        assert event_trace(lc.events) == expected_lifecycle_trace(2 * A, A, B, exit_at)
        assert all(p == 3 for p in lc.passes[exit_at:])
        assert lc.active_counts() == (2, 0, 0, 2)
        assert elapsed < 60
        note(f"bootstrap exit at {exit_at}, {len(lc.events)} events, passes={sorted(set(lc.passes))}, "
             f"{elapsed:.1f}s")


# 3 ------------------------------------------------------------------------------------------------


def _random_doc(rng, ordinal, pid, dim):
    passages, mats = [], []
    for w in range(int(rng.integers(1, 5))):
        k = int(rng.integers(1, 17))
        m = rng.standard_normal((k, dim))
        mats.append((m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32))
        passages.append(PassageRecord(pid + w, f"doc{ordinal:06d}", w, tuple(range(k))))
    return IngestDoc(ordinal, DocumentRecord(f"doc{ordinal:06d}", float(ordinal)), passages, mats)


def _retrieves_all(shard, exhaustive) -> bool:
    """Every document of the shard comes back from an exhaustive search of it."""
    if shard.n_passages == 0:
        return True
    q = QueryEmbedding("q", shard.passage_vectors(0)[:1] if shard.kind == "exact" else
                       decode_tokens(shard.centroid_ids[:1], shard.residuals[:1], shard.model))
    hits = search_all(q, [shard], exhaustive, top_docs=10**9).doc_ids()
    return sorted(hits) == sorted(shard.doc_id_set())


def test_03_partition_and_availability(criterion):
    with criterion(3, "partition + availability invariants") as note:
        A, B, dim, steps = 200, 50, 8, 10_000
        exhaustive = SearchParams(n_per_shard=10**6, nprobe=10**6, candidate_factor=1)
        checked = 0
        for seed in range(3):
            rng = np.random.default_rng(seed)
            lc = Lifecycle(LifecycleConfig(A, B, 150, B), ModelConfig(kmeans_iters=4, seed=seed), dim, FP)
            verified: set[str] = set()
            pid, seen = 0, []
            for i in range(steps):
                d = _random_doc(rng, i, pid, dim)
                pid += len(d.passages)
                lc.ingest(d)
                seen.append(d.doc_id)
                lc.check_invariants()
                snap = lc.snapshot()
                assert sorted(x for s in snap for x in s.doc_id_set()) == seen
                assert any(d.doc_id in s.doc_id_set() for s in snap)
                for s in snap:
                    # sealed shards are immutable: verify once; the growing shards every step
                    if s.shard_id in verified:
                        continue
                    assert _retrieves_all(s, exhaustive), s.shard_id
                    if s.shard_id[0] in "LS":
                        verified.add(s.shard_id)
                checked += 1
        note(f"{checked} ingest steps over 3 seeds")


# 4 ------------------------------------------------------------------------------------------------


def _exact_shards(docs, cuts, dim):
    shards, start = [], 0
    for i, end in enumerate(cuts):
        p, m, o = flatten(docs[start:end])
        shards.append(build_exact_shard(f"X{i}", p, m, dim, FP, o))
        start = end
    return shards


def test_04_merge_equivalence(criterion):
    with criterion(4, "exact-shard merge equivalence") as note:
        n_cmp = 0
        for seed in range(3):
            _, _, docs, queries = embedded_stream(n_docs=400, dim=16, seed=seed)
            rng = np.random.default_rng(seed)
            whole = _exact_shards(docs, [len(docs)], 16)
            params = SearchParams(n_per_shard=1000)
            assert len(queries) >= 50
            for q in queries[:50]:
                k = int(rng.integers(1, 9))
                cuts = sorted(rng.choice(np.arange(1, len(docs)), size=k - 1, replace=False).tolist()) + [len(docs)]
                ref = search_all(q, whole, params, top_docs=100).ranking
                assert search_all(q, _exact_shards(docs, cuts, 16), params, top_docs=100).ranking == ref
                n_cmp += 1
        note(f"{n_cmp} queries, rankings and scores identical")


# 5 ------------------------------------------------------------------------------------------------


def test_05_maxsim_correctness(criterion):
    with criterion(5, "MaxSim correctness") as note:
        rng = np.random.default_rng(0)
        passages, mats, ords = random_passages(rng, 50, 16, max_len=20)
        shard = build_exact_shard("x", passages, mats, 16, FP, ords)
        worst = 0.0
        for q in random_queries(rng, 20, 16, n_tokens=6):
            hits = {h.passage_id: h.score for h in search_shard(q, shard, SearchParams(n_per_shard=50))}
            assert len(hits) == 50
            for p, m in zip(passages, mats):
                worst = max(worst, abs(hits[p.passage_id] - maxsim_loops(q.vectors, m)))
        assert worst <= 1e-6

        n_rank = 0
        for seed in range(3):
            rng = np.random.default_rng([seed, 5])
            passages, mats, ords = random_passages(rng, 120, 8, docs_per=3)
            passages.append(PassageRecord(120, passages[0].doc_id, 7, passages[0].tokens))  # exact tie
            mats.append(mats[0].copy())
            ords.append(ords[0])
            model = build_shard_model([rng.standard_normal((30, 8)).astype(np.float32) for _ in range(20)],
                                      ModelConfig(seed=seed), FP, "m")
            s = build_compressed_shard("c", passages, mats, model, FP, ords)
            params = SearchParams(n_per_shard=len(passages), nprobe=model.n_centroids, candidate_factor=1)
            for q in random_queries(rng, 10, 8):
                got = [(h.score, h.passage_id) for h in search_shard(q, s, params)]
                want = []
                for row in range(s.n_passages):
                    a, b = s.offsets[row], s.offsets[row + 1]
                    dec = decode_tokens(s.centroid_ids[a:b], s.residuals[a:b], model)
                    want.append((maxsim_loops(q.vectors, dec), int(s.passage_ids[row])))
                want.sort(key=lambda t: (-t[0], t[1]))
                assert [p for _, p in got] == [p for _, p in want]
                assert max(abs(x - y) for (x, _), (y, _) in zip(got, want)) <= 1e-9
                n_rank += 1
        note(f"1000 exact pairs, max |diff| {worst:.1e}; {n_rank} exhaustive compressed rankings identical")


# 6 ------------------------------------------------------------------------------------------------


def test_06_codec(criterion):
    with criterion(6, "codec") as note:
        for b in (1, 2, 4, 8):
            idx = np.random.default_rng(b).integers(0, 2**b, size=(10_000, 16))
            assert np.array_equal(unpack_rows(pack_rows(idx, b), 16, b), idx)
            for row in idx[:200]:
                packed = pack_bits(row.tolist(), b)
                assert packed == pack_loops(row.tolist(), b)
                assert unpack_bits(packed, 16, b) == unpack_loops(packed, 16, b) == row.tolist()
        rng = np.random.default_rng(1)
        C = rng.standard_normal((64, 16))
        C = (C / np.linalg.norm(C, axis=1, keepdims=True)).astype(np.float32)
        T = rng.standard_normal((10_000, 16))
        T = (T / np.linalg.norm(T, axis=1, keepdims=True)).astype(np.float32)
        model = ShardModel(C, 1, np.array([0.0], np.float32), np.array([-0.1, 0.1], np.float32), FP, "m")
        ids, _ = encode_tokens(T, model)
        assert all(int(i) == nearest_by_scan(t, C) for i, t in zip(ids, T))
        errs_all = []
        for seed in range(3):
            r = np.random.default_rng(seed)
            corpus = [(lambda x: x / np.linalg.norm(x, axis=1, keepdims=True))(r.standard_normal((30, 16)))
                      .astype(np.float32) for _ in range(60)]
            flat = np.concatenate(corpus)
            errs = []
            for b in (1, 2, 4, 8):
                m = build_shard_model(corpus, ModelConfig(residual_bits=b, seed=seed), FP, "m")
                errs.append(float(np.linalg.norm(flat - decode_tokens(*encode_tokens(flat, m), m), axis=1).mean()))
            assert all(x > y for x, y in zip(errs, errs[1:])), errs
            errs_all.append(errs)
        note("round trips exact for b=1,2,4,8; 10000 assignments match the scan; decode error by b "
             + " / ".join("(" + ", ".join(f"{e:.3f}" for e in es) + ")" for es in errs_all))


# 7 ------------------------------------------------------------------------------------------------


def test_07_model_staleness(criterion):
    with criterion(7, "model staleness sweep") as note:
        lines = []
        for seed in range(3):
            spec = drift_spec(n_docs=2000, seed=seed)
            assert spec.n_concepts >= 8
            cfg, emb = _matching_config(spec)
            nd = [r.ndcg_at_20 for r in bench.drift_sweep(generate_drift_stream(spec), cfg, embedder=emb)]
            assert len(nd) == 4 and all(a < b for a, b in zip(nd, nd[1:])), nd
            assert nd[3] - nd[0] >= 0.1, nd
            lines.append("drift " + " ".join(f"{x:.3f}" for x in nd))
        for seed in range(3):
            spec = stationary_spec(n_docs=2000, seed=seed)
            cfg, emb = _matching_config(spec)
            nd = [r.ndcg_at_20 for r in bench.drift_sweep(generate_drift_stream(spec), cfg, embedder=emb)]
            assert len(nd) == 4 and max(nd) - min(nd) < 0.05, nd
            lines.append(f"stationary spread {max(nd) - min(nd):.3f}")
        note("; ".join(lines))


# 8 ------------------------------------------------------------------------------------------------


def test_08_oracle_ratio(criterion):
    with criterion(8, "lifecycle vs single-model oracle") as note:
        ratios, margins = [], []
        for seed in range(3):
            spec = stationary_spec(n_docs=2000, seed=seed)
            cfg, emb = _matching_config(spec)
            out = bench.oracle_comparison(generate_drift_stream(spec), cfg, embedder=emb)
            ratios.append(out["sharded"]["ndcg@20"] / out["oracle"]["ndcg@20"])
            assert ratios[-1] >= 0.9, out
        for seed in range(3):
            spec = drift_spec(n_docs=2000, seed=seed)
            cfg, emb = _matching_config(spec)
            out = bench.oracle_comparison(generate_drift_stream(spec), cfg, embedder=emb)
            margins.append((out["sharded"]["ndcg@20"], out["frozen"]["ndcg@20"]))
            assert margins[-1][0] > margins[-1][1], out
        note("stationary ratio " + " ".join(f"{r:.3f}" for r in ratios) + "; drift sharded/frozen "
             + " ".join(f"{a:.3f}/{b:.3f}" for a, b in margins))


# 9 ------------------------------------------------------------------------------------------------


def test_09_metrics(criterion):
    with criterion(9, "metrics") as note:
        assert abs(ndcg_at_k(["a", "b", "c"], {"a": 2, "b": 0, "c": 1}, 3) - 0.9503) < 1e-4
        assert abs(ndcg_at_k(["a", "b", "c"], {"a": 2, "b": 0, "c": 1}, 3) - 2.5 / (2 + 1 / np.log2(3))) < 1e-6
        assert abs(average_precision(["r", "n", "s"], {"r": 1, "n": 0, "s": 1}) - 5 / 6) < 1e-6
        ranking20 = [f"d{i}" for i in range(20)]
        assert abs(judged_at_k(ranking20, {d: 0 for d in ranking20[:18]}, 20) - 0.9) < 1e-6
        assert condense(["dU", "dR"], {"dR": 1}) == ["dR"]
        assert abs(metric_value("map'", ["dU", "dR"], {"dR": 1}) - 1.0) < 1e-6
        full = {"a": 1, "b": 0, "c": 2}
        assert metric_value("ndcg'@3", ["b", "a", "c"], full) == metric_value("ndcg@3", ["b", "a", "c"], full)
        rng = np.random.default_rng(0)
        docs = [f"d{i}" for i in range(60)]
        for _ in range(100):
            judged = {d: int(rng.integers(0, 4)) for d in docs if rng.random() < 0.5}
            ranking = list(rng.permutation(docs)[: int(rng.integers(1, 61))])
            assert abs(metric_value("ndcg'@20", ranking, judged)
                       - filter_then_score(ranking, judged, partial(ndcg_loops, k=20))) < 1e-6
            assert abs(metric_value("map'", ranking, judged) - filter_then_score(ranking, judged, ap_loops)) < 1e-6
            assert abs(metric_value("judged@20", ranking, judged)
                       - sum(1 for d in ranking[:20] if d in judged) / 20) < 1e-6
        note("hand fixtures and 100 randomized rankings agree")


# 10 -----------------------------------------------------------------------------------------------


def test_10_cli_pipeline(criterion, tmp_path):
    with criterion(10, "CLI pipeline") as note:
        codes, out, report, in_process = cli_pipeline(tmp_path, n_docs=700, n_concepts=12, n_queries=20,
                                                      A=300, B=100, min_passages=150, stop=450)
        assert codes == {"synth": 0, "ingest_partial": 0, "search_partial": 2, "ingest": 0, "ingest_again": 0,
                         "search": 0, "eval": 0}, codes
        assert "(resumed from 400)" in out["ingest"][0], out["ingest"]
        assert "nothing to do" in out["ingest_again"][0]
        diff = max(abs(report["mean"][m] - v) for m, v in in_process.items())
        assert set(report["mean"]) == set(in_process) and diff <= 1e-9
        note(f"nDCG@20 {report['mean']['ndcg@20']:.4f}, max metric diff {diff:.1e}, resumed from 400, re-run no-op")
