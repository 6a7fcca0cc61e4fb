"""Command-line entry point: ``shardstream <command> ...``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 broken index
invariant.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import bench
from .config import EngineConfig, load_stream_spec, write_stream_spec
from .embed import SyntheticEmbedder
from .engine import embed_queries, ingest_to_store, load_index, search_queries
from .errors import DataError, InvariantViolation
from .evaluate import evaluate_run, read_qrels, write_qrels
from .lifecycle import reindex_work, shard_count
from .search import read_run, write_run
from .stream import generate_drift_stream, order_stream, read_corpus, read_queries, write_corpus, write_queries

log = logging.getLogger("shardstream")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
METRIC_ALIASES = {"r": "recall", "jg": "judged"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path: str | None) -> EngineConfig:
    return EngineConfig.load(path) if path else EngineConfig()


def _with_absolute_paths(config: EngineConfig, base: Path) -> EngineConfig:
    """Anchor relative vector-file paths at ``base`` so they survive in the index manifest."""
    if config.embedder != "file":
        return config
    fix = lambda p: str((base / p).resolve()) if p else p  # noqa: E731
    return config.replace(vectors_path=fix(config.vectors_path), query_vectors_path=fix(config.query_vectors_path))


def _config_for_spec(spec, config_path: str | None) -> EngineConfig:
    """Engine config whose synthetic embedder matches a stream spec."""
    base = _load_config(config_path)
    emb = SyntheticEmbedder.from_stream_spec(spec)
    return base.replace(
        dim=spec.dim, embedder="synthetic", n_concepts=emb.n_concepts,
        vocab_per_concept=emb.vocab_per_concept, noise_scale=emb.noise_scale, n_topics=emb.n_topics,
        concept_spread=emb.concept_spread, embedder_seed=emb.seed,
    )


def _write_json(obj, out: str | None) -> None:
    text = bench.to_json(obj)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# -- commands ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = load_stream_spec(args.spec)
    stream = generate_drift_stream(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(stream.docs, out / "corpus.jsonl")
    write_queries(stream.queries, out / "queries.tsv")
    write_qrels(stream.qrels, out / "qrels.txt")
    write_stream_spec(spec, out / "stream.ini")
    _config_for_spec(spec, args.config).save(out / "engine.ini")
    print(f"wrote {len(stream.docs)} documents and {len(stream.queries)} queries to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    config = _with_absolute_paths(_load_config(args.config), base)
    corpus = Path(args.corpus)
    docs = order_stream(read_corpus(corpus))
    embedder = config.make_embedder()
    outcome = ingest_to_store(docs, config, embedder, args.out, _file_digest(corpus), args.limit)
    if outcome.noop:
        print(f"index at {args.out} is complete ({outcome.n_ingested} documents); nothing to do")
    elif args.limit is not None and outcome.n_ingested < len(docs):
        print(f"stopped after {outcome.n_ingested} documents; rerun to resume")
    else:
        counts = outcome.lifecycle.active_counts()
        print(f"ingested {outcome.n_ingested} documents (resumed from {outcome.resumed_from}); "
              f"large={counts[0]} small={counts[1]} incomplete={counts[2]} total={counts[3]}")
    return EXIT_OK


def cmd_search(args) -> int:
    shards, man = load_index(args.index)
    if args.config:
        config = _with_absolute_paths(_load_config(args.config), Path(args.config).resolve().parent)
    else:
        config = EngineConfig.from_ini(man["config"])
    changes = {k: v for k, v in (("top_docs", args.top_docs), ("n_per_shard", args.n_per_shard),
                                  ("nprobe", args.nprobe), ("workers", args.workers)) if v is not None}
    config = config.replace(**changes)
    embedder = config.make_embedder()
    if embedder.fingerprint.hex() != man["embedder_fingerprint"]:
        raise DataError("configured embedder does not match the one the index was built with")
    queries = embed_queries(read_queries(args.queries), embedder)
    results = search_queries(queries, shards, config)
    write_run(results, args.out, args.tag)
    print(f"searched {len(queries)} queries over {len(shards)} shards; run written to {args.out}")
    return EXIT_OK


def _metric_names(spec: str) -> list[str]:
    out = []
    for name in spec.split(","):
        name = name.strip().lower()
        base, sep, cut = name.partition("@")
        primed = base.endswith("'")
        base = base.rstrip("'")
        base = METRIC_ALIASES.get(base, base)
        out.append(base + ("'" if primed else "") + sep + cut)
    return out


def cmd_eval(args) -> int:
    run = {q: [d for d, _ in r] for q, r in read_run(args.run).items()}
    qrels = read_qrels(args.qrels)
    try:
        report = evaluate_run(run, qrels, _metric_names(args.metrics), args.gain)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if args.out:
        Path(args.out).write_text(bench.to_json(report.to_dict()) + "\n", encoding="utf-8")
    if args.per_query:
        names = list(report.mean)
        lines = ["query_id\t" + "\t".join(names)]
        lines += [q + "\t" + "\t".join(repr(v[m]) for m in names) for q, v in report.per_query.items()]
        Path(args.per_query).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(report.format())
    return EXIT_OK


def cmd_drift_bench(args) -> int:
    spec = load_stream_spec(args.spec)
    config = _config_for_spec(spec, args.config)
    checkpoints = [float(x) for x in args.checkpoints.split(",")]
    rows = bench.drift_sweep(generate_drift_stream(spec), config, checkpoints)
    print(bench.format_sweep(rows))
    if args.out:
        Path(args.out).write_text(bench.to_json([r.to_dict() for r in rows]) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_oracle_bench(args) -> int:
    spec = load_stream_spec(args.spec)
    config = _config_for_spec(spec, args.config)
    _write_json(bench.oracle_comparison(generate_drift_stream(spec), config, exact=args.exact), args.out)
    return EXIT_OK


def cmd_throughput(args) -> int:
    spec = load_stream_spec(args.spec)
    config = _config_for_spec(spec, args.config)
    _write_json(bench.throughput_bench(generate_drift_stream(spec), config), args.out)
    return EXIT_OK


def cmd_shard_plan(args) -> int:
    n_l, n_s, n_i, total = shard_count(args.n_docs, args.A, args.B)
    print(f"large={n_l} small={n_s} incomplete={n_i} total={total}")
    work = reindex_work(args.n_docs, args.A, args.B)
    print(f"index passes: arrival={work['arrival']} small_rebuilds={work['small_rebuilds']} "
          f"large_rebuilds={work['large_rebuilds']} total={work['total']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shardstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus, queries and judgments")
    s.add_argument("--spec", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="index a corpus (resumes an interrupted run)")
    s.add_argument("--config")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, help="stop after this many documents")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("search", help="run queries against an index")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--top-docs", type=int)
    s.add_argument("--n-per-shard", type=int)
    s.add_argument("--nprobe", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--tag", default="shardstream")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", help="score a run file")
    s.add_argument("--run", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--metrics", default="ndcg@20,map,r@100,r@1000,judged@20,ndcg'@20,map'")
    s.add_argument("--gain", choices=("linear", "exponential"), default="linear")
    s.add_argument("--out", help="JSON report")
    s.add_argument("--per-query", help="per-query TSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("drift-bench", help="model staleness sweep")
    s.add_argument("--spec", required=True)
    s.add_argument("--checkpoints", default="0.05,0.75,0.90,1.00")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_drift_bench)

    s = sub.add_parser("oracle-bench", help="sharded lifecycle vs single-model oracle")
    s.add_argument("--spec", required=True)
    s.add_argument("--config")
    s.add_argument("--exact", action="store_true", help="use uncompressed shards everywhere")
    s.add_argument("--out")
    s.set_defaults(func=cmd_oracle_bench)

    s = sub.add_parser("throughput-bench", help="indexing rate and query latency")
    s.add_argument("--spec", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_throughput)

    s = sub.add_parser("shard-plan", help="shard counts and index work for N documents")
    s.add_argument("--n-docs", type=int, required=True)
    s.add_argument("--A", type=int, required=True)
    s.add_argument("--B", type=int, required=True)
    s.set_defaults(func=cmd_shard_plan)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"INVARIANT VIOLATION: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
