"""Command-line surface: exit codes, shard planning and the ingest/search/eval pipeline."""

from __future__ import annotations

import json
import shutil
import subprocess
import sys

import pytest

from corpus import cli_pipeline
from shardstream.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, cli_pipeline(root, stop=130)


def test_shard_plan_deployment_example(capsys):
    assert main(["shard-plan", "--n-docs", "504000000", "--A", "5000000", "--B", "500000"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "large=100 small=8 incomplete=0 total=108"
    assert out[1].startswith("index passes:")


def test_shard_plan_rejects_bad_blocks(capsys):
    assert main(["shard-plan", "--n-docs", "10", "--A", "5", "--B", "3"]) == 2


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["shard-plan", "--n-docs", "x", "--A", "6", "--B", "3"],
                                  ["search", "--index", "i"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_missing_and_malformed_inputs_exit_2(tmp_path, capsys):
    assert main(["eval", "--run", str(tmp_path / "none"), "--qrels", str(tmp_path / "none")]) == 2
    (tmp_path / "run.txt").write_text("q1 Q0 d1 1\n")
    (tmp_path / "qrels.txt").write_text("q1 0 d1 1\n")
    assert main(["eval", "--run", str(tmp_path / "run.txt"), "--qrels", str(tmp_path / "qrels.txt")]) == 2
    (tmp_path / "run.txt").write_text("q1 Q0 d1 1 2.0 t\n")
    assert main(["eval", "--run", str(tmp_path / "run.txt"), "--qrels", str(tmp_path / "qrels.txt"),
                 "--metrics", "bleu"]) == 2
    assert main(["search", "--index", str(tmp_path / "none"), "--queries", "q", "--out", "o"]) == 2


def test_eval_metric_aliases(tmp_path, capsys):
    (tmp_path / "run.txt").write_text("q1 Q0 d2 1 2.0 t\nq1 Q0 d1 2 1.0 t\n")
    (tmp_path / "qrels.txt").write_text("q1 0 d1 1\n")
    assert main(["eval", "--run", str(tmp_path / "run.txt"), "--qrels", str(tmp_path / "qrels.txt"),
                 "--metrics", "map,MAP',r@1,jg@2"]) == 0
    assert capsys.readouterr().out.splitlines() == ["map\tall\t0.5000", "map'\tall\t1.0000",
                                                    "recall@1\tall\t0.0000", "judged@2\tall\t0.5000"]


def test_pipeline_exit_codes(pipeline):
    _, (codes, out, _, _) = pipeline
    assert codes == {"synth": 0, "ingest_partial": 0, "search_partial": 2, "ingest": 0, "ingest_again": 0,
                     "search": 0, "eval": 0}
    assert out["ingest_partial"][0].startswith("stopped after 130 documents")
    assert "(resumed from 100)" in out["ingest"][0]
    assert "nothing to do" in out["ingest_again"][0]


def test_pipeline_matches_in_process_run(pipeline):
    root, (_, _, report, in_process) = pipeline
    assert set(report["mean"]) == set(in_process)
    for m, v in in_process.items():
        assert abs(report["mean"][m] - v) <= 1e-9, m
    rows = (root / "per_query.tsv").read_text().splitlines()
    assert rows[0].split("\t")[0] == "query_id" and len(rows) == 1 + len(report["per_query"])


def test_tampered_manifest_is_an_invariant_violation(pipeline, tmp_path, capsys):
    root, _ = pipeline
    shutil.copytree(root / "index", tmp_path / "index")
    man = json.loads((tmp_path / "index" / "manifest.json").read_text())
    man["active"].append(dict(man["active"][0]))  # one shard listed twice: documents in two shards
    (tmp_path / "index" / "manifest.json").write_text(json.dumps(man))
    argv = ["search", "--index", str(tmp_path / "index"), "--queries", str(root / "data" / "queries.tsv"),
            "--out", str(tmp_path / "run.txt")]
    assert main(argv) == 3
    assert "INVARIANT VIOLATION" in capsys.readouterr().err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "shardstream", "shard-plan", "--n-docs", "1200", "--A", "600",
                           "--B", "100"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "large=2 small=0 incomplete=0 total=2"
