"""Ranked-retrieval metrics over graded judgments.

Judgments map ``(query_id, doc_id)`` to a grade >= 0. A pair that is absent
is *unjudged*, which is not the same as grade 0: unjudged documents earn no
gain, but the primed metrics drop them from the ranking altogether.

A document counts as relevant when its grade is at least 1. nDCG uses the
raw grade as gain unless ``gain="exponential"`` (``2**grade - 1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import FormatError

Judgments = Mapping[str, Mapping[str, int]]  # query_id -> doc_id -> grade

DEFAULT_METRICS = ("ndcg@20", "map", "recall@100", "recall@1000", "judged@20", "ndcg'@20", "map'")


def _gain(grade: int, gain: str) -> float:
    if gain == "linear":
        return float(grade)
    if gain == "exponential":
        return float(2**grade - 1)
    raise ValueError(f"unknown gain {gain!r}")


def ndcg_at_k(ranking: Sequence[str], judged: Mapping[str, int], k: int, gain: str = "linear") -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = sum(_gain(judged.get(d, 0), gain) / math.log2(i + 2) for i, d in enumerate(ranking[:k]))
    ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
    idcg = sum(_gain(g, gain) / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


def average_precision(ranking: Sequence[str], judged: Mapping[str, int]) -> float:
    n_rel = sum(1 for g in judged.values() if g >= 1)
    if n_rel == 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, d in enumerate(ranking, start=1):
        if judged.get(d, 0) >= 1:
            hits += 1
            total += hits / i
    return total / n_rel


def recall_at_k(ranking: Sequence[str], judged: Mapping[str, int], k: int) -> float:
    n_rel = sum(1 for g in judged.values() if g >= 1)
    if n_rel == 0:
        return 0.0
    return sum(1 for d in ranking[:k] if judged.get(d, 0) >= 1) / n_rel


def judged_at_k(ranking: Sequence[str], judged: Mapping[str, int], k: int) -> float:
    """Fraction of the first k ranks holding a judged document (missing ranks count as unjudged)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(1 for d in ranking[:k] if d in judged) / k


def condense(ranking: Sequence[str], judged: Mapping[str, int]) -> list[str]:
    return [d for d in ranking if d in judged]


def metric_value(name: str, ranking: Sequence[str], judged: Mapping[str, int], gain: str = "linear") -> float:
    """Evaluate one metric by name, e.g. ``ndcg@20``, ``map'``, ``recall@100``, ``judged@20``."""
    base, _, cut = name.partition("@")
    primed = base.endswith("'")
    if primed:
        base = base[:-1]
        ranking = condense(ranking, judged)
    k = int(cut) if cut else None
    if base == "ndcg" and k:
        return ndcg_at_k(ranking, judged, k, gain)
    if base == "map" and k is None:
        return average_precision(ranking, judged)
    if base == "recall" and k:
        return recall_at_k(ranking, judged, k)
    if base == "judged" and k and not primed:
        return judged_at_k(ranking, judged, k)
    raise ValueError(f"unknown metric {name!r}")


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "per_query": {q: dict(v) for q, v in self.per_query.items()}}

    def format(self) -> str:
        return "\n".join(f"{name}\tall\t{value:.4f}" for name, value in self.mean.items())


def evaluate_run(
    run: Mapping[str, Sequence[str]],
    qrels: Judgments,
    metrics: Iterable[str] = DEFAULT_METRICS,
    gain: str = "linear",
) -> MetricReport:
    """Score a run against judgments; queries without judgments are skipped,
    judged queries missing from the run score 0."""
    metrics = tuple(metrics)
    report = MetricReport()
    for qid in sorted(qrels):
        ranking = list(run.get(qid, ()))
        report.per_query[qid] = {m: metric_value(m, ranking, qrels[qid], gain) for m in metrics}
    n = len(report.per_query)
    for m in metrics:
        report.mean[m] = sum(v[m] for v in report.per_query.values()) / n if n else 0.0
    return report


def run_doc_ids(run: Mapping[str, Sequence[tuple[str, float]]]) -> dict[str, list[str]]:
    return {q: [d for d, _ in r] for q, r in run.items()}


# -- judgments files ---------------------------------------------------------------


def read_qrels(path: str | Path) -> dict[str, dict[str, int]]:
    qrels: dict[str, dict[str, int]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 4 columns, got {len(parts)}")
        try:
            grade = int(parts[3])
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: bad grade {parts[3]!r}") from exc
        if grade < 0:
            raise FormatError(f"{path}:{n}: negative grade")
        qrels.setdefault(parts[0], {})[parts[2]] = grade
    return qrels


def write_qrels(qrels: Judgments, path: str | Path) -> None:
    lines = [f"{q} 0 {d} {g}" for q in sorted(qrels) for d, g in sorted(qrels[q].items())]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
