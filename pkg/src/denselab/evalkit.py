"""IR metrics, STS correlations, and before/after comparison tables.

Retrieval metrics follow the standard definitions. With ``rel`` the set of
docs with grade > 0 for a query and a ranking ``d_1, d_2, ...``:

* accuracy@k -- 1 if any of the top k is relevant (hit rate);
* precision@k -- |rel intersect top-k| / k;
* recall@k -- |rel intersect top-k| / |rel|;
* mrr@k -- 1/rank of the first relevant doc within the top k, else 0;
* ndcg@k -- DCG@k / IDCG@k with gain = grade and discount 1/log2(rank + 1);
* map@k -- average precision truncated at k, divided by min(|rel|, k).

Queries with no positive judgment (or absent from the qrels) are excluded
from the means and counted as skipped. Correlations are computed from first
principles: Pearson as centered covariance over the product of standard
deviations, Spearman as Pearson over average-tie ranks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Qrels, ScoredPair, ScoredPairSet
from .encoder import EncoderParams, encode
from .retrieval import MEASURES, RankedList, similarity


@dataclass
class MetricReport:
    """Per-cutoff retrieval metrics plus evaluated/skipped query counts."""

    accuracy: dict[int, float]
    precision: dict[int, float]
    recall: dict[int, float]
    mrr: dict[int, float]
    ndcg: dict[int, float]
    map: dict[int, float]
    evaluated_queries: int
    skipped_queries: int

    def to_dict(self) -> dict:
        def keyed(d: dict[int, float]) -> dict[str, float]:
            return {str(k): v for k, v in sorted(d.items())}

        return {
            "accuracy": keyed(self.accuracy),
            "precision": keyed(self.precision),
            "recall": keyed(self.recall),
            "mrr": keyed(self.mrr),
            "ndcg": keyed(self.ndcg),
            "map": keyed(self.map),
            "evaluated_queries": self.evaluated_queries,
            "skipped_queries": self.skipped_queries,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "MetricReport":
        def unkeyed(d: Mapping) -> dict[int, float]:
            return {int(k): float(v) for k, v in d.items()}

        return cls(
            accuracy=unkeyed(obj["accuracy"]),
            precision=unkeyed(obj["precision"]),
            recall=unkeyed(obj["recall"]),
            mrr=unkeyed(obj["mrr"]),
            ndcg=unkeyed(obj["ndcg"]),
            map=unkeyed(obj["map"]),
            evaluated_queries=int(obj["evaluated_queries"]),
            skipped_queries=int(obj["skipped_queries"]),
        )

    def rows(self) -> list[tuple[str, float]]:
        """Flat (label, value) rows in a fixed rendering order."""
        out: list[tuple[str, float]] = []
        for name, values in (
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("mrr", self.mrr),
            ("ndcg", self.ndcg),
            ("map", self.map),
        ):
            for k in sorted(values):
                out.append((f"{name}@{k}", values[k]))
        return out


@dataclass
class StsReport:
    """Pearson/Spearman per similarity measure."""

    correlations: dict[str, tuple[float, float]]  # measure -> (pearson, spearman)
    pairs: int

    def to_dict(self) -> dict:
        return {
            "measures": {
                m: {"pearson": p, "spearman": s} for m, (p, s) in self.correlations.items()
            },
            "pairs": self.pairs,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "StsReport":
        return cls(
            correlations={
                m: (float(v["pearson"]), float(v["spearman"]))
                for m, v in obj["measures"].items()
            },
            pairs=int(obj["pairs"]),
        )


def _ranking_doc_ids(ranking) -> list[str]:
    if isinstance(ranking, RankedList):
        return [doc for doc, _ in ranking.items]
    return [doc for doc, _ in ranking]


def ir_metrics(
    run: Mapping[str, RankedList],
    qrels: Qrels,
    cutoffs: Sequence[int] = (1, 3, 5, 10),
    *,
    mrr_cutoff: int = 10,
    ndcg_cutoff: int = 10,
    map_cutoff: int = 100,
) -> MetricReport:
    """Evaluate a run (query id -> ranking) against relevance judgments."""
    if not run:
        raise ValueError("empty run")
    cutoffs = tuple(cutoffs)
    for k in (*cutoffs, mrr_cutoff, ndcg_cutoff, map_cutoff):
        if k < 1:
            raise ValueError(f"cutoff must be >= 1, got {k}")

    acc = {k: 0.0 for k in cutoffs}
    prec = {k: 0.0 for k in cutoffs}
    rec = {k: 0.0 for k in cutoffs}
    mrr_sum = 0.0
    ndcg_sum = 0.0
    ap_sum = 0.0
    evaluated = 0
    skipped = 0

    for qid, ranking in run.items():
        if qid not in qrels:
            skipped += 1
            continue
        rel = qrels.relevant(qid)
        if not rel:
            skipped += 1
            continue
        evaluated += 1
        docs = _ranking_doc_ids(ranking)

        for k in cutoffs:
            inter = sum(1 for d in docs[:k] if d in rel)
            acc[k] += 1.0 if inter > 0 else 0.0
            prec[k] += inter / k
            rec[k] += inter / len(rel)

        for rank, d in enumerate(docs[:mrr_cutoff], start=1):
            if d in rel:
                mrr_sum += 1.0 / rank
                break

        dcg = sum(
            rel.get(d, 0) / math.log2(rank + 1)
            for rank, d in enumerate(docs[:ndcg_cutoff], start=1)
        )
        ideal_gains = sorted(rel.values(), reverse=True)[:ndcg_cutoff]
        idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal_gains, start=1))
        ndcg_sum += dcg / idcg

        hits = 0
        ap = 0.0
        for rank, d in enumerate(docs[:map_cutoff], start=1):
            if d in rel:
                hits += 1
                ap += hits / rank
        ap_sum += ap / min(len(rel), map_cutoff)

    if evaluated == 0:
        raise ValueError("no evaluable queries: every run query was skipped")

    return MetricReport(
        accuracy={k: v / evaluated for k, v in acc.items()},
        precision={k: v / evaluated for k, v in prec.items()},
        recall={k: v / evaluated for k, v in rec.items()},
        mrr={mrr_cutoff: mrr_sum / evaluated},
        ndcg={ndcg_cutoff: ndcg_sum / evaluated},
        map={map_cutoff: ap_sum / evaluated},
        evaluated_queries=evaluated,
        skipped_queries=skipped,
    )


def pearson(x: Sequence[float], y: Sequence[float], names: tuple[str, str] = ("x", "y")) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be vectors of equal length")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(xc @ xc))
    sy = math.sqrt(float(yc @ yc))
    if sx == 0.0:
        raise ValueError(f"zero variance in {names[0]} series")
    if sy == 0.0:
        raise ValueError(f"zero variance in {names[1]} series")
    return float(xc @ yc) / (sx * sy)


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float], names: tuple[str, str] = ("x", "y")) -> float:
    return pearson(average_ranks(x), average_ranks(y), names)


def sts_eval(
    params: EncoderParams,
    pairs: ScoredPairSet | Sequence[ScoredPair],
    measures: Sequence[str] = MEASURES,
) -> StsReport:
    """Encode each sentence pair and correlate model similarities with gold."""
    items = list(pairs)
    if len(items) < 3:
        raise ValueError("need at least 3 pairs for correlation")
    gold = [p.gold_score for p in items]
    embeddings = [
        (encode(params, p.sentence_a)[0], encode(params, p.sentence_b)[0]) for p in items
    ]
    correlations: dict[str, tuple[float, float]] = {}
    for measure in measures:
        preds = [similarity(a, b, measure) for a, b in embeddings]
        names = (f"{measure} predictions", "gold")
        correlations[measure] = (pearson(preds, gold, names), spearman(preds, gold, names))
    return StsReport(correlations=correlations, pairs=len(items))


def relative_improvement(after: float, before: float) -> float:
    """Signed percentage change, 100 * (after - before) / before."""
    if before <= 0:
        raise ValueError(f"baseline must be positive, got {before}")
    return 100.0 * (after - before) / before


# Rows whose computed improvement differs from a published figure by more
# than this many percentage points get a table footnote.
DISCREPANCY_PP = 0.5


@dataclass
class ComparisonRow:
    metric: str
    before: float | None
    after: float | None
    improvement_pct: float | None
    published_pct: float | None = None
    flagged: bool = False


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    before_label: str = "before"
    after_label: str = "after"
    footnotes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "before_label": self.before_label,
            "after_label": self.after_label,
            "rows": [
                {
                    "metric": r.metric,
                    "before": r.before,
                    "after": r.after,
                    "improvement_pct": r.improvement_pct,
                    "published_pct": r.published_pct,
                    "flagged": r.flagged,
                }
                for r in self.rows
            ],
            "footnotes": list(self.footnotes),
        }

    def to_text(self) -> str:
        def fmt(v: float | None) -> str:
            return "-" if v is None else f"{v:.4f}"

        width = max([len(r.metric) for r in self.rows] + [6])
        lines = [
            f"{'metric':<{width}}  {self.before_label} -> {self.after_label}    improvement"
        ]
        for r in self.rows:
            imp = "n/a" if r.improvement_pct is None else f"{r.improvement_pct:+.2f}%"
            mark = " *" if r.flagged else ""
            lines.append(f"{r.metric:<{width}}  {fmt(r.before)} -> {fmt(r.after)}    {imp}{mark}")
        for note in self.footnotes:
            lines.append(f"* {note}")
        return "\n".join(lines) + "\n"


def compare_reports(before: MetricReport, after: MetricReport) -> ComparisonTable:
    """Metric-by-metric comparison of two reports with relative improvements."""
    for name in ("accuracy", "precision", "recall", "mrr", "ndcg", "map"):
        if set(getattr(before, name)) != set(getattr(after, name)):
            raise ValueError(f"cutoff mismatch in {name}")
    rows = []
    after_values = dict(after.rows())
    for metric, before_value in before.rows():
        after_value = after_values[metric]
        imp = relative_improvement(after_value, before_value) if before_value > 0 else None
        rows.append(ComparisonRow(metric, before_value, after_value, imp))
    return ComparisonTable(rows=rows)


def improvement_table(
    after: Mapping[str, float],
    before: Mapping[str, float | None],
    published_pct: Mapping[str, float] | None = None,
    before_label: str = "before",
    after_label: str = "after",
) -> ComparisonTable:
    """Comparison against a baseline whose values may be missing.

    When ``published_pct`` supplies a previously reported improvement for a
    metric, rows whose computed figure differs by more than
    ``DISCREPANCY_PP`` percentage points are flagged and footnoted rather
    than silently reconciled.
    """
    rows: list[ComparisonRow] = []
    footnotes: list[str] = []
    for metric, after_value in after.items():
        base = before.get(metric)
        if base is None or base <= 0:
            rows.append(ComparisonRow(metric, base, after_value, None))
            continue
        imp = relative_improvement(after_value, base)
        pub = None if published_pct is None else published_pct.get(metric)
        flagged = pub is not None and abs(imp - pub) > DISCREPANCY_PP
        if flagged:
            footnotes.append(
                f"{metric}: computed {imp:+.2f}% does not match the reported "
                f"{pub:+.2f}% under 100*(after-before)/before"
            )
        rows.append(ComparisonRow(metric, base, after_value, imp, pub, flagged))
    return ComparisonTable(
        rows=rows, before_label=before_label, after_label=after_label, footnotes=footnotes
    )


def render_metric_report(report: MetricReport) -> str:
    lines = [f"{metric:<14} {value:.4f}" for metric, value in report.rows()]
    lines.append(f"{'evaluated':<14} {report.evaluated_queries}")
    lines.append(f"{'skipped':<14} {report.skipped_queries}")
    return "\n".join(lines) + "\n"


def render_sts_report(report: StsReport) -> str:
    lines = [f"{'measure':<12} {'pearson':>8} {'spearman':>9}"]
    for measure, (p, s) in report.correlations.items():
        lines.append(f"{measure:<12} {p:8.4f} {s:9.4f}")
    return "\n".join(lines) + "\n"


def render_sts_comparison(before: StsReport, after: StsReport) -> str:
    """Per-measure Pearson/Spearman change table."""
    lines = [f"{'measure':<12} {'pearson':<20} {'spearman':<20}"]
    for measure, (p0, s0) in before.correlations.items():
        p1, s1 = after.correlations[measure]
        lines.append(
            f"{measure:<12} {p0:.4f} -> {p1:.4f}     {s0:.4f} -> {s1:.4f}"
        )
    return "\n".join(lines) + "\n"
