"""Span-level scoring, bucketed breakdowns and oracle error corrections.

Scoring follows the exact-match convention of the CoNLL-2005 scorer: a
predicted argument is correct iff start, end and label all match a gold
argument of the same (sentence, predicate).  Labels are opaque strings.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import RoleSpan

TRANSFORMATIONS = ("fix_labels", "merge_spans", "split_spans", "fix_boundary", "drop_arg", "add_arg")
# order used when all corrections are chained
CHAIN_ORDER = ("drop_arg", "add_arg", "merge_spans", "split_spans", "fix_boundary", "fix_labels")

Spans = Mapping[object, Iterable[RoleSpan]]


class EvalError(ValueError):
    pass


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    correct: int
    predicted: int
    gold: int
    buckets: dict[str, list[dict]] = field(default_factory=dict)
    corrections: list[dict] = field(default_factory=list)

    @classmethod
    def from_counts(cls, correct: int, predicted: int, gold: int) -> "MetricsReport":
        p = correct / predicted if predicted else 0.0
        r = correct / gold if gold else 0.0
        return cls(p, r, f1_score(p, r), correct, predicted, gold)

    @classmethod
    def empty(cls) -> "MetricsReport":
        return cls.from_counts(0, 0, 0)

    def to_json(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"{'':<16}{'corr':>7}{'pred':>7}{'gold':>7}{'P':>9}{'R':>9}{'F1':>9}",
            _row("overall", self.correct, self.predicted, self.gold, self.precision, self.recall, self.f1),
        ]
        for name, rows in self.buckets.items():
            lines.append(f"\n{name}")
            for b in rows:
                lines.append(_row(b["bucket"], b["correct"], b["predicted"], b["gold"], b["precision"], b["recall"], b["f1"]))
        if self.corrections:
            lines.append(f"\n{'correction':<16}{'F1 before':>11}{'F1 after':>11}{'delta':>9}")
            for c in self.corrections:
                lines.append(f"{c['name']:<16}{c['f1_before']:>11.4f}{c['f1_after']:>11.4f}{c['delta']:>9.4f}")
        return "\n".join(lines)


def _row(name, c, p, g, P, R, F) -> str:
    return f"{name:<16}{c:>7}{p:>7}{g:>7}{P:>9.4f}{R:>9.4f}{F:>9.4f}"


def _as_sets(spans: Spans) -> dict:
    return {k: set(map(RoleSpan._make, v)) for k, v in spans.items()}


def span_prf(gold: Spans, pred: Spans) -> MetricsReport:
    if set(gold) != set(pred):
        missing = set(gold) ^ set(pred)
        raise EvalError(f"gold and predicted keys differ: {sorted(map(str, missing))[:5]}")
    g, p = _as_sets(gold), _as_sets(pred)
    correct = sum(len(g[k] & p[k]) for k in g)
    return MetricsReport.from_counts(
        correct, sum(len(v) for v in p.values()), sum(len(v) for v in g.values())
    )


# ---------------------------------------------------------------------------
# bucketed reports


@dataclass(frozen=True)
class PredictionRecord:
    key: object
    length: int
    predicate: int
    gold: tuple[RoleSpan, ...]
    pred: tuple[RoleSpan, ...]


def argument_distance(span: RoleSpan, predicate: int) -> int:
    """Tokens between the predicate and the nearest boundary token of the argument."""
    if span.start <= predicate < span.end:
        return 0
    return min(abs(span.start - predicate), abs(span.end - 1 - predicate))


def _bucket_of(value: float, edges: Sequence[float]) -> int:
    if value < edges[0]:
        raise EvalError(f"value {value} lies below the first bucket edge {edges[0]}")
    for i in range(len(edges) - 1):
        if value < edges[i + 1]:
            return i
    if math.isinf(edges[-1]):
        return len(edges) - 2
    return len(edges) - 1


def _bucket_names(edges: Sequence[float]) -> list[str]:
    def fmt(x):
        return "inf" if math.isinf(x) else str(int(x)) if float(x).is_integer() else str(x)

    names = [f"[{fmt(a)},{fmt(b)})" for a, b in zip(edges, edges[1:])]
    if not math.isinf(edges[-1]):
        names.append(f"[{fmt(edges[-1])},inf)")
    return names


def bucket_report(results: Sequence[PredictionRecord], by: str, edges: Sequence[float]) -> list[dict]:
    """Per-bucket micro P/R/F1 by ``sentence_length`` or ``pred_arg_distance``."""
    edges = list(edges)
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise EvalError("bucket edges must be non-empty and strictly increasing")
    if by not in ("sentence_length", "pred_arg_distance"):
        raise EvalError(f"unknown bucketing {by!r}")
    names = _bucket_names(edges)
    counts = [[0, 0, 0] for _ in names]  # correct, predicted, gold
    for rec in results:
        gold, pred = set(rec.gold), set(rec.pred)
        for role_set, col in ((gold, 2), (pred, 1)):
            for s in role_set:
                value = rec.length if by == "sentence_length" else argument_distance(s, rec.predicate)
                b = _bucket_of(value, edges)
                counts[b][col] += 1
                if col == 1 and s in gold:
                    counts[b][0] += 1
    rows = []
    for name, (c, p, g) in zip(names, counts):
        m = MetricsReport.from_counts(c, p, g)
        rows.append({"bucket": name, "correct": c, "predicted": p, "gold": g, "precision": m.precision, "recall": m.recall, "f1": m.f1})
    return rows


# ---------------------------------------------------------------------------
# oracle corrections


def _overlaps(a: RoleSpan, b: RoleSpan) -> bool:
    return a.start < b.end and b.start < a.end


def _same_boundary(a: RoleSpan, b: RoleSpan) -> bool:
    return a.start == b.start and a.end == b.end


def _fix_labels(gold: set, pred: set) -> set:
    by_boundary = {(g.start, g.end): g for g in gold}
    return {by_boundary.get((p.start, p.end), p) for p in pred}


def _merge_spans(gold: set, pred: set) -> set:
    boundaries = {(g.start, g.end): g for g in gold}
    ordered = sorted(pred)
    out, i = set(), 0
    while i < len(ordered):
        a = ordered[i]
        if i + 1 < len(ordered):
            b = ordered[i + 1]
            g = boundaries.get((a.start, b.end))
            if g is not None and b.start >= a.end and a not in gold and b not in gold:
                out.add(g)
                i += 2
                continue
        out.add(a)
        i += 1
    return out


def _split_spans(gold: set, pred: set) -> set:
    out = set()
    for p in pred:
        hits = [g for g in gold if _overlaps(p, g)]
        if len(hits) >= 2 and p not in gold:
            out.update(hits)
        else:
            out.add(p)
    return out


def _fix_boundary(gold: set, pred: set) -> set:
    out = set()
    for p in pred:
        hits = [g for g in gold if _overlaps(p, g)]
        if len(hits) == 1 and not _same_boundary(p, hits[0]):
            out.add(hits[0])
        else:
            out.add(p)
    return out


def _drop_arg(gold: set, pred: set) -> set:
    return {p for p in pred if any(_overlaps(p, g) for g in gold)}


def _add_arg(gold: set, pred: set) -> set:
    return pred | {g for g in gold if not any(_overlaps(g, p) for p in pred)}


_FIXERS = {
    "fix_labels": _fix_labels,
    "merge_spans": _merge_spans,
    "split_spans": _split_spans,
    "fix_boundary": _fix_boundary,
    "drop_arg": _drop_arg,
    "add_arg": _add_arg,
}


def oracle_fix(gold: Spans, pred: Spans, transformation: str) -> tuple[dict, float, float]:
    """Correct one error class using gold as oracle; returns (new pred, F1 before, F1 after).

    * fix_labels: relabel predictions whose boundaries match a gold argument.
    * merge_spans: fuse two neighbouring predictions (and the tokens between
      them) when the fusion is a gold argument.
    * split_spans: replace a prediction overlapping two or more gold
      arguments with those arguments.
    * fix_boundary: replace a prediction overlapping exactly one gold
      argument with that argument.
    * drop_arg: remove predictions overlapping no gold argument.
    * add_arg: insert gold arguments overlapping no prediction.
    """
    if transformation not in _FIXERS:
        raise EvalError(f"unknown transformation {transformation!r}")
    g, p = _as_sets(gold), _as_sets(pred)
    if set(g) != set(p):
        raise EvalError("gold and predicted keys differ")
    before = span_prf(g, p).f1
    fixed = {k: _FIXERS[transformation](g[k], p[k]) for k in p}
    return fixed, before, span_prf(g, fixed).f1


def oracle_report(gold: Spans, pred: Spans, order: Sequence[str] = CHAIN_ORDER, cumulative: bool = True) -> list[dict]:
    """F1 after each correction, applied in turn (cumulative) or each from the original."""
    rows = []
    current = _as_sets(pred)
    for name in order:
        fixed, before, after = oracle_fix(gold, current if cumulative else pred, name)
        rows.append({"name": name, "f1_before": before, "f1_after": after, "delta": after - before})
        if cumulative:
            current = fixed
    return rows


# ---------------------------------------------------------------------------
# output


def records_from(instances, predictions: Mapping) -> list[PredictionRecord]:
    return [
        PredictionRecord(i.key, len(i.tokens), i.pred, tuple(i.gold_spans), tuple(predictions[i.key]))
        for i in instances
    ]


def full_report(
    records: Sequence[PredictionRecord],
    buckets: Mapping[str, Sequence[float]] | None = None,
    oracle: Sequence[str] | None = None,
) -> MetricsReport:
    gold = {r.key: r.gold for r in records}
    pred = {r.key: r.pred for r in records}
    report = span_prf(gold, pred)
    for by, edges in (buckets or {}).items():
        report.buckets[by] = bucket_report(records, by, edges)
    if oracle:
        report.corrections = oracle_report(gold, pred, oracle)
    return report


def plot_csv(report: MetricsReport) -> dict[str, str]:
    """CSV text per figure: one file per bucketing plus one for corrections."""
    files = {}
    for name, rows in report.buckets.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "correct", "predicted", "gold", "precision", "recall", "f1"])
        for r in rows:
            w.writerow([r["bucket"], r["correct"], r["predicted"], r["gold"], r["precision"], r["recall"], r["f1"]])
        files[f"{name}.csv"] = buf.getvalue()
    if report.corrections:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["correction", "f1_before", "f1_after", "delta"])
        for c in report.corrections:
            w.writerow([c["name"], c["f1_before"], c["f1_after"], c["delta"]])
        files["corrections.csv"] = buf.getvalue()
    return files


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_json(), indent=2, default=str)
