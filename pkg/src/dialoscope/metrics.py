"""Binary classification metrics and rank correlations for result reports.

Defect is the positive class throughout. Zero-denominator precision and
recall are defined as 0; undefined correlations (constant inputs) raise
rather than silently reporting 0.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import BinaryLabel, binarize, defect_rate
from .exceptions import DataError, UndefinedCorrelationError
from .scoring import METHOD_LOGITS, ScoredDialogue


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion tallies with defect as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    """One result-table row: class metrics, averages, correlations, coverage."""

    defect_rate: float
    defect: ClassMetrics
    non_defect: ClassMetrics
    weighted_avg: ClassMetrics
    macro_avg: ClassMetrics
    f1_micro: float
    spearman: float
    pearson: float
    n_scored: int
    n_parse_failed: int

    @property
    def coverage(self) -> float:
        return self.n_scored / (self.n_scored + self.n_parse_failed)


def confusion(
    predictions: Sequence[BinaryLabel], golds: Sequence[BinaryLabel]
) -> ConfusionCounts:
    if not predictions:
        raise DataError("confusion of empty label lists is undefined")
    if len(predictions) != len(golds):
        raise DataError(
            f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds"
        )
    tp = fp = fn = tn = 0
    for pred, gold in zip(predictions, golds):
        if pred is BinaryLabel.DEFECT:
            if gold is BinaryLabel.DEFECT:
                tp += 1
            else:
                fp += 1
        else:
            if gold is BinaryLabel.DEFECT:
                fn += 1
            else:
                tn += 1
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _prf(tp: int, fp: int, fn: int) -> ClassMetrics:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassMetrics(precision=precision, recall=recall, f1=f1)


def class_metrics(counts: ConfusionCounts, positive: BinaryLabel) -> ClassMetrics:
    """Precision/recall/F1 for one class; counts are mirrored for non-defect."""
    if positive is BinaryLabel.DEFECT:
        return _prf(counts.tp, counts.fp, counts.fn)
    return _prf(counts.tn, counts.fn, counts.fp)


def averages(
    defect: ClassMetrics,
    non_defect: ClassMetrics,
    support_defect: int,
    support_non_defect: int,
) -> tuple[ClassMetrics, ClassMetrics]:
    """(weighted, macro) averages of the two per-class metric blocks."""
    total = support_defect + support_non_defect
    if total <= 0:
        raise DataError("averages need at least one supported item")
    w_defect = support_defect / total
    w_non = support_non_defect / total
    weighted = ClassMetrics(
        precision=w_defect * defect.precision + w_non * non_defect.precision,
        recall=w_defect * defect.recall + w_non * non_defect.recall,
        f1=w_defect * defect.f1 + w_non * non_defect.f1,
    )
    macro = ClassMetrics(
        precision=(defect.precision + non_defect.precision) / 2,
        recall=(defect.recall + non_defect.recall) / 2,
        f1=(defect.f1 + non_defect.f1) / 2,
    )
    return weighted, macro


def f1_micro(counts: ConfusionCounts) -> float:
    """Micro-averaged F1, which equals accuracy for single-label binary tasks."""
    if counts.total == 0:
        raise DataError("f1_micro of empty counts is undefined")
    return (counts.tp + counts.tn) / counts.total


def fractional_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties assigned the average of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg_rank = (i + j) / 2 + 1
        for position in range(i, j + 1):
            ranks[order[position]] = avg_rank
        i = j + 1
    return ranks


def _check_pairs(xs: Sequence[float], ys: Sequence[float]) -> None:
    if len(xs) != len(ys):
        raise DataError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise DataError("correlation needs at least 2 pairs")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation; raises UndefinedCorrelationError on zero variance."""
    _check_pairs(xs, ys)
    n = len(xs)
    mean_x = sum(xs) / n
    mean_y = sum(ys) / n
    cov = 0.0
    var_x = 0.0
    var_y = 0.0
    for x, y in zip(xs, ys):
        dx = x - mean_x
        dy = y - mean_y
        cov += dx * dy
        var_x += dx * dx
        var_y += dy * dy
    if var_x == 0.0 or var_y == 0.0:
        raise UndefinedCorrelationError("pearson undefined for constant input")
    return cov / math.sqrt(var_x * var_y)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman correlation: Pearson over fractional (average-tie) ranks."""
    _check_pairs(xs, ys)
    if len(set(xs)) < 2 or len(set(ys)) < 2:
        raise UndefinedCorrelationError("spearman undefined for constant input")
    return pearson(fractional_ranks(xs), fractional_ranks(ys))


def build_report(
    scored: Sequence[ScoredDialogue],
    golds: Mapping[str, int],
    threshold: int = 3,
) -> MetricsReport:
    """Assemble the full report from scored dialogues and gold ratings.

    Parse failures are counted and excluded from every other field.
    Correlations pair gold Likert values with the continuous rating for the
    logits method and the parsed Likert value for generation methods.
    """
    usable = [s for s in scored if s.parse_ok]
    n_parse_failed = len(scored) - len(usable)
    if not usable:
        raise DataError("no successfully scored dialogues to report on")
    for item in usable:
        if item.dialogue_id not in golds:
            raise DataError(f"no gold rating for dialogue {item.dialogue_id!r}")
    gold_values = [golds[s.dialogue_id] for s in usable]
    predicted = [
        s.continuous_rating if s.method == METHOD_LOGITS else float(s.likert)
        for s in usable
    ]
    gold_labels = [binarize(v, threshold) for v in gold_values]
    pred_labels = [binarize(s.likert, threshold) for s in usable]
    counts = confusion(pred_labels, gold_labels)
    defect = class_metrics(counts, BinaryLabel.DEFECT)
    non_defect = class_metrics(counts, BinaryLabel.NON_DEFECT)
    support_defect = sum(1 for label in gold_labels if label is BinaryLabel.DEFECT)
    weighted, macro = averages(
        defect, non_defect, support_defect, len(gold_labels) - support_defect
    )
    return MetricsReport(
        defect_rate=defect_rate(gold_labels),
        defect=defect,
        non_defect=non_defect,
        weighted_avg=weighted,
        macro_avg=macro,
        f1_micro=f1_micro(counts),
        spearman=spearman([float(v) for v in gold_values], predicted),
        pearson=pearson([float(v) for v in gold_values], predicted),
        n_scored=len(usable),
        n_parse_failed=n_parse_failed,
    )


# Table-2 column order, plus F1-micro and parse coverage at the end.
REPORT_COLUMNS: tuple[tuple[str, str], ...] = (
    ("defect_rate", "Defect Rate"),
    ("defect_precision", "Defect Precision"),
    ("defect_recall", "Defect Recall"),
    ("defect_f1", "Defect F1"),
    ("non_defect_precision", "Non-Defect Precision"),
    ("non_defect_recall", "Non-Defect Recall"),
    ("non_defect_f1", "Non-Defect F1"),
    ("weighted_precision", "Weighted Precision"),
    ("weighted_recall", "Weighted Recall"),
    ("weighted_f1", "Weighted F1"),
    ("macro_precision", "Macro Precision"),
    ("macro_recall", "Macro Recall"),
    ("macro_f1", "Macro F1"),
    ("spearman", "Spearman"),
    ("pearson", "Pearson"),
    ("f1_micro", "F1-micro"),
    ("coverage", "Coverage"),
)


def flatten_report(report: MetricsReport) -> dict[str, float]:
    """One flat mapping per report, keyed by the REPORT_COLUMNS names."""
    return {
        "defect_rate": report.defect_rate,
        "defect_precision": report.defect.precision,
        "defect_recall": report.defect.recall,
        "defect_f1": report.defect.f1,
        "non_defect_precision": report.non_defect.precision,
        "non_defect_recall": report.non_defect.recall,
        "non_defect_f1": report.non_defect.f1,
        "weighted_precision": report.weighted_avg.precision,
        "weighted_recall": report.weighted_avg.recall,
        "weighted_f1": report.weighted_avg.f1,
        "macro_precision": report.macro_avg.precision,
        "macro_recall": report.macro_avg.recall,
        "macro_f1": report.macro_avg.f1,
        "spearman": report.spearman,
        "pearson": report.pearson,
        "f1_micro": report.f1_micro,
        "coverage": report.coverage,
        "n_scored": float(report.n_scored),
        "n_parse_failed": float(report.n_parse_failed),
    }


def report_to_dict(report: MetricsReport) -> dict:
    def block(metrics: ClassMetrics) -> dict:
        return {"precision": metrics.precision, "recall": metrics.recall, "f1": metrics.f1}

    return {
        "defect_rate": report.defect_rate,
        "defect": block(report.defect),
        "non_defect": block(report.non_defect),
        "weighted_avg": block(report.weighted_avg),
        "macro_avg": block(report.macro_avg),
        "f1_micro": report.f1_micro,
        "spearman": report.spearman,
        "pearson": report.pearson,
        "n_scored": report.n_scored,
        "n_parse_failed": report.n_parse_failed,
        "coverage": report.coverage,
    }


def report_from_dict(payload: Mapping) -> MetricsReport:
    def block(raw: Mapping) -> ClassMetrics:
        return ClassMetrics(precision=raw["precision"], recall=raw["recall"], f1=raw["f1"])

    try:
        return MetricsReport(
            defect_rate=payload["defect_rate"],
            defect=block(payload["defect"]),
            non_defect=block(payload["non_defect"]),
            weighted_avg=block(payload["weighted_avg"]),
            macro_avg=block(payload["macro_avg"]),
            f1_micro=payload["f1_micro"],
            spearman=payload["spearman"],
            pearson=payload["pearson"],
            n_scored=payload["n_scored"],
            n_parse_failed=payload["n_parse_failed"],
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed report payload: {exc}") from exc


def _format_value(value: float) -> str:
    return format(value, ".6g")


def render_markdown(report: MetricsReport) -> str:
    flat = flatten_report(report)
    headers = [header for _, header in REPORT_COLUMNS]
    values = [_format_value(flat[key]) for key, _ in REPORT_COLUMNS]
    return "\n".join(
        (
            "| " + " | ".join(headers) + " |",
            "| " + " | ".join("---" for _ in headers) + " |",
            "| " + " | ".join(values) + " |",
        )
    )


def render_csv(report: MetricsReport) -> str:
    flat = flatten_report(report)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([key for key, _ in REPORT_COLUMNS])
    writer.writerow([_format_value(flat[key]) for key, _ in REPORT_COLUMNS])
    return buffer.getvalue()
