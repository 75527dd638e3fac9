"""Classification metrics, ROC/AUC and repeated-run aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Optional, Sequence

import numpy as np
from scipy import stats

from .data_catalog import Label, SliceRecord, Source
from .errors import DataError

METRICS = ("accuracy", "precision", "recall", "f1", "auc")
METRIC_TITLES = {"accuracy": "Accuracy", "precision": "Precision", "recall": "Recall",
                 "f1": "F1-score", "auc": "AUC"}
UNDEFINED = "n/a"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricSet:
    """Metrics in [0, 1]; ``None`` marks a zero-denominator (undefined) value."""

    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    auc: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
                w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])


@dataclass(frozen=True)
class AggregateResult:
    mean: float
    half_width: float
    n_runs: int
    values: tuple[float, ...] = field(default=())
    confidence: float = 0.95

    def render(self, percent: bool = True, digits: int = 2) -> str:
        scale = 100.0 if percent else 1.0
        return f"{self.mean * scale:.{digits}f} ± {self.half_width * scale:.{digits}f}"


def confusion(preds: Sequence[Hashable], truths: Sequence[Hashable], positive: Hashable = Label.COVID,
              labels: Sequence[Hashable] = (Label.COVID, Label.NORMAL)) -> ConfusionMatrix:
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(truths)} truths")
    if len(preds) == 0:
        raise ValueError("confusion needs at least one prediction")
    known = set(labels)
    if positive not in known:
        raise ValueError(f"positive label {positive!r} not among {labels!r}")
    tp = tn = fp = fn = 0
    for p, t in zip(preds, truths):
        if p not in known or t not in known:
            raise ValueError(f"unknown label in pair ({p!r}, {t!r})")
        if p == positive:
            if t == positive:
                tp += 1
            else:
                fp += 1
        elif t == positive:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, tn, fp, fn)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricSet:
    """Accuracy, precision, recall and F1; AUC is left unset."""
    if cm.total < 1:
        raise ValueError("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = _ratio(cm.tp, cm.fp + cm.tp)
    recall = _ratio(cm.tp, cm.fn + cm.tp)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricSet(accuracy, precision, recall, f1)


def roc_curve(scores: Sequence[float], truths: Sequence[Hashable], positive: Hashable = Label.COVID) -> RocCurve:
    """ROC points for thresholds at each distinct score, highest first.

    A score counts as positive when ``score >= threshold``; the first point is
    the +inf sentinel at (0, 0). Tied scores move the curve in one step.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(truths):
        raise ValueError(f"length mismatch: {len(scores)} scores, {len(truths)} truths")
    is_pos = np.array([t == positive for t in truths], dtype=bool)
    n_pos = int(is_pos.sum())
    n_neg = len(is_pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative case")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], is_pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[ends]]
    return RocCurve(fpr, tpr, thresholds)


def auc(curve: RocCurve) -> float:
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def aggregate_runs(values: Sequence[float], confidence: float = 0.95) -> AggregateResult:
    """Mean with a two-sided Student-t interval half-width."""
    vals = tuple(float(v) for v in values)
    n = len(vals)
    if n == 0:
        raise ValueError("aggregate_runs needs at least one value")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if len(set(vals)) == 1:
        return AggregateResult(vals[0], 0.0, n, vals, confidence)
    mean = math.fsum(vals) / n
    sd = float(np.std(vals, ddof=1))
    half = float(stats.t.ppf((1 + confidence) / 2, n - 1)) * sd / math.sqrt(n)
    # keep the mean inside [min, max] despite rounding
    mean = min(max(mean, min(vals)), max(vals))
    return AggregateResult(mean, half, n, vals, confidence)


@dataclass
class Evaluation:
    metrics: MetricSet
    roc: RocCurve
    confusion: ConfusionMatrix
    scores: np.ndarray
    truths: list


def evaluate_scores(scores: Sequence[float], truths: Sequence[Hashable], positive: Hashable = Label.COVID,
                    negative: Hashable = Label.NORMAL, threshold: float = 0.5) -> Evaluation:
    """Label metrics at ``threshold`` and ROC/AUC from the raw positive-class scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        raise DataError("cannot evaluate an empty test set")
    preds = [positive if s >= threshold else negative for s in scores]
    cm = confusion(preds, list(truths), positive, labels=(positive, negative))
    base = metrics_from_confusion(cm)
    try:
        curve = roc_curve(scores, truths, positive)
        area = auc(curve)
    except ValueError:
        curve = RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([np.inf, -np.inf]))
        area = None
    metrics = MetricSet(base.accuracy, base.precision, base.recall, base.f1, area)
    return Evaluation(metrics, curve, cm, scores, list(truths))


def evaluate_model(predict: Callable[[Sequence[SliceRecord]], np.ndarray], test_records: Sequence[SliceRecord],
                   positive: Label = Label.COVID) -> Evaluation:
    """Score ``test_records`` with ``predict`` (records -> positive-class probabilities)."""
    test_records = list(test_records)
    if not test_records:
        raise DataError("cannot evaluate an empty test set")
    for rec in test_records:
        if rec.source is not Source.ORIGINAL:
            raise DataError(f"generated record {rec.slice_path!r} in the test set")
    positive = Label(positive)
    scores = np.asarray(predict(test_records), dtype=np.float64).reshape(-1)
    if len(scores) != len(test_records):
        raise DataError(f"predictor returned {len(scores)} scores for {len(test_records)} records")
    return evaluate_scores(scores, [r.label for r in test_records], positive, positive.other)


def aggregate_metric_sets(runs: Sequence[MetricSet], confidence: float = 0.95) -> dict[str, AggregateResult | None]:
    """Per-metric aggregate over runs; undefined values are dropped, all-undefined gives None."""
    out = {}
    for name in METRICS:
        vals = [getattr(m, name) for m in runs if getattr(m, name) is not None]
        out[name] = aggregate_runs(vals, confidence) if vals else None
    return out


def format_cell(agg: AggregateResult | None) -> str:
    return UNDEFINED if agg is None else agg.render()


def eval_report(backbone: str, cyclegan: bool, runs: Sequence[MetricSet], last: Evaluation,
                confidence: float = 0.95, **extra) -> dict:
    agg = aggregate_metric_sets(runs, confidence)
    report = {
        "backbone": backbone,
        "cyclegan": bool(cyclegan),
        "runs": [m.as_dict() for m in runs],
        "aggregate": {k: (None if v is None else {"mean": v.mean, "half_width": v.half_width})
                      for k, v in agg.items()},
        "confusion": asdict(last.confusion),
        "roc": [[float(f), float(t)] for f, t in zip(last.roc.fpr, last.roc.tpr)],
    }
    report.update(extra)
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def comparison_table(reports: Sequence[dict]) -> str:
    """Markdown table per augmentation condition, one row per backbone."""
    lines = []
    for cyclegan in (False, True):
        rows = [r for r in reports if bool(r["cyclegan"]) is cyclegan]
        if not rows:
            continue
        lines.append(f"### Results {'with' if cyclegan else 'without'} CycleGAN\n")
        lines.append("| Network | " + " | ".join(f"{METRIC_TITLES[m]} (%)" for m in METRICS) + " |")
        lines.append("|---" * (len(METRICS) + 1) + "|")
        for r in rows:
            cells = []
            for m in METRICS:
                a = r["aggregate"].get(m)
                cells.append(UNDEFINED if a is None else
                             AggregateResult(a["mean"], a["half_width"], len(r["runs"])).render())
            lines.append(f"| {r['backbone']} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)
