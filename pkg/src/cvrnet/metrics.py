"""Confusion matrices, recall / precision / F1 / accuracy, and fold averaging.

Confusion matrices are oriented rows = predicted, columns = actual.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

REPORT_VERSION = 1
METRICS = ("recall", "precision", "f1", "accuracy")


class ZeroDivisionWarning(UserWarning):
    """A class was never predicted, so its precision is reported as 0."""


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.ndim != 2 or self.counts.shape != (k, k):
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")
        if not self.class_names:
            self.class_names = [str(i) for i in range(k)]
        if len(self.class_names) != k:
            raise ValueError(f"{len(self.class_names)} class names for a {k}x{k} matrix")

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_names != self.class_names:
            raise ValueError("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, list(self.class_names))


def confusion(predicted: Sequence[int], actual: Sequence[int], k: int,
              class_names: list[str] | None = None) -> ConfusionMatrix:
    p = np.asarray(predicted, dtype=np.int64)
    a = np.asarray(actual, dtype=np.int64)
    if p.shape != a.shape:
        raise ValueError(f"{p.size} predictions for {a.size} labels")
    for name, arr in (("predicted", p), ("actual", a)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (p, a), 1)
    return ConfusionMatrix(counts, class_names or [])


@dataclass
class ClassMetrics:
    name: str
    tp: int
    fn: int
    fp: int
    tn: int
    recall: float
    precision: float
    f1: float
    support: int


def _ratio(num: int, den: int, exact: bool):
    if den == 0:
        return Fraction(0) if exact else 0.0
    return Fraction(num, den) if exact else num / den


def per_class_metrics(cm: ConfusionMatrix, exact: bool = False) -> tuple[list[ClassMetrics], list[str]]:
    """One-vs-rest metrics per class, plus flags for degenerate denominators.

    With ``exact=True`` the ratios are :class:`fractions.Fraction` values.
    """
    c = cm.counts
    n = int(c.sum())
    out, flags = [], []
    for j in range(cm.k):
        tp = int(c[j, j])
        fn = int(c[:, j].sum()) - tp
        fp = int(c[j, :].sum()) - tp
        tn = n - tp - fn - fp
        name = cm.class_names[j]
        if tp + fp == 0:
            flags.append(f"precision of {name} undefined (never predicted); reported as 0")
        if tp + fn == 0:
            flags.append(f"recall of {name} undefined (no support); reported as 0")
        out.append(ClassMetrics(name, tp, fn, fp, tn, _ratio(tp, tp + fn, exact),
                                _ratio(tp, tp + fp, exact), _ratio(2 * tp, 2 * tp + fn + fp, exact), tp + fn))
    for msg in flags:
        warnings.warn(msg, ZeroDivisionWarning, stacklevel=2)
    return out, flags


def aggregate(per_class: list[ClassMetrics], mode: str = "weighted") -> dict:
    """Recall, precision, F1 averaged over classes, and accuracy (trace / N)."""
    n = sum(m.support for m in per_class)
    exact = isinstance(per_class[0].recall, Fraction)
    if n == 0:
        raise ValueError("no samples")
    if mode == "weighted":
        w = [Fraction(m.support, n) if exact else m.support / n for m in per_class]
    elif mode == "macro":
        w = [Fraction(1, len(per_class)) if exact else 1 / len(per_class)] * len(per_class)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    res = {key: sum(wi * getattr(m, key) for wi, m in zip(w, per_class)) for key in ("recall", "precision", "f1")}
    tp = sum(m.tp for m in per_class)
    res["accuracy"] = Fraction(tp, n) if exact else tp / n
    return res


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    per_class: list[ClassMetrics]
    weighted: dict
    macro: dict
    flags: list[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.weighted["accuracy"]

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "class_names": list(self.confusion.class_names),
            "confusion": self.confusion.counts.tolist(),
            "per_class": [
                {"name": m.name, "support": m.support, "tp": m.tp, "fn": m.fn, "fp": m.fp, "tn": m.tn,
                 "recall": float(m.recall), "precision": float(m.precision), "f1": float(m.f1)}
                for m in self.per_class
            ],
            "weighted": {k: float(self.weighted[k]) for k in METRICS},
            "macro": {k: float(self.macro[k]) for k in METRICS},
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        return evaluate_confusion(ConfusionMatrix(np.array(d["confusion"]), d["class_names"]))


def evaluate_confusion(cm: ConfusionMatrix) -> MetricsReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroDivisionWarning)
        per_class, flags = per_class_metrics(cm)
    return MetricsReport(cm, per_class, aggregate(per_class, "weighted"), aggregate(per_class, "macro"), flags)


def evaluate_predictions(predicted, actual, k: int, class_names=None) -> MetricsReport:
    return evaluate_confusion(confusion(predicted, actual, k, class_names))


@dataclass
class FoldSummary:
    mean: dict
    std: dict
    n: int

    def table_row(self, label: str = "Average") -> str:
        """``label  recall  precision  f1  accuracy`` as ``mean +- std`` with three decimals."""
        cells = [f"{self.mean[k]:.3f} ± {self.std[k]:.3f}" for k in METRICS]
        return "  ".join([label] + cells)


def fold_average(reports: Sequence[MetricsReport | dict], mode: str = "weighted") -> FoldSummary:
    """Mean and population standard deviation of each aggregated metric across folds."""
    if not reports:
        raise ValueError("need at least one report")
    rows = []
    ks = set()
    for r in reports:
        if isinstance(r, MetricsReport):
            ks.add(r.confusion.k)
            agg = r.weighted if mode == "weighted" else r.macro
        else:
            agg = r
        rows.append([float(agg[m]) for m in METRICS])
    if len(ks) > 1:
        raise ValueError(f"reports disagree on the class count: {sorted(ks)}")
    arr = np.array(rows)
    return FoldSummary(dict(zip(METRICS, arr.mean(axis=0))), dict(zip(METRICS, arr.std(axis=0))), len(rows))


# ---------------------------------------------------------------------------
# Serialization


def confusion_to_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["predicted\\actual"] + list(cm.class_names))
    for name, row in zip(cm.class_names, cm.counts):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def confusion_from_csv(text: str) -> ConfusionMatrix:
    """Parse a (K+1) x (K+1) grid: header row of class names, then one row per predicted class."""
    rows = [r for r in csv.reader(io.StringIO(text)) if any(cell.strip() for cell in r)]
    if len(rows) < 3:
        raise ValueError("confusion CSV needs a header row and at least two class rows")
    header = [c.strip() for c in rows[0][1:]]
    k = len(header)
    if len(rows) - 1 != k or any(len(r) != k + 1 for r in rows[1:]):
        raise ValueError(f"confusion CSV is not a square {k + 1}x{k + 1} grid")
    names = [r[0].strip() for r in rows[1:]]
    if names != header:
        raise ValueError(f"row labels {names} differ from column labels {header}")
    try:
        counts = np.array([[int(c) for c in r[1:]] for r in rows[1:]], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"non-integer count in confusion CSV: {exc}") from None
    return ConfusionMatrix(counts, header)


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2) + "\n"


def report_to_text(report: MetricsReport) -> str:
    """Confusion matrix with per-actual-column percentages, then per-class and aggregate metrics."""
    cm = report.confusion
    col_tot = cm.counts.sum(axis=0)
    cells = [[f"{v} / {100.0 * v / col_tot[j] if col_tot[j] else 0.0:.2f}%" for j, v in enumerate(row)]
             for row in cm.counts]
    width = max([len(c) for r in cells for c in r] + [len(n) for n in cm.class_names] + [9])
    lines = ["Confusion matrix (rows: predicted, columns: actual)",
             " " * 10 + "".join(f"{n:>{width + 2}}" for n in cm.class_names)]
    for name, r in zip(cm.class_names, cells):
        lines.append(f"{name:<10}" + "".join(f"{c:>{width + 2}}" for c in r))
    lines += ["", f"{'class':<10}{'support':>9}{'recall':>11}{'precision':>11}{'f1':>11}"]
    for m in report.per_class:
        lines.append(f"{m.name:<10}{m.support:>9}{float(m.recall):>11.4f}{float(m.precision):>11.4f}{float(m.f1):>11.4f}")
    lines.append("")
    for mode, agg in (("weighted", report.weighted), ("macro", report.macro)):
        lines.append(f"{mode:<10}" + "".join(f"{k} {float(agg[k]):.4f}  " for k in METRICS).rstrip())
    for f in report.flags:
        lines.append(f"warning: {f}")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt: str = "json", path=None) -> str:
    """Serialize a report as json, csv (the confusion grid) or text; optionally write it."""
    if fmt == "json":
        text = report_to_json(report)
    elif fmt == "csv":
        text = confusion_to_csv(report.confusion)
    elif fmt == "text":
        text = report_to_text(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def canonical_json(text: str) -> str:
    """Parse and re-emit report JSON; identical to the input for reports we wrote."""
    return json.dumps(json.loads(text), indent=2) + "\n"


def isclose_metrics(a: dict, b: dict, tol: float) -> bool:
    return all(math.isclose(float(a[k]), float(b[k]), abs_tol=tol) for k in METRICS)
