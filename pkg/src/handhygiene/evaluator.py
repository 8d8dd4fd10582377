"""Confusion matrices and precision/recall/F-beta classification reports."""
from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EvaluationError
from .labels import GestureLabel


class UndefinedMetricWarning(UserWarning):
    """A metric had a zero denominator and was set to 0."""


@dataclass
class ConfusionMatrix:
    classes: list[GestureLabel]
    counts: np.ndarray  # rows: true class, columns: predicted class

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.classes)
        if self.counts.shape != (c, c):
            raise EvaluationError(f"counts shape {self.counts.shape} does not match {c} classes")
        if (self.counts < 0).any():
            raise EvaluationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\predicted"] + [c.value for c in self.classes])
            for label, row in zip(self.classes, self.counts):
                writer.writerow([label.value] + [int(v) for v in row])
        return path


@dataclass(frozen=True)
class ClassMetrics:
    label: GestureLabel
    precision: float
    recall: float
    f_beta: float
    support: int
    undefined: tuple[str, ...] = ()  # names of metrics that hit 0/0


@dataclass(frozen=True)
class Averages:
    precision: float
    recall: float
    f_beta: float


@dataclass
class ClassificationReport:
    per_class: list[ClassMetrics]
    micro: Averages | None
    macro: Averages
    weighted: Averages
    total_support: int
    beta: float = 1.0
    accuracy: float | None = None

    def to_json(self) -> dict:
        def avg(a):
            return None if a is None else {"precision": a.precision, "recall": a.recall, "f_beta": a.f_beta}

        return {
            "beta": self.beta,
            "per_class": [
                {
                    "label": m.label.value,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f_beta": m.f_beta,
                    "support": m.support,
                    "undefined": list(m.undefined),
                }
                for m in self.per_class
            ],
            "micro": avg(self.micro),
            "macro": avg(self.macro),
            "weighted": avg(self.weighted),
            "total_support": self.total_support,
            "accuracy": self.accuracy,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ClassificationReport":
        def avg(a):
            return None if a is None else Averages(a["precision"], a["recall"], a["f_beta"])

        per_class = [
            ClassMetrics(
                GestureLabel.parse(m["label"]), m["precision"], m["recall"], m["f_beta"],
                int(m["support"]), tuple(m.get("undefined", ())),
            )
            for m in data["per_class"]
        ]
        return cls(
            per_class=per_class,
            micro=avg(data.get("micro")),
            macro=avg(data["macro"]),
            weighted=avg(data["weighted"]),
            total_support=int(data["total_support"]),
            beta=float(data.get("beta", 1.0)),
            accuracy=data.get("accuracy"),
        )


def confusion(
    predictions: Sequence[GestureLabel], truths: Sequence[GestureLabel], class_order: Sequence[GestureLabel]
) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise EvaluationError(f"{len(predictions)} predictions for {len(truths)} ground-truth labels")
    index = {label: i for i, label in enumerate(class_order)}
    try:
        p = np.fromiter((index[x] for x in predictions), dtype=np.int64, count=len(predictions))
        t = np.fromiter((index[x] for x in truths), dtype=np.int64, count=len(truths))
    except KeyError as exc:
        raise EvaluationError(f"label {exc.args[0]!r} is not in the class order") from None
    c = len(class_order)
    counts = np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(list(class_order), counts)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def f_beta_score(precision: float, recall: float, beta: float = 1.0) -> tuple[float, bool]:
    b2 = beta * beta
    return _ratio((1 + b2) * precision * recall, b2 * precision + recall)


def _warn(undefined: dict[str, list[str]]) -> None:
    for metric, labels in undefined.items():
        if labels:
            warnings.warn(
                f"{metric} is ill-defined (0/0) and set to 0.0 for: {', '.join(labels)}",
                UndefinedMetricWarning,
                stacklevel=3,
            )


def per_class_metrics(m: ConfusionMatrix, beta: float = 1.0) -> list[ClassMetrics]:
    counts = m.counts
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)
    out = []
    undefined: dict[str, list[str]] = {"precision": [], "recall": [], "f-score": []}
    for i, label in enumerate(m.classes):
        p, p_bad = _ratio(float(tp[i]), float(predicted[i]))
        r, r_bad = _ratio(float(tp[i]), float(actual[i]))
        f, f_bad = f_beta_score(p, r, beta)
        flags = tuple(name for name, bad in (("precision", p_bad), ("recall", r_bad), ("f-score", f_bad)) if bad)
        for name in flags:
            undefined[name].append(label.value)
        out.append(ClassMetrics(label, p, r, f, int(actual[i]), flags))
    _warn(undefined)
    return out


def micro_average(m: ConfusionMatrix, beta: float = 1.0) -> Averages:
    counts = m.counts
    tp = float(np.trace(counts))
    fp = float(counts.sum() - tp)  # every off-diagonal entry is one FP and one FN
    fn = fp
    p, _ = _ratio(tp, tp + fp)
    r, _ = _ratio(tp, tp + fn)
    f, _ = f_beta_score(p, r, beta)
    return Averages(p, r, f)


def aggregate(
    per_class: Sequence[ClassMetrics], m: ConfusionMatrix | None = None, beta: float = 1.0
) -> tuple[Averages | None, Averages, Averages]:
    """Micro (needs the matrix), macro and support-weighted averages.

    Averages are taken over unrounded per-class values.
    """
    if not per_class:
        raise EvaluationError("no per-class metrics to aggregate")
    if m is not None and m.total == 0:
        raise EvaluationError("empty confusion matrix")
    p = np.array([c.precision for c in per_class])
    r = np.array([c.recall for c in per_class])
    f = np.array([c.f_beta for c in per_class])
    s = np.array([c.support for c in per_class], dtype=np.float64)
    macro = Averages(float(p.mean()), float(r.mean()), float(f.mean()))
    if s.sum() == 0:
        raise EvaluationError("total support is zero")
    w = s / s.sum()
    weighted = Averages(float(p @ w), float(r @ w), float(f @ w))
    micro = micro_average(m, beta) if m is not None else None
    return micro, macro, weighted


def accuracy(m: ConfusionMatrix) -> float:
    if m.total == 0:
        raise EvaluationError("accuracy of an empty confusion matrix")
    return float(np.trace(m.counts)) / m.total


def classification_report(m: ConfusionMatrix, beta: float = 1.0) -> ClassificationReport:
    per_class = per_class_metrics(m, beta)
    micro, macro, weighted = aggregate(per_class, m, beta)
    return ClassificationReport(
        per_class, micro, macro, weighted, sum(c.support for c in per_class), beta, accuracy(m)
    )


def report_from_rows(rows: Sequence[tuple], beta: float = 1.0) -> ClassificationReport:
    """Build a report from published (label, precision, recall, f, support) rows.

    No confusion matrix is available, so the micro row is left empty.
    """
    per_class = [
        ClassMetrics(GestureLabel.parse(label) if not isinstance(label, GestureLabel) else label,
                     float(p), float(r), float(f), int(s))
        for label, p, r, f, s in rows
    ]
    _, macro, weighted = aggregate(per_class, None, beta)
    return ClassificationReport(per_class, None, macro, weighted, sum(c.support for c in per_class), beta)


def render_report(report: ClassificationReport, format: str = "text", title: str | None = None) -> str:
    if format == "json":
        return json.dumps(report.to_json(), indent=2)
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    if not report.per_class:
        raise EvaluationError("empty report")
    fname = "F1-score" if report.beta == 1 else f"F{report.beta:g}-score"
    names = [m.label.value for m in report.per_class] + ["Micro average", "Macro average", "Weighted average"]
    width = max(len(n) for n in names + ["Class Label"])
    header = f"{'Class Label':<{width}}  {'Precision':>9}  {'Recall':>9}  {fname:>9}  {'Support':>9}"
    lines = [title] if title else []
    lines.append(header)

    def row(name, p, r, f, s):
        return f"{name:<{width}}  {p:>9.2f}  {r:>9.2f}  {f:>9.2f}  {s:>9d}"

    for m in report.per_class:
        lines.append(row(m.label.value, m.precision, m.recall, m.f_beta, m.support))
    for name, avg in (
        ("Micro average", report.micro),
        ("Macro average", report.macro),
        ("Weighted average", report.weighted),
    ):
        if avg is not None:
            lines.append(row(name, avg.precision, avg.recall, avg.f_beta, report.total_support))
    return "\n".join(lines) + "\n"


def write_report(report: ClassificationReport, out_dir: str | os.PathLike, title: str | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / "report.json"
    txt = out_dir / "report.txt"
    js.write_text(render_report(report, "json") + "\n")
    txt.write_text(render_report(report, "text", title))
    return js, txt
