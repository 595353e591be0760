"""Per-class / per-label precision, recall, F1, accuracy and macro averages."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Sequence

import numpy as np

from .data import DISEASE_CLASSES, SYMPTOMS

DISEASE_NAMES = tuple(d.name.capitalize() if d.name == "NORMAL" else d.name for d in DISEASE_CLASSES)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    undefined: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "support": self.support, "undefined": list(self.undefined)}


def prf(c: ConfusionCounts) -> LabelMetrics:
    """Precision/recall/F1 with 0 (flagged) for zero denominators."""
    undefined = []
    if c.tp + c.fp:
        p = c.tp / (c.tp + c.fp)
    else:
        p = 0.0
        undefined.append("precision")
    if c.tp + c.fn:
        r = c.tp / (c.tp + c.fn)
    else:
        r = 0.0
        undefined.append("recall")
    if p + r > 0:
        f1 = 2 * p * r / (p + r)
    else:
        f1 = 0.0
        undefined.append("f1")
    return LabelMetrics(p, r, f1, c.tp + c.fn, tuple(undefined))


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean across classes/labels."""
    if len(values) == 0:
        raise ValueError("macro average of nothing")
    return float(sum(values) / len(values))


@dataclass
class MetricsReport:
    names: tuple[str, ...]
    per_class: dict[str, LabelMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float | None = None
    threshold: float | None = None
    counts: dict[str, ConfusionCounts] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "per_class": {n: self.per_class[n].to_json() for n in self.names},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out


def _report(names, counts: dict[str, ConfusionCounts], **kw) -> MetricsReport:
    per = {n: prf(counts[n]) for n in names}
    return MetricsReport(
        tuple(names), per,
        macro_average([per[n].precision for n in names]),
        macro_average([per[n].recall for n in names]),
        macro_average([per[n].f1 for n in names]),
        counts=counts, **kw,
    )


def disease_metrics(preds: Sequence[int], truths: Sequence[int], names: Sequence[str] = DISEASE_NAMES) -> MetricsReport:
    preds = np.asarray(preds, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if preds.shape != truths.shape:
        raise ValueError("preds and truths differ in length")
    if preds.size == 0:
        raise ValueError("empty input")
    k = len(names)
    if preds.min() < 0 or preds.max() >= k or truths.min() < 0 or truths.max() >= k:
        raise ValueError(f"labels must be in [0, {k})")
    n = preds.size
    counts = {}
    for c, name in enumerate(names):
        tp = int(np.sum((preds == c) & (truths == c)))
        fp = int(np.sum((preds == c) & (truths != c)))
        fn = int(np.sum((preds != c) & (truths == c)))
        counts[name] = ConfusionCounts(tp, fp, fn, n - tp - fp - fn)
    return _report(names, counts, accuracy=float(np.mean(preds == truths)))


def symptom_metrics(probabilities, truths, threshold: float = 0.5,
                    names: Sequence[str] = SYMPTOMS) -> MetricsReport:
    if not 0 <= threshold <= 1:
        raise ValueError("threshold must be in [0, 1]")
    probs = np.asarray(probabilities, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    if probs.shape != truths.shape or probs.ndim != 2 or probs.shape[1] != len(names):
        raise ValueError(f"expected matching (n, {len(names)}) arrays")
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = probs >= threshold
    counts = {}
    for j, name in enumerate(names):
        p, t = pred[:, j], truths[:, j]
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        counts[name] = ConfusionCounts(tp, fp, fn, len(t) - tp - fp - fn)
    return _report(names, counts, threshold=threshold)


def pct(x: float) -> str:
    """Percentage to two decimals, round-half-even."""
    return str(Decimal(repr(x * 100)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def format_disease_table(rep: MetricsReport, model_name: str = "Our model") -> str:
    lines = [f"{'Model':<12} {'Class':<8} {'Precision':>10} {'Recall':>10} {'F1':>10} {'Accuracy':>10}"]
    for i, name in enumerate(rep.names):
        m = rep.per_class[name]
        acc = f"{pct(rep.accuracy)}%" if i == 0 and rep.accuracy is not None else ""
        lines.append(f"{model_name if i == 0 else '':<12} {name:<8} {pct(m.precision) + '%':>10} "
                     f"{pct(m.recall) + '%':>10} {pct(m.f1) + '%':>10} {acc:>10}")
    lines.append(f"{'':<12} {'Macro':<8} {pct(rep.macro_precision) + '%':>10} "
                 f"{pct(rep.macro_recall) + '%':>10} {pct(rep.macro_f1) + '%':>10}")
    return "\n".join(lines)


def format_symptom_table(rep: MetricsReport, model_name: str = "Our model") -> str:
    lines = [f"{'Model':<12} {'Symptom':<14} {'Precision':>10} {'Recall':>10} {'F1':>10}"]
    for i, name in enumerate(rep.names):
        m = rep.per_class[name]
        lines.append(f"{model_name if i == 0 else '':<12} {name.capitalize():<14} {pct(m.precision) + '%':>10} "
                     f"{pct(m.recall) + '%':>10} {pct(m.f1) + '%':>10}")
    lines.append(f"{'':<12} {'Macro':<14} {pct(rep.macro_precision) + '%':>10} "
                 f"{pct(rep.macro_recall) + '%':>10} {pct(rep.macro_f1) + '%':>10}")
    return "\n".join(lines)


def report_from_json(obj: dict) -> MetricsReport:
    names = tuple(obj["per_class"])
    for canonical in (DISEASE_NAMES, SYMPTOMS):  # JSON files may be key-sorted
        if set(names) == set(canonical):
            names = tuple(canonical)
    per = {n: LabelMetrics(obj["per_class"][n]["precision"], obj["per_class"][n]["recall"],
                           obj["per_class"][n]["f1"], obj["per_class"][n].get("support", 0),
                           tuple(obj["per_class"][n].get("undefined", ()))) for n in names}
    return MetricsReport(names, per, obj["macro_precision"], obj["macro_recall"], obj["macro_f1"],
                         obj.get("accuracy"), obj.get("threshold"))
