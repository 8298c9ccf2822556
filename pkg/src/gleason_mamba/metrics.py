"""Confusion matrices, one-vs-rest precision/recall/F1/accuracy and
support-weighted summaries.

Zero denominators yield 0 and raise a flag instead of producing NaN.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

CLASSES = ("benign", "g3", "g4", "g5")


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                    # (K, K) int64; [true, predicted]
    classes: Tuple[str, ...] = CLASSES

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def support(self):
        return self.counts.sum(axis=1)

    def __add__(self, other):
        if tuple(self.classes) != tuple(other.classes):
            raise MetricsError("cannot add confusion matrices over different class lists")
        return ConfusionMatrix(self.counts + other.counts, self.classes)


@dataclass
class ClassMetrics:
    classes: Tuple[str, ...]
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: np.ndarray
    flags: List[str] = field(default_factory=list)


def build_confusion(preds, truths, classes=CLASSES):
    """Count ``(truth, prediction)`` pairs. Unknown tokens name their 1-based row."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise MetricsError(f"{len(preds)} predictions for {len(truths)} labels")
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for row, (p, t) in enumerate(zip(preds, truths), start=1):
        for kind, tok in (("prediction", p), ("label", t)):
            if tok not in index:
                raise MetricsError(f"row {row}: unknown {kind} {tok!r}; expected one of {list(classes)}")
        cm[index[t], index[p]] += 1
    return ConfusionMatrix(cm, tuple(classes))


def _safe_div(num, den, what, classes, flags):
    out = np.zeros(len(num))
    for i, (n, d) in enumerate(zip(num, den)):
        if d == 0:
            flags.append(f"{what}[{classes[i]}] undefined (zero denominator)")
        else:
            out[i] = n / d
    return out


def per_class_metrics(cm):
    c = np.asarray(cm.counts, dtype=np.int64)
    total = c.sum()
    if total == 0:
        raise MetricsError("no scored samples: confusion matrix is empty")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = total - tp - fp - fn
    flags = []
    precision = _safe_div(tp, tp + fp, "precision", cm.classes, flags)
    recall = _safe_div(tp, tp + fn, "recall", cm.classes, flags)
    f1 = _safe_div(2 * precision * recall, precision + recall, "f1", cm.classes, flags)
    accuracy = (tp + tn) / total
    return ClassMetrics(tuple(cm.classes), tp, fp, fn, tn, precision, recall, f1, accuracy, flags)


def support_weights(supports):
    s = np.asarray(supports, dtype=np.float64)
    if s.sum() <= 0:
        raise MetricsError("total support is zero")
    return s / s.sum()


def weighted_average(metrics, supports):
    """Support-weighted precision/recall/F1/one-vs-rest accuracy, plus
    ``overall_accuracy = trace / total`` and the macro averages."""
    w = support_weights(supports)
    out = {}
    for name in ("precision", "recall", "f1", "accuracy"):
        vals = getattr(metrics, name)
        out[f"weighted_{name}"] = float(np.dot(w, vals))
        out[f"macro_{name}"] = float(np.mean(vals))
    total = int(np.asarray(supports).sum())
    out["overall_accuracy"] = float(metrics.tp.sum() / total)
    return out


def normalize_rows(cm):
    """Row-normalized fractions (per true class) and the indices of empty rows."""
    c = np.asarray(cm.counts, dtype=np.float64)
    sums = c.sum(axis=1)
    empty = [i for i, s in enumerate(sums) if s == 0]
    out = np.zeros_like(c)
    nz = sums > 0
    out[nz] = c[nz] / sums[nz, None]
    return out, empty


def score(preds, truths, classes=CLASSES):
    """Everything the report needs, as a JSON-ready dict (4 decimals)."""
    cm = build_confusion(preds, truths, classes)
    m = per_class_metrics(cm)
    summary = weighted_average(m, cm.support)
    per_class = {}
    for i, c in enumerate(classes):
        per_class[c] = {
            "support": int(cm.support[i]),
            "tp": int(m.tp[i]), "fp": int(m.fp[i]), "fn": int(m.fn[i]), "tn": int(m.tn[i]),
            "precision": round(float(m.precision[i]), 4),
            "recall": round(float(m.recall[i]), 4),
            "f1": round(float(m.f1[i]), 4),
            "accuracy": round(float(m.accuracy[i]), 4),
        }
    _, empty = normalize_rows(cm)
    flags = list(m.flags) + [f"row[{classes[i]}] has zero support" for i in empty]
    return {
        "classes": list(classes),
        "n_samples": cm.total,
        "per_class": per_class,
        "weighted": {k: round(v, 4) for k, v in summary.items() if k.startswith("weighted_")},
        "macro": {k: round(v, 4) for k, v in summary.items() if k.startswith("macro_")},
        "overall_accuracy": round(summary["overall_accuracy"], 4),
        "flags": flags,
    }, cm


def write_report(out_dir, report, cm):
    """``metrics.json``, ``confusion.csv`` (counts), ``confusion_normalized.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    norm, _ = normalize_rows(cm)
    tables = (("confusion.csv", [[str(int(v)) for v in row] for row in cm.counts]),
              ("confusion_normalized.csv", [[f"{v:.4f}" for v in row] for row in norm]))
    for name, rows in tables:
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *cm.classes])
            for c, row in zip(cm.classes, rows):
                w.writerow([c, *row])
