"""Frame-level two-class scoring: confusion matrices, UAR, UAF1 and fold aggregation.

Zero-division conventions: precision with no predicted positives is 0, and
F1 with precision + recall = 0 is 0.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError


@dataclass(frozen=True, eq=False)
class ConfusionMatrix2:
    """counts[true][pred]."""
    counts: np.ndarray

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix2) and np.array_equal(self.counts, other.counts)

    __hash__ = None

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        if c.shape != (2, 2) or (c < 0).any():
            raise InputError(f"confusion matrix must be 2x2 non-negative, got {c}")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix2") -> "ConfusionMatrix2":
        return ConfusionMatrix2(self.counts + other.counts)

    def recall(self) -> np.ndarray:
        true_totals = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        return np.divide(diag, true_totals, out=np.zeros(2), where=true_totals > 0)

    def precision(self) -> np.ndarray:
        pred_totals = self.counts.sum(axis=0)
        diag = np.diag(self.counts).astype(np.float64)
        return np.divide(diag, pred_totals, out=np.zeros(2), where=pred_totals > 0)

    def f1(self) -> np.ndarray:
        p, r = self.precision(), self.recall()
        s = p + r
        return np.divide(2 * p * r, s, out=np.zeros(2), where=s > 0)


def confusion(truth, pred) -> ConfusionMatrix2:
    t = np.asarray(truth).ravel().astype(np.intp)
    p = np.asarray(pred).ravel().astype(np.intp)
    if t.size != p.size:
        raise InputError(f"truth ({t.size}) and prediction ({p.size}) lengths differ")
    if t.size == 0:
        raise InputError("cannot score empty sequences")
    if not (np.isin(t, (0, 1)).all() and np.isin(p, (0, 1)).all()):
        raise InputError("labels must be 0/1")
    return ConfusionMatrix2(np.bincount(2 * t + p, minlength=4).reshape(2, 2))


def uar(cm: ConfusionMatrix2) -> float:
    return float(cm.recall().mean())


def uaf1(cm: ConfusionMatrix2) -> float:
    return float(cm.f1().mean())


@dataclass(frozen=True)
class FoldReport:
    confusion: ConfusionMatrix2
    fold_id: int | str = 0
    attribute: str = ""
    model: str = ""
    precision: tuple[float, float] = field(init=False)
    recall: tuple[float, float] = field(init=False)
    f1: tuple[float, float] = field(init=False)
    uaf1: float = field(init=False)
    uar: float = field(init=False)

    def __post_init__(self):
        cm = self.confusion
        object.__setattr__(self, "precision", tuple(float(x) for x in cm.precision()))
        object.__setattr__(self, "recall", tuple(float(x) for x in cm.recall()))
        object.__setattr__(self, "f1", tuple(float(x) for x in cm.f1()))
        object.__setattr__(self, "uaf1", uaf1(cm))
        object.__setattr__(self, "uar", uar(cm))

    @classmethod
    def from_labels(cls, truth, pred, **kw) -> "FoldReport":
        return cls(confusion(truth, pred), **kw)

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "model": self.model,
            "attribute": self.attribute,
            "confusion": self.confusion.counts.tolist(),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "uaf1": self.uaf1,
            "uar": self.uar,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldReport":
        return cls(ConfusionMatrix2(d["confusion"]), d.get("fold_id", 0), d.get("attribute", ""), d.get("model", ""))


@dataclass(frozen=True)
class Summary:
    n_folds: int
    mean: dict
    pooled: dict
    pooled_confusion: ConfusionMatrix2

    def to_dict(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "mean_over_folds": self.mean,
            "pooled": self.pooled,
            "pooled_confusion": self.pooled_confusion.counts.tolist(),
        }


def aggregate(reports: Sequence[FoldReport]) -> Summary:
    """Mean of per-fold metrics alongside metrics of the pooled confusion matrix."""
    reports = list(reports)
    if not reports:
        raise InputError("no fold reports to aggregate")
    pooled_cm = reports[0].confusion
    for r in reports[1:]:
        pooled_cm = pooled_cm + r.confusion
    mean = {
        "uaf1": float(np.mean([r.uaf1 for r in reports])),
        "uar": float(np.mean([r.uar for r in reports])),
    }
    pooled = {"uaf1": uaf1(pooled_cm), "uar": uar(pooled_cm)}
    return Summary(len(reports), mean, pooled, pooled_cm)


def reports_to_csv(reports: Sequence[FoldReport]) -> str:
    """Plot-ready table: model, attribute, fold, uaf1, uar."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "attribute", "fold", "uaf1", "uar"])
    for r in reports:
        w.writerow([r.model, r.attribute, r.fold_id, f"{r.uaf1:.6f}", f"{r.uar:.6f}"])
    return buf.getvalue()


def reports_to_json(reports: Sequence[FoldReport], summary: Summary | None = None) -> str:
    doc = {"folds": [r.to_dict() for r in reports]}
    if summary is not None:
        doc["summary"] = summary.to_dict()
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
