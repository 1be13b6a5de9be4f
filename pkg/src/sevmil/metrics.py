"""Asymmetric mistake-severity metrics.

Confusion counts are stored ``counts[true, pred]``; confusion weights are
stored ``W[pred, true]``.  Each sample with truth ``t`` and prediction ``p``
is scored against ``W[p, t]``.  Passing ``literal_indexing=True`` pairs
``counts[i, j]`` with ``W[i, j]`` instead, for auditing the alternative
reading.

AsCC, AsMC and the expected risk accept a single ``(C, C)`` count matrix or a
stack ``(..., C, C)``.  When every weight is an integer the sums are formed in
exact integer arithmetic and divided once, so results are correctly rounded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.stats import rankdata

from .hierarchy import Hierarchy


@dataclass(frozen=True)
class ConfusionWeightMatrix:
    level: int
    entries: np.ndarray          # [pred, true]
    penalty: float
    severe: np.ndarray           # [pred, true]


@dataclass
class ConfusionMatrix:
    level: int
    counts: np.ndarray           # [true, pred]

    @classmethod
    def empty(cls, n_classes: int, level: int = 0) -> "ConfusionMatrix":
        return cls(level, np.zeros((n_classes, n_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, n_classes: int, true, pred, level: int = 0) -> "ConfusionMatrix":
        cm = cls.empty(n_classes, level)
        np.add.at(cm.counts, (np.asarray(true, dtype=np.intp), np.asarray(pred, dtype=np.intp)), 1)
        return cm

    def accumulate(self, true_class: int, predicted_class: int) -> "ConfusionMatrix":
        n = self.counts.shape[0]
        if not (0 <= true_class < n and 0 <= predicted_class < n):
            raise IndexError(f"class index out of range for {n} classes")
        self.counts[true_class, predicted_class] += 1
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError("confusion matrices differ in shape")
        return ConfusionMatrix(self.level, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return int(np.trace(self.counts)) / self.total


def build_confusion_weights(hierarchy: Hierarchy, level: int, P: float = 2.0) -> ConfusionWeightMatrix:
    """``W[i, j] = 1 + |i - j| + P * severe(pred=i, true=j)``."""
    if P < 0:
        raise ValueError("P must be non-negative")
    n = hierarchy.n_classes(level)
    idx = np.arange(n)
    severe = hierarchy.severe_mask(level)
    W = 1.0 + np.abs(idx[:, None] - idx[None, :]) + P * severe
    W.setflags(write=False)
    return ConfusionWeightMatrix(level, W, float(P), severe)


def _counts(cm) -> np.ndarray:
    S = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ValueError("confusion counts must be square")
    if np.any(S < 0):
        raise ValueError("negative confusion counts")
    return S


def _paired(W: np.ndarray, literal: bool) -> np.ndarray:
    # weight aligned with counts[true, pred]
    return W if literal else W.T


def _integral(W: np.ndarray) -> bool:
    return bool(np.all(W == np.round(W))) and bool(np.all(np.abs(W) < 2**20))


def _ratio(num, den):
    """Elementwise num / den, exact for integer inputs."""
    num = np.asarray(num)
    den = np.asarray(den)
    if num.dtype.kind in "iu" and den.dtype.kind in "iu":
        if num.ndim == 0:
            return int(num) / int(den)
        if max(np.abs(num).max(initial=0), np.abs(den).max(initial=0)) < 2**53:
            # both operands convert exactly, so the float division is correctly rounded
            return num.astype(np.float64) / den.astype(np.float64)
        return np.array([int(a) / int(b) for a, b in zip(num.ravel(), den.ravel())]).reshape(num.shape)
    return num / den


def _scale_for(values) -> int:
    return reduce(math.lcm, (int(v) for v in np.unique(values) if v != 0), 1)


def ascc(cm, w: ConfusionWeightMatrix, literal_indexing: bool = False):
    """Mean of ``1 / W`` over all samples; 1.0 when every prediction is correct."""
    S = _counts(cm)
    Wp = _paired(w.entries, literal_indexing)
    total = S.sum(axis=(-1, -2))
    if np.any(total == 0):
        raise ValueError("AsCC of an empty confusion matrix")
    if _integral(Wp) and S.dtype.kind in "iu":
        L = _scale_for(Wp)
        K = (L // Wp.astype(np.int64))
        num = np.sum(S.astype(np.int64) * K, axis=(-1, -2))
        return _ratio(num, total.astype(np.int64) * L)
    return np.sum(S / Wp, axis=(-1, -2)) / total


def asmc(cm, w: ConfusionWeightMatrix, literal_indexing: bool = False):
    """Mean of ``1 / (W - 1)`` over misclassified samples; ``inf`` when there are none."""
    S = _counts(cm)
    Wp = _paired(w.entries, literal_indexing)
    n = S.shape[-1]
    off = ~np.eye(n, dtype=bool)
    Se = np.where(off, S, 0)
    errs = Se.sum(axis=(-1, -2))
    D = np.where(off, Wp - 1.0, 1.0)
    if _integral(D) and S.dtype.kind in "iu":
        L = _scale_for(D)
        K = np.where(off, L // D.astype(np.int64), 0)
        num = np.sum(Se.astype(np.int64) * K, axis=(-1, -2))
        den = errs.astype(np.int64) * L
        if np.ndim(num) == 0:
            return math.inf if errs == 0 else int(num) / int(den)
        out = _ratio(num, np.where(errs == 0, 1, den))
        return np.where(errs == 0, np.inf, out)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sum(Se / D, axis=(-1, -2)) / errs
    return np.where(errs == 0, np.inf, out) if np.ndim(out) else (math.inf if errs == 0 else float(out))


def expected_risk(cm, w: ConfusionWeightMatrix, severe_factor: float = 0.5,
                  literal_indexing: bool = False):
    """``sum(f * S * W) / (#misclassified)`` with ``f = severe_factor`` on severe cells, 1 elsewhere.

    The sum runs over every cell, including the diagonal.  ``severe_factor``
    0.5 follows the printed formula; 2.0 gives the "double weight" reading.
    """
    S = _counts(cm)
    Wp = _paired(w.entries, literal_indexing)
    severe = _paired(w.severe, literal_indexing)
    n = S.shape[-1]
    errs = np.sum(np.where(~np.eye(n, dtype=bool), S, 0), axis=(-1, -2))
    if np.any(errs == 0):
        raise ValueError("expected risk needs at least one misclassification")
    F = np.where(severe, severe_factor, 1.0)
    FW = F * Wp
    if S.dtype.kind in "iu":
        for scale in (1, 2, 4, 8):
            if _integral(FW * scale):
                K = np.round(FW * scale).astype(np.int64)
                num = np.sum(S.astype(np.int64) * K, axis=(-1, -2))
                return _ratio(num, errs.astype(np.int64) * scale)
    return np.sum(S * FW, axis=(-1, -2)) / errs


def severe_error_count(cm, w: ConfusionWeightMatrix):
    S = _counts(cm)
    return np.sum(np.where(w.severe.T, S, 0), axis=(-1, -2))


def expected_error_class(probs, true_labels, predicted_labels, class_c: int) -> float:
    """Mean expected class (on a 1..C scale) of the samples of class ``class_c`` that were misclassified.

    Labels are 0-based; the expectation weights class ``c`` by ``c + 1``.
    Returns NaN when no such sample exists.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.asarray(true_labels)
    yhat = np.asarray(predicted_labels)
    sel = (y == class_c) & (yhat != class_c)
    if not np.any(sel):
        return math.nan
    ranks = np.arange(1, probs.shape[1] + 1)
    return float(np.mean(probs[sel] @ ranks))


def macro_auc(probs, true_labels) -> float:
    """One-vs-rest macro AUC from rank statistics; classes with no positives or no negatives are skipped."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    y = np.asarray(true_labels)
    aucs = []
    for c in range(probs.shape[1]):
        pos = y == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            continue
        r = rankdata(probs[:, c])
        aucs.append((r[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    return float(np.mean(aucs)) if aucs else math.nan


@dataclass
class MetricReport:
    level: int
    accuracy: float
    ascc: float
    asmc: float
    expected_risk: float | None
    severe_error_count: int
    total: int
    auc: float | None = None
    expected_error_class: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "total": self.total,
            "accuracy": self.accuracy,
            "auc": _json_num(self.auc),
            "ascc": self.ascc,
            "asmc": "inf" if math.isinf(self.asmc) else self.asmc,
            "expected_risk": _json_num(self.expected_risk),
            "severe_error_count": self.severe_error_count,
            "expected_error_class": [_json_num(v) for v in self.expected_error_class],
        }


def _json_num(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    return float(v)


def report(cm: ConfusionMatrix, w: ConfusionWeightMatrix, probs=None, true_labels=None,
           predicted_labels=None, severe_factor: float = 0.5, literal_indexing: bool = False) -> MetricReport:
    """Score one level.  Probabilities, when given, add AUC and the expected error class."""
    risk = None
    if cm.errors > 0:
        risk = float(expected_risk(cm, w, severe_factor, literal_indexing))
    auc, eec = None, []
    if probs is not None:
        auc = macro_auc(probs, true_labels)
        eec = [expected_error_class(probs, true_labels, predicted_labels, c)
               for c in range(cm.counts.shape[0])]
    return MetricReport(
        level=cm.level,
        accuracy=cm.accuracy,
        ascc=float(ascc(cm, w, literal_indexing)),
        asmc=float(asmc(cm, w, literal_indexing)),
        expected_risk=risk,
        severe_error_count=int(severe_error_count(cm, w)),
        total=cm.total,
        auc=auc,
        expected_error_class=eec,
    )


def read_confusion_csv(path, n_classes: int, level: int = 0) -> ConfusionMatrix:
    """Parse the ``true,pred,count`` format (one row per non-zero cell)."""
    import csv
    cm = ConfusionMatrix.empty(n_classes, level)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["true", "pred", "count"]:
            raise ValueError('confusion CSV header must be "true,pred,count"')
        for row in reader:
            t, p, c = int(row["true"]), int(row["pred"]), int(row["count"])
            if c < 0:
                raise ValueError("negative count in confusion CSV")
            if not (0 <= t < n_classes and 0 <= p < n_classes):
                raise IndexError(f"class index out of range in confusion CSV: {t},{p}")
            cm.counts[t, p] += c
    return cm


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("true,pred,count\n")
        for t, p in zip(*np.nonzero(cm.counts)):
            fh.write(f"{t},{p},{int(cm.counts[t, p])}\n")
