"""Segmentation overlap, confusion-matrix rates, ROC/AUC and operating threshold."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ShapeError, ValidationError


def _sets(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p.astype(bool), g.astype(bool)


def dice(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    p, g = _sets(pred, gt)
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2.0 * int((p & g).sum()) / total


def iou(pred, gt) -> float:
    """|P & G| / |P | G|; 1.0 when both are empty."""
    p, g = _sets(pred, gt)
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class Rates(NamedTuple):
    """``None`` marks a rate whose class is absent from the data."""

    tpr: float | None
    tnr: float | None
    acc: float


def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValidationError("no samples to evaluate")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    return s, y.astype(bool)


def confusion(scores, labels, threshold: float) -> ConfusionMatrix:
    """Predict positive iff score >= threshold."""
    s, y = _scores_labels(scores, labels)
    pred = s >= threshold
    return ConfusionMatrix(
        tp=int(np.sum(pred & y)), fp=int(np.sum(pred & ~y)), tn=int(np.sum(~pred & ~y)), fn=int(np.sum(~pred & y))
    )


def tpr_tnr_acc(cm: ConfusionMatrix) -> Rates:
    pos, neg = cm.tp + cm.fn, cm.tn + cm.fp
    return Rates(
        tpr=cm.tp / pos if pos else None,
        tnr=cm.tn / neg if neg else None,
        acc=(cm.tp + cm.tn) / cm.total,
    )


@dataclass(frozen=True)
class RocCurve:
    """Points ordered by strictly decreasing threshold; the first threshold is +inf."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    n_pos: int
    n_neg: int

    def __len__(self) -> int:
        return len(self.thresholds)

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))

    def counts(self, i: int) -> tuple[int, int]:
        """Exact (fp, tp) counts behind point ``i``."""
        return int(round(self.fpr[i] * self.n_neg)), int(round(self.tpr[i] * self.n_pos))


def roc_curve(scores, labels) -> RocCurve:
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    thresholds = np.r_[np.inf, s_sorted[last]]
    fpr = np.r_[0, fps[last]] / n_neg
    tpr = np.r_[0, tps[last]] / n_pos
    return RocCurve(thresholds, fpr.astype(np.float64), tpr.astype(np.float64), n_pos, n_neg)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    f, t = curve.fpr, curve.tpr
    return float(np.sum((f[1:] - f[:-1]) * (t[1:] + t[:-1]) * 0.5))


def optimal_index(curve: RocCurve) -> int:
    """Point closest to (0, 1); ties go to the larger threshold.

    Distances are compared exactly on integer counts:
    d^2 * P^2 * N^2 = (fp * P)^2 + (fn * N)^2.
    """
    best, best_key = 0, None
    p, n = curve.n_pos, curve.n_neg
    for i in range(len(curve)):
        fp, tp = curve.counts(i)
        key = (fp * p) ** 2 + ((p - tp) * n) ** 2
        if best_key is None or key < best_key:
            best, best_key = i, key
    return best


def optimal_threshold(curve: RocCurve) -> float:
    return float(curve.thresholds[optimal_index(curve)])


def distance_to_corner(fpr: float, tpr: float) -> float:
    return math.hypot(fpr, 1.0 - tpr)


# ------------------------------------------------------------------ CSV I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def roc_to_csv(curve: RocCurve) -> str:
    buf = io.StringIO()
    buf.write("threshold,fpr,tpr\n")
    for t, f, p in curve.points():
        buf.write(f"{_fmt(t)},{_fmt(f)},{_fmt(p)}\n")
    return buf.getvalue()


def confusion_to_csv(cm: ConfusionMatrix, threshold: float) -> str:
    return f"threshold,tp,fp,tn,fn\n{_fmt(threshold)},{cm.tp},{cm.fp},{cm.tn},{cm.fn}\n"


class CsvParseError(ValidationError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


def _read_rows(text: str, header: Sequence[str]) -> list[tuple[int, list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != list(header):
        raise CsvParseError(1, f"expected header {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvParseError(lineno, f"expected {len(header)} fields, got {len(row)}")
        out.append((lineno, row))
    return out


def roc_from_csv(text: str, n_pos: int = 0, n_neg: int = 0) -> RocCurve:
    th, fp, tp = [], [], []
    for lineno, row in _read_rows(text, ("threshold", "fpr", "tpr")):
        try:
            vals = [float(v) for v in row]
        except ValueError:
            raise CsvParseError(lineno, f"non-numeric field in {row}") from None
        if not (0 <= vals[1] <= 1 and 0 <= vals[2] <= 1):
            raise CsvParseError(lineno, "rates must lie in [0, 1]")
        if th and not vals[0] < th[-1]:
            raise CsvParseError(lineno, "thresholds must be strictly decreasing")
        th.append(vals[0])
        fp.append(vals[1])
        tp.append(vals[2])
    if len(th) < 2:
        raise CsvParseError(1, "ROC needs at least two points")
    return RocCurve(np.array(th), np.array(fp), np.array(tp), n_pos, n_neg)


def confusion_from_csv(text: str) -> tuple[ConfusionMatrix, float]:
    rows = _read_rows(text, ("threshold", "tp", "fp", "tn", "fn"))
    if len(rows) != 1:
        raise CsvParseError(2, f"expected exactly one data row, got {len(rows)}")
    lineno, row = rows[0]
    try:
        thr = float(row[0])
        counts = [int(v) for v in row[1:]]
    except ValueError:
        raise CsvParseError(lineno, f"bad field in {row}") from None
    if any(c < 0 for c in counts):
        raise CsvParseError(lineno, "counts must be non-negative")
    return ConfusionMatrix(*counts), thr
