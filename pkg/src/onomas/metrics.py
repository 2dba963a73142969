"""Classification and calibration metrics over frozen prediction arrays."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .taxonomy import Taxonomy


class MetricError(ValueError):
    pass


def _labels(preds, targets, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if preds.size == 0:
        raise MetricError("empty input")
    if preds.shape != targets.shape:
        raise MetricError("preds and targets differ in length")
    for arr, what in ((preds, "prediction"), (targets, "target")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise MetricError(f"{what} ids must lie in [0, {n_classes})")
    return preds, targets


def confusion_matrix(preds, targets, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    preds, targets = _labels(preds, targets, n_classes)
    return np.bincount(targets * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def accuracy(preds, targets, n_classes: int) -> float:
    preds, targets = _labels(preds, targets, n_classes)
    return float(np.count_nonzero(preds == targets)) / preds.size


def per_class_f1(preds, targets, n_classes: int) -> np.ndarray:
    """F1 per class; NaN for classes absent from both predictions and targets."""
    cm = confusion_matrix(preds, targets, n_classes)
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    out = np.full(n_classes, np.nan)
    present = denom > 0
    out[present] = 2.0 * tp[present] / denom[present]
    return out


def macro_f1(preds, targets, n_classes: int) -> float:
    f1 = per_class_f1(preds, targets, n_classes)
    return float(np.mean(f1[~np.isnan(f1)]))


def mcc(preds, targets, n_classes: int) -> float:
    """Multiclass Matthews correlation; 0 when either marginal has zero variance."""
    cm = confusion_matrix(preds, targets, n_classes)
    s = int(cm.sum())
    c = int(np.trace(cm))
    p = [int(v) for v in cm.sum(axis=0)]
    t = [int(v) for v in cm.sum(axis=1)]
    num = c * s - sum(a * b for a, b in zip(p, t))
    den = (s * s - sum(a * a for a in p)) * (s * s - sum(b * b for b in t))
    if den == 0:
        return 0.0
    return num / math.sqrt(den)


@dataclass
class CalibrationBins:
    n_bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return bin_edges(self.n_bins)

    def ece(self) -> float:
        n = self.counts.sum()
        if n == 0:
            return 0.0
        used = self.counts > 0
        gaps = np.abs(self.accuracy[used] - self.mean_confidence[used])
        return float(np.sum(self.counts[used] / n * gaps))


def bin_edges(n_bins: int) -> np.ndarray:
    """Edges ``b / n_bins``, each correctly rounded (linspace can be off by an ulp)."""
    return np.arange(n_bins + 1) / n_bins


def calibration_bins(confidences, correct, n_bins: int = 15) -> CalibrationBins:
    """Equal-width right-closed bins over (0, 1]; confidence 0 lands in the first bin."""
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != hit.shape:
        raise MetricError("confidences and correct flags differ in length")
    if conf.size and (conf.min() < 0.0 or conf.max() > 1.0 or not np.isfinite(conf).all()):
        raise MetricError("confidences must lie in [0, 1]")
    idx = np.clip(np.searchsorted(bin_edges(n_bins), conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    hit_sum = np.bincount(idx, weights=hit.astype(np.float64), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), 0.0)
        acc = np.where(counts > 0, hit_sum / np.maximum(counts, 1), 0.0)
    return CalibrationBins(n_bins, counts, mean_conf, acc)


def ece(confidences, correct, n_bins: int = 15) -> float:
    return calibration_bins(confidences, correct, n_bins).ece()


def brier(prob_rows, targets) -> float:
    """Mean over rows of the squared distance to the one-hot target (range [0, 2])."""
    probs = np.asarray(prob_rows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != targets.size:
        raise MetricError("need one probability row per target")
    if probs.shape[0] == 0:
        raise MetricError("empty input")
    onehot = np.zeros_like(probs)
    onehot[np.arange(targets.size), targets] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def confusion_pairs(preds, targets, n_classes: int, top_k: int = 10) -> list[tuple[int, int, int]]:
    """Off-diagonal cells by descending count; ties by (true, pred) ascending."""
    cm = confusion_matrix(preds, targets, n_classes)
    t, p = np.nonzero(cm)
    cells = [(int(a), int(b), int(cm[a, b])) for a, b in zip(t, p) if a != b]
    cells.sort(key=lambda c: (-c[2], c[0], c[1]))
    return cells[:top_k]


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float | None]
    mcc: float
    ece: float
    brier: float
    n_samples: int
    top_confusion_pairs: list[tuple[int, int, int]] = field(default_factory=list)
    calibration: CalibrationBins | None = field(default=None, repr=False)
    labels: list[str] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": self.per_class_f1,
            "mcc": self.mcc,
            "ece": self.ece,
            "brier": self.brier,
            "n_samples": self.n_samples,
            "top_confusion_pairs": [list(p) for p in self.top_confusion_pairs],
        }
        if self.calibration is not None:
            d["calibration"] = {
                "n_bins": self.calibration.n_bins,
                "counts": self.calibration.counts.tolist(),
                "mean_confidence": self.calibration.mean_confidence.tolist(),
                "accuracy": self.calibration.accuracy.tolist(),
            }
        return d

    def to_kv(self) -> str:
        lines = [
            f"accuracy={self.accuracy:.6f}",
            f"macro_f1={self.macro_f1:.6f}",
            f"mcc={self.mcc:.6f}",
            f"ece={self.ece:.6f}",
            f"brier={self.brier:.6f}",
            f"n_samples={self.n_samples}",
        ]
        return "\n".join(lines) + "\n"

    def pairs_tsv(self) -> str:
        rows = ["true\tpred\tcount\ttrue_label\tpred_label"]
        for t, p, n in self.top_confusion_pairs:
            tl = self.labels[t] if self.labels else str(t)
            pl = self.labels[p] if self.labels else str(p)
            rows.append(f"{t}\t{p}\t{n}\t{tl}\t{pl}")
        return "\n".join(rows) + "\n"

    def write(self, prefix: str | Path) -> list[Path]:
        out = [Path(f"{prefix}{ext}") for ext in (".txt", ".json", ".pairs.tsv")]
        out[0].write_text(self.to_kv(), encoding="utf-8")
        out[1].write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        out[2].write_text(self.pairs_tsv(), encoding="utf-8")
        return out


def evaluate(
    probs: np.ndarray,
    targets: Sequence[int],
    taxonomy: Taxonomy | None = None,
    n_bins: int = 15,
    top_k: int = 10,
) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = probs.shape[1]
    preds = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(preds)), preds]
    bins = calibration_bins(np.clip(conf, 0.0, 1.0), preds == targets, n_bins)
    f1 = per_class_f1(preds, targets, n_classes)
    return EvalReport(
        accuracy=accuracy(preds, targets, n_classes),
        macro_f1=float(np.mean(f1[~np.isnan(f1)])),
        per_class_f1=[None if np.isnan(v) else float(v) for v in f1],
        mcc=mcc(preds, targets, n_classes),
        ece=bins.ece(),
        brier=brier(probs, targets),
        n_samples=int(targets.size),
        top_confusion_pairs=confusion_pairs(preds, targets, n_classes, top_k),
        calibration=bins,
        labels=None if taxonomy is None else [taxonomy.label(c) for c in range(n_classes)],
    )
