"""Confusion-matrix evaluation: overall accuracy, per-class F1 and Cohen's kappa."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, n_classes: int) -> "ConfusionMatrix":
        if n_classes < 1:
            raise MetricsError("need at least one class")
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise MetricsError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def confusion_accumulate(cm: ConfusionMatrix, pred, gt, ignore_index: int | None = None) -> ConfusionMatrix:
    """Add one raster pair to ``cm`` in place and return it."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricsError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = np.ones(gt.shape, dtype=bool) if ignore_index is None else gt != ignore_index
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    c = cm.n_classes
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise MetricsError(f"{name} class out of range [0, {c})")
    cm.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    cm.ignored += int(gt.size - keep.sum())
    return cm


def _counts(cm) -> np.ndarray:
    counts = np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.int64)
    if counts.sum() <= 0:
        raise MetricsError("confusion matrix is empty")
    return counts


def overall_accuracy(cm) -> float:
    counts = _counts(cm)
    return float(np.trace(counts) / counts.sum())


def f1_scores(cm) -> tuple[list[float | None], float]:
    """Per-class F1 (None for classes absent from both truth and prediction) and their mean."""
    counts = _counts(cm)
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    scores: list[float | None] = []
    for k in range(counts.shape[0]):
        if rows[k] == 0 and cols[k] == 0:
            scores.append(None)
            continue
        tp = counts[k, k]
        precision = tp / cols[k] if cols[k] else 0.0
        recall = tp / rows[k] if rows[k] else 0.0
        s = precision + recall
        scores.append(float(2 * precision * recall / s) if s else 0.0)
    present = [s for s in scores if s is not None]
    return scores, float(np.mean(present))


def agreement(cm) -> tuple[float, float]:
    """Observed and chance agreement ``(p_o, p_e)``."""
    counts = _counts(cm)
    total = counts.sum()
    p_o = np.trace(counts) / total
    p_e = float(np.dot(counts.sum(axis=1), counts.sum(axis=0))) / float(total) ** 2
    return float(p_o), p_e


def kappa(cm) -> float:
    # (p_o - p_e) / (1 - p_e) scaled by total^2 so only the final division rounds
    counts = _counts(cm)
    total = int(counts.sum())
    chance = int(np.dot(counts.sum(axis=1), counts.sum(axis=0)))
    denom = total * total - chance
    if denom == 0:
        raise MetricsError("kappa undefined: chance agreement is 1 (single class in truth and prediction)")
    return (total * int(np.trace(counts)) - chance) / denom


@dataclass
class MetricsReport:
    class_names: list[str]
    f1: list[float | None]
    mean_f1: float
    oa: float
    kappa: float | None
    p_o: float
    p_e: float
    confusion: list[list[int]] = field(default_factory=list)
    ignored: int = 0

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, class_names=None) -> "MetricsReport":
        names = list(class_names) if class_names is not None else [f"class_{k}" for k in range(cm.n_classes)]
        if len(names) != cm.n_classes:
            raise MetricsError(f"{len(names)} class names for {cm.n_classes} classes")
        f1, mean_f1 = f1_scores(cm)
        p_o, p_e = agreement(cm)
        try:
            k = kappa(cm)
        except MetricsError:
            k = None
        return cls(names, f1, mean_f1, overall_accuracy(cm), k, p_o, p_e, cm.counts.tolist(), cm.ignored)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def to_table(self) -> str:
        """Aligned text table: one F1 row per class, then OA, average F1 and kappa, in percent."""
        def pct(v):
            return "n/a" if v is None else f"{100 * v:.2f}"

        rows = [(name, pct(s)) for name, s in zip(self.class_names, self.f1)]
        rows += [("OA (%)", pct(self.oa)), ("AVERAGE F1 SCORE (%)", pct(self.mean_f1)),
                 ("κ (%)", pct(self.kappa))]
        width = max(len(r[0]) for r in rows)
        lines = [f"{'Class':<{width}}  {'Score':>7}", "-" * (width + 9)]
        lines += [f"{name:<{width}}  {value:>7}" for name, value in rows]
        return "\n".join(lines) + "\n"
