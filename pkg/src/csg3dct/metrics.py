"""Binary classification metrics, macro-averaged over mild (0) and severe (1)."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict = field(default_factory=dict, compare=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_class")
        return d


def confusion_matrix(predictions, labels, num_classes: int = 2) -> np.ndarray:
    """``cm[true, predicted]`` counts."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def evaluate_metrics(predictions, labels) -> Metrics:
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions vs {labels.size} labels")
    if not np.isin(labels, (0, 1)).all() or not np.isin(predictions, (0, 1)).all():
        raise ValueError("labels and predictions must be 0 (mild) or 1 (severe)")
    cm = confusion_matrix(predictions, labels)
    per_class = {}
    for c, name in ((0, "mild"), (1, "severe")):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        p, r = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
        per_class[name] = {"precision": float(p), "recall": float(r), "f1": float(_safe_div(2 * p * r, p + r))}
    macro = {k: float(np.mean([per_class[c][k] for c in per_class])) for k in ("precision", "recall", "f1")}
    return Metrics(accuracy=float(np.trace(cm) / cm.sum()), per_class=per_class, **macro)
