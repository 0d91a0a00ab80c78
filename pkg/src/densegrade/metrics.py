"""Confusion-matrix metrics and one-vs-rest AUC-ROC."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


def confusion(y_true, y_pred, k: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)


def per_class_prf(matrix):
    """Precision, recall, F1, support and a degenerate flag per class.

    A zero denominator gives 0 for that metric and sets the class's flag.
    """
    m = np.asarray(matrix, dtype=np.int64)
    tp = np.diag(m).astype(np.float64)
    pred_tot = m.sum(axis=0).astype(np.float64)
    support = m.sum(axis=1)
    degenerate = (pred_tot == 0) | (support == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1, support, degenerate


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> Optional[float]:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    # midranks give ties half credit
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_roc_ovr(scores, y_true, k: Optional[int] = None) -> List[Optional[float]]:
    """Per-class one-vs-rest AUC by the Mann-Whitney rank statistic.

    ``scores`` is N x K probabilities. Classes absent from (or making up all
    of) ``y_true`` have no defined AUC and are returned as ``None``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(y_true):
        raise ValueError(f"scores {scores.shape} do not match labels {y_true.shape}")
    k = scores.shape[1] if k is None else k
    return [_binary_auc(scores[:, c], y_true == c) for c in range(k)]


@dataclass
class MetricsReport:
    class_names: List[str]
    confusion: List[List[int]]
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    auc: List[Optional[float]]
    degenerate: List[bool]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: Optional[float]
    total: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "confusion": [list(map(int, row)) for row in self.confusion],
            "precision": [float(v) for v in self.precision],
            "recall": [float(v) for v in self.recall],
            "f1": [float(v) for v in self.f1],
            "support": [int(v) for v in self.support],
            "auc": [None if v is None else float(v) for v in self.auc],
            "degenerate": [bool(v) for v in self.degenerate],
            "accuracy": float(self.accuracy),
            "macro_precision": float(self.macro_precision),
            "macro_recall": float(self.macro_recall),
            "macro_f1": float(self.macro_f1),
            "macro_auc": None if self.macro_auc is None else float(self.macro_auc),
            "total": int(self.total),
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        """Aligned table, four decimals per number."""
        name_w = max(12, max(len(n) for n in self.class_names) + 2)
        head = f"{'Class':<{name_w}}{'Precision':>11}{'Recall':>9}{'F1-Score':>10}{'AUC-ROC':>9}{'Support':>9}"
        lines = [head, "-" * len(head)]
        for i, name in enumerate(self.class_names):
            auc = "   n/a" if self.auc[i] is None else f"{self.auc[i]:.4f}"
            flag = " *" if self.degenerate[i] else ""
            lines.append(f"{name:<{name_w}}{self.precision[i]:>11.4f}{self.recall[i]:>9.4f}"
                         f"{self.f1[i]:>10.4f}{auc:>9}{self.support[i]:>9d}{flag}")
        lines.append("-" * len(head))
        mauc = "   n/a" if self.macro_auc is None else f"{self.macro_auc:.4f}"
        lines.append(f"{'macro avg':<{name_w}}{self.macro_precision:>11.4f}{self.macro_recall:>9.4f}"
                     f"{self.macro_f1:>10.4f}{mauc:>9}{self.total:>9d}")
        lines.append(f"accuracy {self.accuracy:.4f} ({self.total} samples)")
        if any(self.degenerate):
            lines.append("* degenerate class: zero denominator in precision or recall")
        return "\n".join(lines) + "\n"

    def save(self, json_path, text_path=None) -> None:
        with open(json_path, "w") as f:
            f.write(self.to_json())
        if text_path is not None:
            with open(text_path, "w") as f:
                f.write(self.to_text())


def summarize(matrix, aucs: Sequence[Optional[float]], class_names=None, extra=None) -> MetricsReport:
    m = np.asarray(matrix, dtype=np.int64)
    k = m.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    precision, recall, f1, support, degenerate = per_class_prf(m)
    total = int(m.sum())
    defined = support > 0
    defined_auc = [a for a in aucs if a is not None]

    def macro(v):
        return float(v[defined].mean()) if defined.any() else 0.0

    return MetricsReport(
        class_names=names,
        confusion=m.tolist(),
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=support.tolist(),
        auc=list(aucs),
        degenerate=degenerate.tolist(),
        accuracy=float(np.trace(m) / total) if total else 0.0,
        macro_precision=macro(precision),
        macro_recall=macro(recall),
        macro_f1=macro(f1),
        macro_auc=float(np.mean(defined_auc)) if defined_auc else None,
        total=total,
        extra=dict(extra or {}),
    )


def report_from_predictions(y_true, probs, class_names=None, extra=None) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[1]
    y_pred = probs.argmax(axis=1)
    return summarize(confusion(y_true, y_pred, k), auc_roc_ovr(probs, y_true, k), class_names, extra)
