"""Evaluation metrics: one-vs-rest ROC AUC, confusion matrix, EvalReport."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import CLASS_ORDER, NUM_CLASSES, DefectClass
from .errors import UndefinedMetricError


def roc_auc_ovr(scores: Sequence[float], labels: Sequence[int]) -> float:
    """AUC as the Mann-Whitney statistic over (positive, negative) pairs.

    Ties in score contribute 1/2. Computed with average ranks, which is
    pairwise-exact: rank sums and tie corrections are dyadic rationals, so
    the result matches the O(P*N) pairwise count bit for bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    sorted_scores = s[order]
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average rank for the tie group, 1-based
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def confusion_matrix(true_labels: Sequence[int], pred_labels: Sequence[int]) -> np.ndarray:
    """4x4 count matrix, rows = true class, columns = predicted class."""
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        cm[int(t), int(p)] += 1
    return cm


@dataclass
class PredictionRow:
    """One test image's prediction: id, true label, class probabilities."""

    id: str
    true_label: int
    probs: tuple[float, float, float, float]


@dataclass
class EvalReport:
    """Confusion matrix plus one-vs-rest AUCs and the per-image log."""

    confusion: np.ndarray
    per_class_auc: list[Optional[float]]
    macro_auc: Optional[float]
    predictions: list[PredictionRow] = field(default_factory=list)
    undefined_classes: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "confusion_matrix": self.confusion.tolist(),
            "per_class_auc": self.per_class_auc,
            "macro_auc": self.macro_auc,
            "undefined_classes": self.undefined_classes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            confusion=np.asarray(obj["confusion_matrix"], dtype=np.int64),
            per_class_auc=list(obj["per_class_auc"]),
            macro_auc=None if obj["macro_auc"] is None else float(obj["macro_auc"]),
            undefined_classes=list(obj.get("undefined_classes", [])),
        )

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def save_predictions_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "true_label", "p0", "p1", "p2", "p3"])
            for row in self.predictions:
                w.writerow([row.id, row.true_label, *[f"{p:.8f}" for p in row.probs]])


def build_eval_report(
    ids: Sequence[str],
    true_labels: Sequence[int],
    probs: np.ndarray,
) -> EvalReport:
    """Assemble an EvalReport from a prediction log.

    Argmax ties break toward the lowest class code. Classes absent from the
    split get AUC None and are excluded from the macro mean (flagged).
    """
    probs = np.asarray(probs, dtype=np.float64)
    true_arr = np.asarray(true_labels, dtype=np.int64)
    preds = probs.argmax(axis=1)  # np.argmax picks the first (lowest) max index
    cm = confusion_matrix(true_arr, preds)

    per_class: list[Optional[float]] = []
    undefined: list[int] = []
    for cls in CLASS_ORDER:
        binary = (true_arr == cls.value).astype(int)
        if binary.sum() == 0 or binary.sum() == len(binary):
            per_class.append(None)
            undefined.append(cls.value)
            continue
        per_class.append(roc_auc_ovr(probs[:, cls.value], binary))
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else None

    rows = [
        PredictionRow(id=i, true_label=int(t), probs=tuple(float(x) for x in p))
        for i, t, p in zip(ids, true_arr, probs)
    ]
    return EvalReport(
        confusion=cm,
        per_class_auc=per_class,
        macro_auc=macro,
        predictions=rows,
        undefined_classes=undefined,
    )


def shelling_auc(report: EvalReport) -> Optional[float]:
    return report.per_class_auc[DefectClass.SHELLING.value]
