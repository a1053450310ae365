"""Evaluation metrics: accuracy, rank-statistic AUROC, confusion counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["accuracy", "confusion_counts", "auroc_binary", "auroc", "EvalReport"]


def accuracy(pred_labels, labels) -> float:
    pred_labels = np.asarray(pred_labels)
    labels = np.asarray(labels)
    return float(np.mean(pred_labels == labels))


def confusion_counts(pred_labels, labels, num_classes: int) -> np.ndarray:
    """(C, C) matrix, rows = true class, columns = predicted class."""
    m = np.zeros((num_classes, num_classes), dtype=int)
    for t, p in zip(np.asarray(labels), np.asarray(pred_labels)):
        m[int(t), int(p)] += 1
    return m


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc_binary(scores, labels) -> float:
    """Mann-Whitney rank formulation with tie correction.

    ``scores`` are positive-class scores; ``labels`` in {0, 1} with at least
    one of each.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs at least one positive and one negative sample")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc(scores, labels) -> float:
    """Binary AUROC for 1-D scores; unweighted one-vs-rest mean for (n, C) scores.

    Classes absent from ``labels`` are skipped; fewer than two distinct labels
    is an error (the metric is undefined).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError("auroc undefined: labels contain a single class")
    if scores.ndim == 1:
        return auroc_binary(scores, labels)
    vals = []
    for c in range(scores.shape[1]):
        mask = (labels == c).astype(int)
        if 0 < mask.sum() < len(labels):
            vals.append(auroc_binary(scores[:, c], mask))
    return float(np.mean(vals))


@dataclass
class EvalReport:
    accuracy: float
    auroc: float
    confusion: np.ndarray
    n_samples: int

    @classmethod
    def from_scores(cls, scores: np.ndarray, labels) -> "EvalReport":
        """Build from per-sample class-probability (or logit) vectors."""
        scores = np.asarray(scores, dtype=float)
        labels = np.asarray(labels)
        preds = scores.argmax(axis=1)
        num_classes = scores.shape[1]
        conf = confusion_counts(preds, labels, num_classes)
        return cls(
            accuracy=accuracy(preds, labels),
            auroc=auroc(scores, labels),
            confusion=conf,
            n_samples=len(labels),
        )

    def validate(self):
        assert 0.0 <= self.accuracy <= 1.0
        assert 0.0 <= self.auroc <= 1.0
        assert int(self.confusion.sum()) == self.n_samples
        assert int(np.trace(self.confusion)) == round(self.accuracy * self.n_samples)

    def to_csv_text(self) -> str:
        lines = ["metric,value",
                 f"accuracy,{self.accuracy:.6f}",
                 f"auroc,{self.auroc:.6f}",
                 f"n_samples,{self.n_samples}"]
        for i, row in enumerate(self.confusion):
            lines.append("confusion_row_%d,%s" % (i, ";".join(str(int(v)) for v in row)))
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        lines = [f"samples: {self.n_samples}",
                 f"accuracy: {self.accuracy:.4f}",
                 f"auroc (macro ovr): {self.auroc:.4f}",
                 "confusion (rows = true):"]
        for row in self.confusion:
            lines.append("  " + " ".join(f"{int(v):5d}" for v in row))
        return "\n".join(lines) + "\n"
