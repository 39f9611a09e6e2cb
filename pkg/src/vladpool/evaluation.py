"""Experiment reports: accuracy, confusion matrices, average precision."""

import json
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatchError


@dataclass
class ExperimentReport:
    split: str
    num_videos: int
    accuracy: float
    per_class_accuracy: np.ndarray  # (C,)
    confusion: np.ndarray  # (C, C) integer counts, rows = true class
    mean_ap: float
    weighted_ap: float
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "num_videos": self.num_videos,
            "accuracy": self.accuracy,
            "per_class_accuracy": [float(v) for v in self.per_class_accuracy],
            "confusion": [[int(v) for v in row] for row in self.confusion],
            "mean_ap": self.mean_ap,
            "weighted_ap": self.weighted_ap,
            "wall_time_s": self.wall_time_s,
        }

    def to_text(self) -> str:
        lines = [
            f"split\t{self.split}",
            f"videos\t{self.num_videos}",
            f"accuracy\t{self.accuracy:.6f}",
            f"mean_ap\t{self.mean_ap:.6f}",
            f"weighted_ap\t{self.weighted_ap:.6f}",
            f"wall_time_s\t{self.wall_time_s:.3f}",
        ]
        for c, acc in enumerate(self.per_class_accuracy):
            lines.append(f"class_accuracy\t{c}\t{acc:.6f}")
        for row in self.confusion:
            lines.append("confusion\t" + "\t".join(str(int(v)) for v in row))
        return "\n".join(lines)


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise DimensionMismatchError("labels and predictions differ in length")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


def average_precision(positives, scores) -> float:
    """All-points average precision: mean of precision at each positive's rank.

    Ties are broken by the stable descending sort, i.e. input order.
    """
    positives = np.asarray(positives, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    total = int(positives.sum())
    if total == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.arange(1, len(scores) + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / total)


def build_report(labels, scores, split: str = "test", wall_time_s: float = 0.0) -> ExperimentReport:
    """Assemble the full report from per-video labels and score rows."""
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DimensionMismatchError(
            f"scores must be (n, C) matching {labels.shape[0]} labels"
        )
    num_classes = scores.shape[1]
    if labels.size and labels.max() >= num_classes:
        raise ConfigError("label outside the score matrix class range")
    predictions = np.argmax(scores, axis=1)
    matrix = confusion_matrix(labels, predictions, num_classes)
    class_counts = matrix.sum(axis=1)
    per_class = np.full(num_classes, np.nan)
    seen = class_counts > 0
    per_class[seen] = np.diag(matrix)[seen] / class_counts[seen]

    aps = np.array(
        [average_precision(labels == c, scores[:, c]) for c in range(num_classes)]
    )
    valid = ~np.isnan(aps)
    mean_ap = float(aps[valid].mean()) if valid.any() else float("nan")
    weights = class_counts[valid] / max(1, class_counts[valid].sum())
    weighted_ap = float((aps[valid] * weights).sum()) if valid.any() else float("nan")

    return ExperimentReport(
        split=split,
        num_videos=int(labels.shape[0]),
        accuracy=float(np.trace(matrix) / max(1, labels.shape[0])),
        per_class_accuracy=per_class,
        confusion=matrix,
        mean_ap=mean_ap,
        weighted_ap=weighted_ap,
        wall_time_s=wall_time_s,
    )


def save_report(report: ExperimentReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report_confusion(path) -> np.ndarray:
    with open(path) as fh:
        payload = json.load(fh)
    try:
        return np.array(payload["confusion"], dtype=np.float64)
    except KeyError as exc:
        raise ConfigError(f"{path}: report has no confusion matrix") from exc


def confusion_diff(matrix_a, matrix_b) -> np.ndarray:
    """Row-normalize both confusion matrices, then subtract (A - B).

    Rows of the result sum to zero wherever both inputs had test videos.
    """
    a = np.asarray(matrix_a, dtype=np.float64)
    b = np.asarray(matrix_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(
            f"confusion matrices must share a square shape: {a.shape} vs {b.shape}"
        )
    return _row_normalize(a) - _row_normalize(b)


def _row_normalize(matrix):
    sums = matrix.sum(axis=1, keepdims=True)
    out = np.zeros_like(matrix)
    alive = sums[:, 0] > 0
    out[alive] = matrix[alive] / sums[alive]
    return out


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start
