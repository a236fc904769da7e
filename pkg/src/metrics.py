"""Ranking and classification measures: top-k accuracy, per-class average precision and MAP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from utils.exceptions import ParameterError, ShapeError, UndefinedAPError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence]


def topk_accuracy(score_rows: ArrayLike, true_labels: ArrayLike, k: int) -> float:
    """Fraction of rows whose true label is among the ``k`` highest scores.

    Equal scores rank the lower class index first.
    """
    scores = np.atleast_2d(np.asarray(score_rows, dtype=np.float64))
    labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    rows, classes = scores.shape
    if not 1 <= k <= classes:
        raise ParameterError(f"k must be in [1, {classes}], got {k}")
    if labels.shape != (rows,):
        raise ShapeError(f"{labels.shape[0]} labels for {rows} score rows")
    if rows == 0:
        raise ParameterError("top-k accuracy of zero rows is undefined")

    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def _as_ranking(scores: ArrayLike, relevance: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    r = np.asarray(relevance).reshape(-1).astype(bool)
    if s.shape != r.shape:
        raise ShapeError(f"{s.shape[0]} scores for {r.shape[0]} relevance flags")
    if not r.any():
        raise UndefinedAPError("Average precision is undefined without a positive item")
    return s, r


def average_precision(scores: ArrayLike, relevance_flags: ArrayLike) -> float:
    """Non-interpolated AP: mean over positives of precision at the positive's rank.

    Ranks come from a stable descending sort, so equal scores keep input order.
    """
    s, r = _as_ranking(scores, relevance_flags)
    ranked = r[np.argsort(-s, kind="stable")]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return math.fsum(hits[ranked] / ranks) / int(r.sum())


def brute_force_average_precision(scores: ArrayLike, relevance_flags: ArrayLike) -> float:
    """O(n^2) reference: for each positive, count the items ranked at or above it."""
    s, r = _as_ranking(scores, relevance_flags)
    n = len(s)
    precisions = []
    for i in np.flatnonzero(r):
        above = [j for j in range(n) if s[j] > s[i] or (s[j] == s[i] and j < i)]
        rank = len(above) + 1
        positives_at_rank = sum(1 for j in above if r[j]) + 1
        precisions.append(positives_at_rank / rank)
    return math.fsum(precisions) / len(precisions)


def per_class_average_precision(scores: ArrayLike, relevance: ArrayLike) -> dict[int, Optional[float]]:
    """AP per column of a ``[n, classes]`` score matrix; ``None`` where a class has no positives."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    r = np.atleast_2d(np.asarray(relevance)).astype(bool)
    if s.shape != r.shape:
        raise ShapeError(f"Scores {s.shape} and relevance {r.shape} differ")
    aps: dict[int, Optional[float]] = {}
    for c in range(s.shape[1]):
        if r[:, c].any():
            aps[c] = average_precision(s[:, c], r[:, c])
        else:
            logger.warning(f"Class {c} has no positives; excluded from MAP")
            aps[c] = None
    return aps


def mean_ap(per_class_aps: Union[Mapping[int, Optional[float]], Sequence[Optional[float]]]) -> float:
    """Unweighted mean over the classes whose AP is defined."""
    values = per_class_aps.values() if isinstance(per_class_aps, Mapping) else per_class_aps
    defined = [float(ap) for ap in values if ap is not None and not math.isnan(ap)]
    if not defined:
        raise UndefinedAPError("MAP is undefined: no class has a defined AP")
    return math.fsum(defined) / len(defined)


@dataclass
class EvalReport:
    per_class_ap: dict[int, float] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)
    map: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    loss: Optional[float] = None
    sample_count: int = 0

    def metrics(self) -> dict[str, float]:
        values = {"map": self.map, "top1": self.top1, "top5": self.top5, "loss": self.loss}
        return {name: value for name, value in values.items() if value is not None}

    def to_text(self) -> str:
        """One metric per line, fixed formatting."""
        lines = [f"samples {self.sample_count}"]
        lines += [f"{name} {value:.10f}" for name, value in self.metrics().items()]
        lines += [f"ap[{c}] {ap:.10f}" for c, ap in sorted(self.per_class_ap.items())]
        if self.excluded_classes:
            lines.append("excluded " + ",".join(str(c) for c in self.excluded_classes))
        return "\n".join(lines) + "\n"

    def to_frame(self) -> pd.DataFrame:
        rows = [{"metric": "samples", "value": float(self.sample_count)}]
        rows += [{"metric": name, "value": value} for name, value in self.metrics().items()]
        rows += [{"metric": f"ap[{c}]", "value": ap} for c, ap in sorted(self.per_class_ap.items())]
        return pd.DataFrame(rows, columns=["metric", "value"])

    def write(self, directory: Union[str, Path], stem: str = "eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        text_path, csv_path = directory / f"{stem}.txt", directory / f"{stem}.csv"
        text_path.write_text(self.to_text())
        self.to_frame().to_csv(csv_path, index=False, float_format="%.10f")
        return text_path, csv_path


def evaluate_scores(scores: ArrayLike, relevance: ArrayLike, single_labels: Optional[ArrayLike] = None,
                    loss: Optional[float] = None) -> EvalReport:
    """Build an EvalReport from a ``[n, classes]`` score matrix and its binary relevance.

    ``single_labels`` (one class per row) adds top-1 and, with at least five
    classes, top-5 accuracy.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    aps = per_class_average_precision(s, relevance)
    defined = {c: ap for c, ap in aps.items() if ap is not None}
    report = EvalReport(
        per_class_ap=defined,
        excluded_classes=[c for c, ap in aps.items() if ap is None],
        map=mean_ap(defined),
        loss=loss,
        sample_count=s.shape[0],
    )
    if single_labels is not None:
        report.top1 = topk_accuracy(s, single_labels, 1)
        if s.shape[1] >= 5:
            report.top5 = topk_accuracy(s, single_labels, 5)
    return report


def relevance_matrix(label_sets: Sequence[Sequence[int]], class_count: int) -> np.ndarray:
    """Multi-hot ``[n, class_count]`` matrix from per-sample label collections."""
    matrix = np.zeros((len(label_sets), class_count), dtype=bool)
    for row, labels in enumerate(label_sets):
        for label in labels:
            if not 0 <= label < class_count:
                raise ParameterError(f"Label {label} outside [0, {class_count})")
            matrix[row, label] = True
    return matrix
