"""Ranking and decision metrics: non-interpolated average precision,
macro mAP over a class set, support-weighted F1, and the multi-seed
aggregate every table cell is built from."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .stage2 import DiseasePrediction


@dataclass
class MetricResult:
    metric: str
    mean: float
    std: float
    per_seed: list[float]
    per_class: list[tuple[str, float]] | None = None

    @classmethod
    def from_per_seed(cls, metric: str, per_seed: list[float], per_class=None) -> "MetricResult":
        values = np.asarray(per_seed, dtype=np.float64)
        if values.size == 0:
            raise ContractViolation("cannot aggregate an empty per-seed list")
        return cls(
            metric=metric,
            mean=float(values.mean()),
            std=float(values.std(ddof=0)),
            per_seed=[float(v) for v in per_seed],
            per_class=per_class,
        )

    def verify(self, tol: float = 1e-9) -> bool:
        values = np.asarray(self.per_seed, dtype=np.float64)
        return abs(self.mean - values.mean()) <= tol and abs(self.std - values.std(ddof=0)) <= tol


def average_precision(scores, relevance, notes: list[str] | None = None) -> float:
    """All-points, non-interpolated AP over the score-descending ranking.

    Ties keep stable input order (noted, since mAP is tie-sensitive); no
    positives is defined as 0 with a warning note."""
    s = np.asarray(scores, dtype=np.float64)
    r = np.asarray(relevance, dtype=np.int64)
    if s.shape != r.shape or s.ndim != 1:
        raise ContractViolation(f"scores {s.shape} and relevance {r.shape} must be equal-length vectors")
    positives = int(r.sum())
    if positives == 0:
        if notes is not None:
            notes.append("no positive samples; AP defined as 0")
        return 0.0
    order = np.argsort(-s, kind="stable")
    ranked_scores = s[order]
    if notes is not None and np.any(ranked_scores[1:] == ranked_scores[:-1]):
        notes.append("tied scores broken by stable input order")
    hits = 0
    total = 0.0
    for k, idx in enumerate(order, start=1):
        if r[idx]:
            hits += 1
            total += hits / k
    return total / positives


def mean_average_precision(
    predictions: list[DiseasePrediction],
    truth: dict,
    diseases: tuple[str, ...],
    class_set: tuple[str, ...] | None = None,
    notes: list[str] | None = None,
) -> MetricResult:
    """Unweighted mean of per-class AP over class_set. Classes without a
    positive sample are excluded with a warning, not scored as zero."""
    if class_set is None:
        class_set = diseases
    unknown = sorted(set(class_set) - set(diseases))
    if unknown:
        raise ContractViolation(f"class_set names {unknown} missing from the score vector order")
    if not predictions:
        raise ContractViolation("no predictions to score")
    index = {d: i for i, d in enumerate(diseases)}
    per_class = []
    for disease in class_set:
        col = index[disease]
        scores = np.array([p.scores[col] for p in predictions])
        relevance = np.array(
            [1 if disease in truth.get(p.image_id, frozenset()) else 0 for p in predictions]
        )
        if relevance.sum() == 0:
            if notes is not None:
                notes.append(f"class {disease!r} has no positives in truth; excluded from mAP")
            continue
        per_class.append((disease, average_precision(scores, relevance, notes)))
    if not per_class:
        raise ContractViolation("every class in class_set had zero positives")
    value = float(np.mean([ap for _, ap in per_class]))
    return MetricResult(
        metric="mAP", mean=value, std=0.0, per_seed=[value], per_class=per_class
    )


def _decision_set(decision) -> frozenset:
    if isinstance(decision, frozenset):
        return decision
    if isinstance(decision, (set, list, tuple)):
        return frozenset(decision)
    return frozenset([decision])


def weighted_f1(
    predictions: list[DiseasePrediction], truth: dict, diseases: tuple[str, ...]
) -> float:
    """Per-class F1 weighted by class support, over binary per-class
    decisions (single-label decisions count as a one-element set)."""
    if not predictions:
        raise ContractViolation("no predictions to score")
    total_support = 0
    weighted = 0.0
    for disease in diseases:
        tp = fp = fn = 0
        for p in predictions:
            predicted = disease in _decision_set(p.decision)
            actual = disease in truth.get(p.image_id, frozenset())
            if predicted and actual:
                tp += 1
            elif predicted:
                fp += 1
            elif actual:
                fn += 1
        support = tp + fn
        if support == 0:
            continue
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        weighted += support * f1
        total_support += support
    if total_support == 0:
        raise ContractViolation("truth contains no positives for any scored class")
    return weighted / total_support
