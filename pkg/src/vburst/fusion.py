"""Late score fusion: per-task weighted combination of model predictions,
plus an exhaustive validation grid search over simplex weights.

Country fusion averages probabilities (convexity keeps the simplex);
emotion results are clamped back to [0, 1]. The composite score is
strictly monotone in each task metric and the tasks share no weights, so
the grid search optimizes each task's weight vector independently — this
is exactly equivalent to the joint exhaustive search.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data_model import LabelSet, PredictionSet
from .metrics import EvalReport, ccc, evaluate, mae, uar

TASK_ORDER = ("age", "emotion", "country")


@dataclass(frozen=True)
class FusionWeights:
    """One weight vector over M models per task; normalized to sum 1."""

    age: np.ndarray
    emotion: np.ndarray
    country: np.ndarray

    def __post_init__(self):
        for task in TASK_ORDER:
            w = np.asarray(getattr(self, task), dtype=np.float64)
            if w.ndim != 1 or w.size < 1:
                raise ValueError(f"{task} weights must be a non-empty vector")
            if np.any(w < 0):
                raise ValueError(f"{task} weights must be nonnegative")
            total = float(w.sum())
            if total <= 0:
                raise ValueError(f"{task} weights sum to {total}")
            object.__setattr__(self, task, w / total)
        if not (self.age.size == self.emotion.size == self.country.size):
            raise ValueError("per-task weight vectors must have equal length")

    @property
    def n_models(self) -> int:
        return self.age.size


def uniform_weights(n_models: int) -> FusionWeights:
    w = np.full(n_models, 1.0 / n_models)
    return FusionWeights(age=w, emotion=w.copy(), country=w.copy())


def _aligned(model_predictions: Sequence[Sequence[PredictionSet]]):
    """Sort every model's predictions by id and check the id sets agree."""
    if not model_predictions:
        raise ValueError("need at least one model's predictions")
    sorted_lists = [sorted(preds, key=lambda p: p.id) for preds in model_predictions]
    reference = [p.id for p in sorted_lists[0]]
    for m, preds in enumerate(sorted_lists[1:], start=1):
        ids = [p.id for p in preds]
        if ids != reference:
            raise ValueError(f"model {m} covers different utterance ids than model 0")
    return sorted_lists


def fuse(model_predictions: Sequence[Sequence[PredictionSet]],
         weights: FusionWeights) -> list[PredictionSet]:
    """Per-utterance weighted combination of M aligned prediction lists."""
    aligned = _aligned(model_predictions)
    if len(aligned) != weights.n_models:
        raise ValueError(f"{len(aligned)} models but weights cover {weights.n_models}")
    fused = []
    for row in zip(*aligned):
        age = float(sum(w * p.age for w, p in zip(weights.age, row)))
        emotion = np.clip(
            sum(w * p.emotion for w, p in zip(weights.emotion, row)), 0.0, 1.0
        )
        probs = sum(w * p.country_probs for w, p in zip(weights.country, row))
        fused.append(PredictionSet(id=row[0].id, age=age, emotion=emotion,
                                   country_probs=probs))
    return fused


def simplex_grid(n_models: int, step: float = 0.1) -> list[tuple[float, ...]]:
    """All weight vectors with entries that are multiples of step summing to 1."""
    n_steps = round(1.0 / step)
    if abs(n_steps * step - 1.0) > 1e-9 or n_steps < 1:
        raise ValueError(f"grid step {step} does not divide 1")

    points: list[tuple[float, ...]] = []

    def extend(prefix: list[int], remaining: int):
        if len(prefix) == n_models - 1:
            points.append(tuple((*prefix, remaining)))
            return
        for k in range(remaining + 1):
            extend(prefix + [k], remaining - k)

    extend([], n_steps)
    return [tuple(k / n_steps for k in p) for p in points]


def _tie_break_key(point: tuple[float, ...]):
    uniform = 1.0 / len(point)
    return (sum((w - uniform) ** 2 for w in point), point)


def grid_search_weights(model_val_predictions: Sequence[Sequence[PredictionSet]],
                        labels: Mapping[str, LabelSet], step: float = 0.1
                        ) -> tuple[FusionWeights, EvalReport]:
    """Exhaustive per-task simplex search maximizing validation composite.

    Ties break toward the most uniform weight vector, then lexicographically
    smallest. Returns the chosen weights and the fused validation report.
    """
    aligned = _aligned(model_val_predictions)
    n_models = len(aligned)
    if n_models > 3:
        raise ValueError(f"grid search supports at most 3 models, got {n_models}")
    ids = [p.id for p in aligned[0]]
    if not ids:
        raise ValueError("empty validation set")
    missing = [i for i in ids if i not in labels]
    if missing:
        raise ValueError(f"validation labels missing for {missing[:5]}")

    gold_age = np.array([labels[i].age for i in ids])
    gold_emotion = np.stack([labels[i].emotion for i in ids])
    gold_country = [labels[i].country for i in ids]
    ages = np.stack([[p.age for p in preds] for preds in aligned])            # (M, U)
    emotions = np.stack([[p.emotion for p in preds] for preds in aligned])    # (M, U, E)
    probs = np.stack([[p.country_probs for p in preds] for preds in aligned]) # (M, U, K)
    n_classes = probs.shape[2]

    def age_score(w):
        return -mae(np.tensordot(w, ages, axes=1), gold_age)

    def emotion_score(w):
        pred = np.clip(np.tensordot(w, emotions, axes=1), 0.0, 1.0)
        return float(np.mean([
            ccc(pred[:, j], gold_emotion[:, j]) for j in range(pred.shape[1])
        ]))

    def country_score(w):
        pred = np.tensordot(w, probs, axes=1)
        return uar(np.argmax(pred, axis=1), gold_country, n_classes)

    grid = simplex_grid(n_models, step)
    chosen = {}
    for task, score in (("age", age_score), ("emotion", emotion_score),
                        ("country", country_score)):
        scored = [(score(np.array(pt)), pt) for pt in grid]
        best_value = max(s for s, _ in scored)
        tied = [pt for s, pt in scored if s == best_value]
        chosen[task] = np.array(min(tied, key=_tie_break_key))

    weights = FusionWeights(**chosen)
    report = evaluate(fuse(model_val_predictions, weights), labels)
    return weights, report
