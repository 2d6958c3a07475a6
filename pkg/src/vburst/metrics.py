"""Evaluation metrics: CCC, UAR, MAE, and the challenge composite score.

The composite is the harmonic mean of UAR, mean CCC, and inverted MAE:
3 / (1/UAR + 1/CCC + MAE). CCC uses population (divide-by-N) moments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .data_model import LabelSet, PredictionSet


@dataclass(frozen=True)
class EvalReport:
    """Scores for one prediction/label pairing."""

    uar: float
    mae: float
    ccc_per_dim: tuple[float, ...]
    ccc_mean: float
    s_mtl: Optional[float]  # None when undefined (any component <= 0)
    n_utterances: int = 0

    def as_text(self, per_dim: bool = False) -> str:
        lines = [
            f"n={self.n_utterances}",
            f"uar={self.uar:.6f}",
            f"mae={self.mae:.6f}",
            f"ccc_mean={self.ccc_mean:.6f}",
            "s_mtl=undefined" if self.s_mtl is None else f"s_mtl={self.s_mtl:.6f}",
        ]
        if per_dim:
            lines += [f"ccc_{i}={v:.6f}" for i, v in enumerate(self.ccc_per_dim)]
        return "\n".join(lines) + "\n"


def ccc(pred, gold) -> float:
    """Concordance correlation coefficient.

    2 cov(x, y) / (var(x) + var(y) + (mean(x) - mean(y))^2), population
    moments. Defined as 0 when the denominator vanishes.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError(f"CCC needs >= 2 points, got {x.size}")
    mx, my = x.mean(), y.mean()
    cov = np.mean((x - mx) * (y - my))
    denom = x.var() + y.var() + (mx - my) ** 2
    if denom == 0.0:
        return 0.0
    return float(2.0 * cov / denom)


def uar(pred_classes, gold_classes, n_classes: int) -> float:
    """Unweighted average recall over the classes present in gold."""
    pred = np.asarray(pred_classes, dtype=np.int64)
    gold = np.asarray(gold_classes, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise ValueError("UAR of an empty prediction set")
    if np.any(gold < 0) or np.any(gold >= n_classes):
        raise ValueError(f"gold class outside [0, {n_classes})")
    recalls = []
    for cls in range(n_classes):
        mask = gold == cls
        if np.any(mask):
            recalls.append(float(np.mean(pred[mask] == cls)))
    return float(np.mean(recalls))


def mae(pred, gold) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ValueError("MAE of an empty set")
    return float(np.mean(np.abs(x - y)))


def s_mtl(uar_value: float, mae_value: float, ccc_value: float) -> float:
    """Composite score: harmonic mean of {UAR, CCC, 1/MAE}.

    Undefined (raises) when any argument is <= 0; callers report that
    explicitly rather than clamping.
    """
    if uar_value <= 0 or mae_value <= 0 or ccc_value <= 0:
        raise ValueError(
            f"s_mtl undefined for uar={uar_value}, mae={mae_value}, ccc={ccc_value}"
        )
    return 3.0 / (1.0 / uar_value + 1.0 / ccc_value + mae_value)


def evaluate(predictions: Sequence[PredictionSet],
             labels: Mapping[str, LabelSet]) -> EvalReport:
    """Score a prediction set against labels, joined by utterance id.

    Country predictions are the argmax of country_probs. Per-dimension CCC
    is reported alongside the mean. The composite is None when undefined.
    """
    if not predictions:
        raise ValueError("empty prediction set")
    missing = [p.id for p in predictions if p.id not in labels]
    if missing:
        raise ValueError(f"no labels for ids {missing[:5]}")
    ordered = sorted(predictions, key=lambda p: p.id)
    lab = [labels[p.id] for p in ordered]

    n_classes = ordered[0].country_probs.size
    uar_value = uar(
        [int(np.argmax(p.country_probs)) for p in ordered],
        [l.country for l in lab],
        n_classes,
    )
    mae_value = mae([p.age for p in ordered], [l.age for l in lab])
    pred_emo = np.stack([p.emotion for p in ordered])
    gold_emo = np.stack([l.emotion for l in lab])
    ccc_per_dim = tuple(
        ccc(pred_emo[:, j], gold_emo[:, j]) for j in range(gold_emo.shape[1])
    )
    ccc_mean = float(np.mean(ccc_per_dim))
    try:
        composite = s_mtl(uar_value, mae_value, ccc_mean)
    except ValueError:
        composite = None
    return EvalReport(uar=uar_value, mae=mae_value, ccc_per_dim=ccc_per_dim,
                      ccc_mean=ccc_mean, s_mtl=composite, n_utterances=len(ordered))
