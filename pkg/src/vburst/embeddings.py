"""Ingestion of externally precomputed sequence embeddings.

Self-supervised feature extractors stay out of tree; their outputs enter
through the same binary container the feature frontends use, tagged
"embedding". A deterministic pseudo-embedding generator is included so the
downstream pipeline can be exercised without a pretrained network.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureSequence, read_feature_file, write_feature_file


@dataclass(frozen=True)
class EmbeddingSequence:
    """Frame embeddings for one utterance: (T, D) at a fixed frame rate."""

    id: str
    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"embedding frames must be (T>=1, D>=1), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("embedding frames contain non-finite values")


def read_embeddings(path) -> EmbeddingSequence:
    """Read one utterance's embeddings; the id is the file stem."""
    seq = read_feature_file(path)
    if seq.kind != "embedding":
        raise ValueError(f"{path}: kind {seq.kind!r}, expected 'embedding'")
    if seq.data.ndim != 2:
        raise ValueError(f"{path}: embeddings must be 2-D, got {seq.data.ndim}-D")
    return EmbeddingSequence(id=Path(path).stem, frames=seq.data, frame_rate=seq.frame_rate)


def write_embeddings(seq: EmbeddingSequence, path) -> None:
    write_feature_file(path, seq.frames, kind="embedding", frame_rate=seq.frame_rate)


def embeddings_as_features(seq: EmbeddingSequence) -> FeatureSequence:
    """Adapt to the model's feature contract; values pass through unchanged."""
    return FeatureSequence(data=seq.frames, kind="embedding", frame_rate=seq.frame_rate)


def pseudo_embeddings(logmel: np.ndarray, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic random-projection surrogate for self-supervised frames.

    Projects (T, F) log-mel frames to (T, dim) with a seed-fixed Gaussian
    matrix and a tanh squashing; stands in for a pretrained encoder during
    pipeline tests.
    """
    lm = np.asarray(logmel, dtype=np.float64)
    if lm.ndim != 2:
        raise ValueError("pseudo_embeddings expects a (T, F) matrix")
    rng = np.random.default_rng([seed, 0xE4B])
    projection = rng.standard_normal((lm.shape[1], dim)) / np.sqrt(lm.shape[1])
    return np.tanh(lm @ projection)
