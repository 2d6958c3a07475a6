"""Manifests, labels, splits, and prediction records shared by every pipeline stage.

Manifest files are UTF-8, comma-delimited tables with a header row naming
the columns ``{id, path, split, age, country, e_0..e_{E-1}}``. Empty label
cells mean "label absent" (the test split carries no labels). Prediction
files are comma-delimited with columns ``id, age, e_0.., c_0..``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .util import atomic_write_text

SPLITS = ("train", "val", "test")

DEFAULT_COUNTRIES = ("US", "CN", "ZA", "VE")
DEFAULT_N_EMOTIONS = 10


class ManifestError(ValueError):
    """Raised on malformed manifests, labels, or prediction files."""


def country_vocabulary(tokens: Sequence[str]) -> tuple[str, ...]:
    """Validate and freeze an ordered country vocabulary.

    Token i maps to class index i; the assignment is stable for the
    lifetime of the experiment.
    """
    tokens = tuple(str(t) for t in tokens)
    if len(tokens) < 2:
        raise ManifestError(f"country vocabulary needs >=2 tokens, got {len(tokens)}")
    if len(set(tokens)) != len(tokens):
        raise ManifestError(f"duplicate country tokens in {tokens!r}")
    return tokens


@dataclass(frozen=True)
class LabelSet:
    """Targets for one utterance: emotion intensities, age in years, country index."""

    emotion: np.ndarray  # (E,) values in [0, 1]
    age: float
    country: int

    def __post_init__(self):
        emo = np.asarray(self.emotion, dtype=np.float64)
        object.__setattr__(self, "emotion", emo)
        if emo.ndim != 1 or emo.size == 0:
            raise ManifestError("emotion must be a non-empty vector")
        if not np.all(np.isfinite(emo)):
            raise ManifestError("emotion contains non-finite values")
        if np.any(emo < 0.0) or np.any(emo > 1.0):
            bad = int(np.argmax((emo < 0.0) | (emo > 1.0)))
            raise ManifestError(f"emotion e_{bad}={emo[bad]} outside [0, 1]")
        if not (np.isfinite(self.age) and self.age > 0):
            raise ManifestError(f"age must be a positive real, got {self.age}")
        if self.country < 0:
            raise ManifestError(f"country index must be >= 0, got {self.country}")


@dataclass(frozen=True)
class UtteranceRecord:
    """One manifest row: id, audio path, split, and optional labels."""

    id: str
    audio_path: str
    split: str
    labels: Optional[LabelSet] = None

    def __post_init__(self):
        if not self.id:
            raise ManifestError("utterance id must be non-empty")
        if self.split not in SPLITS:
            raise ManifestError(f"split {self.split!r} not one of {SPLITS}")


@dataclass(frozen=True)
class PredictionSet:
    """Per-utterance model outputs: emotion vector, age, country probabilities."""

    id: str
    emotion: np.ndarray  # (E,) in [0, 1]
    age: float
    country_probs: np.ndarray  # (K,) simplex

    def __post_init__(self):
        emo = np.clip(np.asarray(self.emotion, dtype=np.float64), 0.0, 1.0)
        probs = np.asarray(self.country_probs, dtype=np.float64)
        object.__setattr__(self, "emotion", emo)
        object.__setattr__(self, "country_probs", probs)
        if not self.id:
            raise ManifestError("prediction id must be non-empty")
        if probs.ndim != 1 or probs.size == 0:
            raise ManifestError("country_probs must be a non-empty vector")
        if np.any(probs < -1e-12):
            raise ManifestError("country_probs entries must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-6:
            raise ManifestError(
                f"country_probs sum {float(probs.sum()):.9f} not within 1e-6 of 1"
            )


def _manifest_columns(n_emotions: int) -> list[str]:
    return ["id", "path", "split", "age", "country"] + [
        f"e_{i}" for i in range(n_emotions)
    ]


def parse_manifest(
    text: str,
    vocabulary: Sequence[str] = DEFAULT_COUNTRIES,
    n_emotions: int = DEFAULT_N_EMOTIONS,
) -> list[UtteranceRecord]:
    """Parse a manifest table into records, preserving row order.

    Train/val rows must carry a complete label set; test rows must carry
    none. Any bounds or vocabulary violation is reported with the field
    name.
    """
    vocab = country_vocabulary(vocabulary)
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise ManifestError("manifest is empty (no header row)")
    header = [h.strip() for h in rows[0]]
    required = _manifest_columns(n_emotions)
    missing = [c for c in required if c not in header]
    if missing:
        raise ManifestError(f"manifest missing required columns: {missing}")
    col = {name: header.index(name) for name in required}

    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            raise ManifestError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        cell = lambda name: row[col[name]].strip()
        uid = cell("id")
        if uid in seen:
            raise ManifestError(f"line {lineno}: duplicate id {uid!r}")
        seen.add(uid)
        split = cell("split")
        label_cells = [cell("age"), cell("country")] + [
            cell(f"e_{i}") for i in range(n_emotions)
        ]
        has_any = any(c != "" for c in label_cells)
        has_all = all(c != "" for c in label_cells)
        labels = None
        if split == "test":
            if has_any:
                raise ManifestError(f"line {lineno}: test row {uid!r} must not carry labels")
        else:
            if not has_all:
                raise ManifestError(
                    f"line {lineno}: {split} row {uid!r} is missing label cells"
                )
            try:
                age = float(cell("age"))
                emotion = np.array(
                    [float(cell(f"e_{i}")) for i in range(n_emotions)], dtype=np.float64
                )
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: malformed numeric field ({exc})") from None
            token = cell("country")
            if token not in vocab:
                raise ManifestError(
                    f"line {lineno}: country {token!r} not in vocabulary {vocab}"
                )
            try:
                labels = LabelSet(emotion=emotion, age=age, country=vocab.index(token))
            except ManifestError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
        records.append(UtteranceRecord(id=uid, audio_path=cell("path"), split=split, labels=labels))
    return records


def serialize_manifest(
    records: Sequence[UtteranceRecord],
    vocabulary: Sequence[str] = DEFAULT_COUNTRIES,
    n_emotions: int = DEFAULT_N_EMOTIONS,
) -> str:
    """Inverse of parse_manifest on well-formed record lists."""
    vocab = country_vocabulary(vocabulary)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_manifest_columns(n_emotions))
    for rec in records:
        if rec.labels is None:
            tail = [""] * (2 + n_emotions)
        else:
            lab = rec.labels
            if len(lab.emotion) != n_emotions:
                raise ManifestError(
                    f"record {rec.id!r} has {len(lab.emotion)} emotion dims, expected {n_emotions}"
                )
            tail = [repr(float(lab.age)), vocab[lab.country]] + [
                repr(float(v)) for v in lab.emotion
            ]
        writer.writerow([rec.id, rec.audio_path, rec.split] + tail)
    return out.getvalue()


def load_manifest(path, vocabulary=DEFAULT_COUNTRIES, n_emotions=DEFAULT_N_EMOTIONS):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read(), vocabulary, n_emotions)


def save_manifest(path, records, vocabulary=DEFAULT_COUNTRIES, n_emotions=DEFAULT_N_EMOTIONS):
    atomic_write_text(path, serialize_manifest(records, vocabulary, n_emotions))


# --- prediction files (the late-fusion wire format) ---


def serialize_predictions(preds: Sequence[PredictionSet]) -> str:
    if not preds:
        raise ManifestError("no predictions to serialize")
    n_emotions = len(preds[0].emotion)
    n_countries = len(preds[0].country_probs)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        ["id", "age"]
        + [f"e_{i}" for i in range(n_emotions)]
        + [f"c_{k}" for k in range(n_countries)]
    )
    for p in preds:
        if len(p.emotion) != n_emotions or len(p.country_probs) != n_countries:
            raise ManifestError(f"prediction {p.id!r} has inconsistent dimensions")
        writer.writerow(
            [p.id, repr(float(p.age))]
            + [repr(float(v)) for v in p.emotion]
            + [repr(float(v)) for v in p.country_probs]
        )
    return out.getvalue()


def parse_predictions(text: str) -> list[PredictionSet]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise ManifestError("prediction file is empty")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["id", "age"]:
        raise ManifestError("prediction file must start with columns id, age")
    emo_cols = [h for h in header if h.startswith("e_")]
    cty_cols = [h for h in header if h.startswith("c_")]
    if not emo_cols or not cty_cols:
        raise ManifestError("prediction file needs e_* and c_* columns")
    preds = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        vals = {h: row[i] for i, h in enumerate(header)}
        try:
            preds.append(
                PredictionSet(
                    id=vals["id"],
                    age=float(vals["age"]),
                    emotion=np.array([float(vals[c]) for c in emo_cols]),
                    country_probs=np.array([float(vals[c]) for c in cty_cols]),
                )
            )
        except ValueError as exc:
            raise ManifestError(f"prediction line {lineno}: {exc}") from None
    return preds


def load_predictions(path) -> list[PredictionSet]:
    with open(path, encoding="utf-8") as fh:
        return parse_predictions(fh.read())


def save_predictions(path, preds: Sequence[PredictionSet]) -> None:
    atomic_write_text(path, serialize_predictions(preds))
