"""Accuracy metrics, multi-stream score fusion, and similarity exports.

Score tables hold raw pre-softmax logits, one row per test sample; fusing
several modality streams is an elementwise weighted sum of those tables
(softmax fusion available behind a flag).  CSV layout per row:
score_0, ..., score_{C-1}, label, modality.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import SkeletonBatch
from .encoder import EncoderModel
from .errors import (ConfigError, DataFormatError, DegenerateFeatureError,
                     ShapeError)
from .textbank import TextFeatureBank


@dataclass
class ScoreTable:
    scores: np.ndarray      # [S, C]
    labels: np.ndarray      # [S]
    modality: str

    def __post_init__(self):
        if self.scores.ndim != 2 or len(self.labels) != self.scores.shape[0]:
            raise ShapeError(f"scores {self.scores.shape} vs labels {self.labels.shape}")
        if not np.isfinite(self.scores).all():
            raise ConfigError("non-finite scores")


def score_model(model: EncoderModel, batch: SkeletonBatch, modality: str = "joint",
                batch_size: int = 256) -> ScoreTable:
    """Eval-mode logits for every sample of a batch."""
    chunks = []
    for start in range(0, batch.num_samples, batch_size):
        out = model.forward(batch.data[start:start + batch_size],
                            train=False, compute_parts=False)
        chunks.append(out.logits.astype(np.float64))
    return ScoreTable(scores=np.concatenate(chunks), labels=batch.labels.copy(),
                      modality=modality)


def top1_accuracy(table: ScoreTable) -> float:
    """Fraction of rows whose argmax matches the label (ties -> lowest index)."""
    if table.scores.shape[0] == 0:
        raise ConfigError("empty score table")
    return float((table.scores.argmax(axis=1) == table.labels).mean())


def ensemble_fuse(tables, weights=None, softmax: bool = False) -> ScoreTable:
    """Elementwise weighted sum of score tables sharing labels and shape."""
    tables = list(tables)
    if not tables:
        raise ConfigError("need at least one score table")
    if weights is None:
        weights = [1.0] * len(tables)
    weights = [float(w) for w in weights]
    if len(weights) != len(tables):
        raise ConfigError(f"{len(weights)} weights for {len(tables)} tables")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ConfigError("weights must be nonnegative and not all zero")
    base = tables[0]
    fused = np.zeros_like(base.scores)
    for w, t in zip(weights, tables):
        if t.scores.shape != base.scores.shape:
            raise ShapeError(f"score shape {t.scores.shape} != {base.scores.shape}")
        if not np.array_equal(t.labels, base.labels):
            raise ConfigError(f"label order of modality {t.modality!r} differs")
        s = t.scores
        if softmax:
            z = s - s.max(axis=1, keepdims=True)
            e = np.exp(z)
            s = e / e.sum(axis=1, keepdims=True)
        fused = fused + w * s
    tag = "+".join(t.modality for t in tables)
    return ScoreTable(scores=fused, labels=base.labels.copy(), modality=tag)


def per_class_accuracy(table: ScoreTable) -> np.ndarray:
    num_classes = table.scores.shape[1]
    pred = table.scores.argmax(axis=1)
    acc = np.zeros(num_classes)
    for c in range(num_classes):
        mask = table.labels == c
        acc[c] = (pred[mask] == c).mean() if mask.any() else np.nan
    return acc


def per_class_diff(table_a: ScoreTable, table_b: ScoreTable,
                   threshold: float = 0.04) -> list[tuple[int, float, float]]:
    """Classes whose per-class accuracy differs by more than the threshold.

    Returns (class, acc_a, acc_b) tuples sorted by descending signed
    difference acc_a - acc_b.  The 0.04 default flags differences above
    four accuracy points.
    """
    if not np.array_equal(table_a.labels, table_b.labels):
        raise ConfigError("tables must share labels")
    acc_a = per_class_accuracy(table_a)
    acc_b = per_class_accuracy(table_b)
    rows = [(c, float(acc_a[c]), float(acc_b[c]))
            for c in range(len(acc_a))
            if np.isfinite(acc_a[c]) and abs(acc_a[c] - acc_b[c]) > threshold]
    return sorted(rows, key=lambda r: r[2] - r[1])


def text_similarity_matrix(bank: TextFeatureBank, slot_id: int) -> np.ndarray:
    """Class-by-class cosine matrix of one slot's embeddings.

    Classes with several variants contribute their renormalized variant
    mean.  Symmetric with unit diagonal.
    """
    num_classes = bank.num_classes
    vecs = np.empty((num_classes, bank.dim))
    for c in range(num_classes):
        variants = bank.variants(c, slot_id)  # raises BankLookupError when absent
        mean = np.mean([v.astype(np.float64) for v in variants], axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise DegenerateFeatureError(f"variant mean of class {c} has zero norm")
        vecs[c] = mean / norm
    return np.clip(vecs @ vecs.T, -1.0, 1.0)


# -- CSV round trips ---------------------------------------------------------


def save_scores_csv(table: ScoreTable, path):
    num_classes = table.scores.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"score_{c}" for c in range(num_classes)] + ["label", "modality"])
        for i in range(table.scores.shape[0]):
            writer.writerow([repr(float(v)) for v in table.scores[i]]
                            + [int(table.labels[i]), table.modality])


def load_scores_csv(path) -> ScoreTable:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or len(rows) < 2:
        raise DataFormatError(f"{path}: empty score table")
    header = rows[0]
    if header[-2:] != ["label", "modality"]:
        raise DataFormatError(f"{path}: expected ...,label,modality header, got {header[-2:]}")
    num_classes = len(header) - 2
    scores = np.empty((len(rows) - 1, num_classes))
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    modality = None
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {i + 1} has {len(row)} fields, expected {len(header)}")
        scores[i] = [float(v) for v in row[:num_classes]]
        labels[i] = int(row[num_classes])
        modality = row[num_classes + 1]
    return ScoreTable(scores=scores, labels=labels, modality=modality or "unknown")


def save_similarity_csv(matrix: np.ndarray, class_names, path):
    names = list(class_names) if class_names else [f"class_{i}" for i in range(len(matrix))]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class"] + names)
        for name, row in zip(names, matrix):
            writer.writerow([name] + [repr(float(v)) for v in row])
