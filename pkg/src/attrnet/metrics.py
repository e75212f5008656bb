"""Sigmoid cross-entropy, thresholding, accuracy and the majority baseline.

Undefined fractions (an attribute with no labelled rows) are reported as
``nan``; callers must not confuse them with zero accuracy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError

UNDEFINED = float("nan")


@dataclass
class LabelMatrix:
    """Binary labels ``[N, A]`` with a presence mask (1 = label known)."""

    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionError(f"labels must be [N, A], got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        mask = np.ones_like(values, dtype=np.uint8) if self.mask is None else np.asarray(self.mask)
        if mask.shape != values.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match labels {values.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise DataError("label mask must be 0 or 1")
        self.values = values.astype(np.uint8)
        self.mask = mask.astype(np.uint8)

    @property
    def shape(self):
        return self.values.shape

    def rows(self, idx):
        return LabelMatrix(self.values[idx], self.mask[idx])


def _labels(labels):
    return labels if isinstance(labels, LabelMatrix) else LabelMatrix(labels)


def sigmoid_ce(scores, labels):
    """Mean-over-batch, summed-over-attributes sigmoid cross-entropy.

    Returns ``(loss, grad_scores)``. Uses ``max(s,0) - s*y + log(1+exp(-|s|))``
    per element; masked-out entries contribute neither loss nor gradient.
    """
    labels = _labels(labels)
    scores = np.asarray(scores)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n = scores.shape[0]
    y = labels.values.astype(scores.dtype)
    m = labels.mask.astype(scores.dtype)
    per = np.maximum(scores, 0) - scores * y + np.log1p(np.exp(-np.abs(scores)))
    loss = float(np.sum(per * m)) / n
    sig = 0.5 * (1.0 + np.tanh(0.5 * scores))
    grad = (sig - y) * m / n
    return loss, grad.astype(scores.dtype, copy=False)


def threshold(scores):
    """1 where score >= 0 (sigmoid >= 0.5), else 0."""
    return (np.asarray(scores) >= 0).astype(np.uint8)


def accuracy(predictions, labels):
    """Per-attribute fraction of labelled rows predicted correctly (nan if none)."""
    labels = _labels(labels)
    predictions = np.asarray(predictions)
    if predictions.shape != labels.shape:
        raise DimensionError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    hits = ((predictions == labels.values) & (labels.mask == 1)).sum(axis=0)
    counts = labels.mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return acc.astype(np.float64)


def majority_labels(train_labels):
    """Most common training label per attribute; ties go to 0, empty columns to -1."""
    train_labels = _labels(train_labels)
    ones = ((train_labels.values == 1) & (train_labels.mask == 1)).sum(axis=0)
    counts = train_labels.mask.sum(axis=0)
    maj = (ones * 2 > counts).astype(np.int64)
    maj[counts == 0] = -1
    return maj


def majority_baseline(train_labels, test_labels):
    test_labels = _labels(test_labels)
    maj = majority_labels(train_labels)
    hits = ((test_labels.values == maj[None, :]) & (test_labels.mask == 1)).sum(axis=0)
    counts = test_labels.mask.sum(axis=0)
    defined = (counts > 0) & (maj >= 0)
    return np.where(defined, hits / np.maximum(counts, 1), np.nan).astype(np.float64)


def nanmean(values):
    values = np.asarray(values, dtype=np.float64)
    finite = values[~np.isnan(values)]
    return float(finite.mean()) if finite.size else UNDEFINED


@dataclass
class MetricsReport:
    attributes: List[str]
    per_attribute_accuracy: np.ndarray
    baseline_accuracy: np.ndarray
    loss: float
    mean_accuracy: float = field(default=UNDEFINED)

    def __post_init__(self):
        self.per_attribute_accuracy = np.asarray(self.per_attribute_accuracy, dtype=np.float64)
        self.baseline_accuracy = np.asarray(self.baseline_accuracy, dtype=np.float64)
        if np.isnan(self.mean_accuracy):
            self.mean_accuracy = nanmean(self.per_attribute_accuracy)

    def write_csv(self, path):
        """Columns: ``metric``, one per attribute, ``mean``, ``loss``.

        Rows are ``accuracy`` and ``baseline``; undefined values are written
        as ``undefined`` and the baseline row leaves ``loss`` empty.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric"] + list(self.attributes) + ["mean", "loss"])
            w.writerow(["accuracy"] + [_fmt(v) for v in self.per_attribute_accuracy]
                       + [_fmt(self.mean_accuracy), _fmt(self.loss)])
            w.writerow(["baseline"] + [_fmt(v) for v in self.baseline_accuracy]
                       + [_fmt(nanmean(self.baseline_accuracy)), ""])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, acc, base = rows[0], rows[1], rows[2]
        attrs = header[1:-2]
        return cls(
            attributes=attrs,
            per_attribute_accuracy=np.array([_parse(v) for v in acc[1:-2]]),
            baseline_accuracy=np.array([_parse(v) for v in base[1:-2]]),
            loss=_parse(acc[-1]),
            mean_accuracy=_parse(acc[-2]),
        )


def _fmt(v):
    return "undefined" if v is None or np.isnan(v) else repr(float(v))


def _parse(s):
    return float("nan") if s in ("undefined", "") else float(s)
