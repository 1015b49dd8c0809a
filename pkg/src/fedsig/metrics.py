"""Verification metrics: scores, ROC/FAR/FRR curves, EER, and summaries.

The verification score of a signature is the model's softmax probability of
the genuine class.  The decision rule is fixed project-wide: predict genuine
when ``score >= threshold`` (ties accept), so every number here is exactly
reproducible.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Label, ProcessedSignature
from .ioutil import atomic_write_text
from .layers import softmax
from .network import ModelConfig, ModelParams, forward

__all__ = [
    "ScoreSet",
    "RocCurve",
    "InstanceSummary",
    "score_batch",
    "evaluate",
    "roc_and_eer",
    "accuracy",
    "summarize_instances",
]

_EVAL_CHUNK = 256  # forward-pass chunk; bounds eval memory, not results


@dataclass
class ScoreSet:
    """Per-sample verification scores with labels and user ids."""

    scores: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        if not (self.scores.shape == self.labels.shape == self.user_ids.shape):
            raise ValueError("scores, labels and user_ids must have equal lengths")
        if self.scores.size == 0:
            raise ValueError("a score set cannot be empty")

    def __len__(self) -> int:
        return self.scores.size

    def to_csv(self, path: str | Path) -> None:
        buf = io.StringIO(newline="")
        writer = csv.writer(buf)
        writer.writerow(["user_id", "label", "score"])
        for uid, label, score in zip(self.user_ids, self.labels, self.scores):
            writer.writerow([int(uid), int(label), repr(float(score))])
        atomic_write_text(path, buf.getvalue())

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScoreSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            scores=[float(r["score"]) for r in rows],
            labels=[int(r["label"]) for r in rows],
            user_ids=[int(r["user_id"]) for r in rows],
        )


@dataclass
class RocCurve:
    """FAR/FRR trade-off over candidate thresholds, with the derived EER.

    Thresholds are the midpoints between consecutive distinct scores plus one
    sentinel below and one above all scores; FAR is non-increasing and FRR
    non-decreasing along them.
    """

    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_threshold: float
    accuracy_at_half: float
    accuracy_at_eer: float

    def to_csv(self, path: str | Path) -> None:
        buf = io.StringIO(newline="")
        writer = csv.writer(buf)
        writer.writerow(["threshold", "far", "frr"])
        for t, fa, fr in zip(self.thresholds, self.far, self.frr):
            writer.writerow([repr(float(t)), repr(float(fa)), repr(float(fr))])
        atomic_write_text(path, buf.getvalue())


def score_batch(
    params: ModelParams, signatures: list[ProcessedSignature], config: ModelConfig
) -> ScoreSet:
    """Eval-mode verification scores (probability of genuine) per signature."""
    if not signatures:
        raise ValueError("no signatures to score")
    scores = []
    for start in range(0, len(signatures), _EVAL_CHUNK):
        chunk = signatures[start : start + _EVAL_CHUNK]
        inputs = np.stack([s.channels for s in chunk])
        logits, _, _ = forward(params, inputs, config, train=False)
        scores.append(softmax(logits)[:, Label.GENUINE])
    return ScoreSet(
        scores=np.concatenate(scores),
        labels=np.array([int(s.label) for s in signatures]),
        user_ids=np.array([s.user_id for s in signatures]),
    )


def roc_and_eer(score_set: ScoreSet, eer_method: str = "interpolated") -> RocCurve:
    """Build the FAR/FRR curve and locate the equal error rate.

    FAR(t) is the fraction of forged samples with score >= t, FRR(t) the
    fraction of genuine samples with score < t.  The EER is taken where
    FAR = FRR: by linear interpolation between the two bracketing curve
    points (default), or at the min |FAR - FRR| curve point when
    ``eer_method="discrete"``.
    """
    if eer_method not in ("interpolated", "discrete"):
        raise ValueError(f"unknown eer_method {eer_method!r}")
    labels = score_set.labels
    n_genuine = int((labels == Label.GENUINE).sum())
    n_forged = int((labels == Label.FORGED).sum())
    if n_genuine == 0 or n_forged == 0:
        raise ValueError("ROC needs at least one sample of each class")

    order = np.argsort(score_set.scores, kind="stable")
    sorted_scores = score_set.scores[order]
    sorted_genuine = (labels[order] == Label.GENUINE).astype(np.int64)

    distinct = np.unique(sorted_scores)
    thresholds = np.concatenate(
        [[distinct[0] - 1.0], (distinct[:-1] + distinct[1:]) / 2.0, [distinct[-1] + 1.0]]
    )

    # counts below each threshold, via one pass over the sorted scores
    cum_genuine = np.concatenate([[0], np.cumsum(sorted_genuine)])
    below = np.searchsorted(sorted_scores, thresholds, side="left")
    genuine_below = cum_genuine[below]
    forged_below = below - genuine_below
    frr = genuine_below / n_genuine
    far = (n_forged - forged_below) / n_forged

    diff = far - frr  # non-increasing from +1 to -1 along thresholds
    j = int(np.argmax(diff <= 0))
    if diff[j] == 0.0:
        eer = float(far[j])
        eer_threshold = float(thresholds[j])
    else:
        alpha = diff[j - 1] / (diff[j - 1] - diff[j])
        eer = float(far[j - 1] + alpha * (far[j] - far[j - 1]))
        eer_threshold = float(thresholds[j - 1] + alpha * (thresholds[j] - thresholds[j - 1]))
    if eer_method == "discrete":
        k = int(np.argmin(np.abs(diff)))
        eer = float((far[k] + frr[k]) / 2.0)
        eer_threshold = float(thresholds[k])

    return RocCurve(
        thresholds=thresholds,
        far=far,
        frr=frr,
        eer=eer,
        eer_threshold=eer_threshold,
        accuracy_at_half=accuracy(score_set, 0.5),
        accuracy_at_eer=accuracy(score_set, eer_threshold),
    )


def accuracy(score_set: ScoreSet, threshold: float = 0.5) -> float:
    """Fraction of samples whose thresholded prediction matches the label."""
    predicted = (score_set.scores >= threshold).astype(np.int64)
    return float((predicted == score_set.labels).mean())


def evaluate(
    params: ModelParams, signatures: list[ProcessedSignature], config: ModelConfig
) -> tuple[ScoreSet, RocCurve]:
    scores = score_batch(params, signatures, config)
    return scores, roc_and_eer(scores)


@dataclass
class InstanceSummary:
    """Five-number summary over repeated experiment instances."""

    median: float
    q1: float
    q3: float
    minimum: float
    maximum: float
    count: int
    median_index: int  # instance whose value is closest to the median

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "min": self.minimum,
            "max": self.maximum,
            "count": self.count,
            "median_index": self.median_index,
        }


def summarize_instances(values: list[float]) -> InstanceSummary:
    if not values:
        raise ValueError("no instance values to summarize")
    arr = np.asarray(values, dtype=np.float64)
    median = float(np.median(arr))
    return InstanceSummary(
        median=median,
        q1=float(np.percentile(arr, 25)),
        q3=float(np.percentile(arr, 75)),
        minimum=float(arr.min()),
        maximum=float(arr.max()),
        count=arr.size,
        median_index=int(np.argmin(np.abs(arr - median))),
    )
