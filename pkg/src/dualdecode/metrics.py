"""Multi-label and multiclass evaluation metrics."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import DimensionError, MetricError, ValidationError


def _as_2d(scores, targets):
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.ndim == 1:
        scores, targets = scores[:, None], targets[:, None]
    if scores.shape != targets.shape:
        raise DimensionError(f"scores {scores.shape} and targets {targets.shape} differ")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValidationError("targets must be binary")
    return scores, targets


def average_precision(scores, targets) -> float:
    """Mean of precision at the rank of every positive (no interpolation).

    Tied scores are ordered by index, the convention of a stable sort on
    descending score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    hits = targets[order]
    n_pos = hits.sum()
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    cum = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    return float(np.sum((cum / ranks) * hits) / n_pos)


def mean_average_precision(scores, targets):
    """Returns ``(mAP, per_class_ap)``; classes without positives get NaN and are skipped."""
    scores, targets = _as_2d(scores, targets)
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if targets[:, c].sum() > 0:
            per_class[c] = average_precision(scores[:, c], targets[:, c])
    if np.all(np.isnan(per_class)):
        raise MetricError("no class has a positive target; mAP is undefined")
    return float(np.nanmean(per_class)), per_class


def _auc_binary(scores: np.ndarray, targets: np.ndarray) -> float:
    pos = targets == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, targets, average: str = "macro"):
    """Mann-Whitney AUC with mid-ranks for ties.

    ``average="macro"`` returns ``(mean over evaluable classes, per_class)``;
    ``"micro"`` pools every entry into one binary problem.
    """
    scores, targets = _as_2d(scores, targets)
    if average == "micro":
        s, t = scores.ravel(), targets.ravel()
        if t.min() == t.max():
            raise MetricError("micro AUC needs both positives and negatives")
        auc = _auc_binary(s, t)
        return auc, np.array([auc])
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        t = targets[:, c]
        if 0 < t.sum() < t.size:
            per_class[c] = _auc_binary(scores[:, c], t)
    if np.all(np.isnan(per_class)):
        raise MetricError("no class has both positives and negatives; AUC is undefined")
    return float(np.nanmean(per_class)), per_class


def hamming_distance(pred_binary, targets) -> float:
    pred = np.asarray(pred_binary, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if pred.shape != targets.shape:
        raise DimensionError(f"predictions {pred.shape} and targets {targets.shape} differ")
    for arr, name in ((pred, "predictions"), (targets, "targets")):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{name} must be binary")
    return float(np.mean(pred != targets))


def accuracy(true_class, pred_class) -> float:
    true_class, pred_class = np.asarray(true_class), np.asarray(pred_class)
    if true_class.shape != pred_class.shape:
        raise DimensionError("accuracy: shapes differ")
    return float(np.mean(true_class == pred_class)) if true_class.size else float("nan")


def confusion_matrix(true_class, pred_class, num_classes: int) -> np.ndarray:
    t = np.asarray(true_class, dtype=np.int64)
    p = np.asarray(pred_class, dtype=np.int64)
    if t.shape != p.shape:
        raise DimensionError("confusion_matrix: shapes differ")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() >= num_classes or p.max() >= num_classes):
        raise ValidationError(f"class labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes))
    np.add.at(cm, (t, p), 1.0)
    return cm


def matthews_corrcoef(pred_class, true_class, num_classes: int) -> float:
    """Multiclass MCC (covariance form). Returns 0 when the denominator vanishes."""
    cm = confusion_matrix(true_class, pred_class, num_classes)
    n = cm.sum()
    correct = np.trace(cm)
    t_k = cm.sum(axis=1)   # true counts
    p_k = cm.sum(axis=0)   # predicted counts
    num = correct * n - np.dot(t_k, p_k)
    den = np.sqrt(n * n - np.dot(p_k, p_k)) * np.sqrt(n * n - np.dot(t_k, t_k))
    if den == 0:
        return 0.0
    return float(num / den)


@dataclass
class EvalReport:
    mAP: float = float("nan")
    AUC: float = float("nan")
    Hamming: float = float("nan")
    ACC: float = float("nan")
    MCC: float = float("nan")
    per_class_ap: list[float] = field(default_factory=list)
    skipped_classes: list[int] = field(default_factory=list)

    def to_json(self, path: str | os.PathLike | None = None) -> str:
        d = asdict(self)
        d["per_class_ap"] = [None if np.isnan(v) else v for v in self.per_class_ap]
        text = json.dumps(d, indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def per_class_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "ap"])
            for c, ap in enumerate(self.per_class_ap):
                w.writerow([c, "" if np.isnan(ap) else repr(float(ap))])


def evaluate(subject_true=None, subject_pred=None, num_subjects=None, label_scores=None,
             label_targets=None, threshold: float = 0.5) -> EvalReport:
    """Build an :class:`EvalReport`; ``label_scores`` are probabilities in [0, 1]."""
    rep = EvalReport()
    if subject_true is not None:
        subject_true = np.asarray(subject_true)
        subject_pred = np.asarray(subject_pred)
        k = num_subjects if num_subjects is not None else int(max(subject_true.max(), subject_pred.max())) + 1
        rep.ACC = accuracy(subject_true, subject_pred)
        rep.MCC = matthews_corrcoef(subject_pred, subject_true, k)
    if label_scores is not None:
        m, per = mean_average_precision(label_scores, label_targets)
        rep.mAP = m
        rep.per_class_ap = [float(v) for v in per]
        rep.skipped_classes = [int(c) for c in np.flatnonzero(np.isnan(per))]
        rep.AUC = roc_auc(label_scores, label_targets)[0]
        rep.Hamming = hamming_distance((np.asarray(label_scores) > threshold).astype(float), label_targets)
    return rep
