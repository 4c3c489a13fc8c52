"""Voxel-wise standardisation and wrap-around padding.

Subjects have different voxel counts. Each subject's records are z-scored with
that subject's training statistics, then cyclically extended to a common length
``L`` (a multiple of the patch size). The padding plan records, for every
synthetic position, which real voxel it copies so attribution can fold scores
back onto real voxels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .autograd.io import load_tensor, save_tensor
from .exceptions import ConfigError, DataError, StatsError
from .synth import VoxelRecord, average_repetitions

STD_FLOOR = 1e-8


@dataclass
class StandardizationStats:
    mean: dict[int, np.ndarray]
    std: dict[int, np.ndarray]

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        subjects = sorted(self.mean)
        for s in subjects:
            save_tensor(d / f"stats_mean_s{s}.mkt", self.mean[s])
            save_tensor(d / f"stats_std_s{s}.mkt", self.std[s])
        (d / "stats.json").write_text(json.dumps({"subjects": subjects}) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "StandardizationStats":
        d = Path(directory)
        subjects = json.loads((d / "stats.json").read_text())["subjects"]
        return cls({s: load_tensor(d / f"stats_mean_s{s}.mkt") for s in subjects},
                   {s: load_tensor(d / f"stats_std_s{s}.mkt") for s in subjects})


def fit_standardization(train_records: list[VoxelRecord]) -> StandardizationStats:
    """Per-subject, per-voxel mean and population std (floored at 1e-8)."""
    by_subject: dict[int, list[np.ndarray]] = {}
    for rec in train_records:
        by_subject.setdefault(rec.subject_id, []).append(rec.voxels)
    mean, std = {}, {}
    for s in sorted(by_subject):
        rows = by_subject[s]
        if len(rows) < 2:
            raise StatsError(f"subject {s} has {len(rows)} training record(s); need at least 2")
        if len({r.shape for r in rows}) != 1:
            raise DataError(f"subject {s}: training records differ in length")
        X = np.stack(rows)
        mean[s] = X.mean(axis=0)
        std[s] = np.maximum(X.std(axis=0), STD_FLOOR)
    return StandardizationStats(mean, std)


def _stats_for(record: VoxelRecord, stats: StandardizationStats) -> tuple[np.ndarray, np.ndarray]:
    if record.subject_id not in stats.mean:
        raise DataError(f"no standardization stats for subject {record.subject_id}")
    mu, sd = stats.mean[record.subject_id], stats.std[record.subject_id]
    if record.voxels.shape != mu.shape:
        raise DataError(
            f"subject {record.subject_id}: record length {record.voxels.size} != stats length {mu.size}")
    return mu, sd


def apply_standardization(record: VoxelRecord, stats: StandardizationStats) -> VoxelRecord:
    mu, sd = _stats_for(record, stats)
    return VoxelRecord(record.subject_id, record.stimulus_id, (record.voxels - mu) / sd,
                       record.labels, record.repetition)


def invert_standardization(record: VoxelRecord, stats: StandardizationStats) -> VoxelRecord:
    mu, sd = _stats_for(record, stats)
    return VoxelRecord(record.subject_id, record.stimulus_id, record.voxels * sd + mu,
                       record.labels, record.repetition)


@dataclass(frozen=True)
class PaddingPlan:
    source_length: int
    target_length: int
    origin: np.ndarray = field(repr=False)   # origin[j - L_s] = source index of padded slot j

    @property
    def origin_map(self) -> dict[int, int]:
        return {self.source_length + k: int(o) for k, o in enumerate(self.origin)}


def compute_target_length(lengths, patch_size: int) -> int:
    """Smallest multiple of ``patch_size`` that is >= every length."""
    lengths = list(lengths)
    if not lengths:
        raise ConfigError("compute_target_length needs at least one length")
    if patch_size <= 0:
        raise ConfigError("patch_size must be positive")
    m = max(lengths)
    return -(-m // patch_size) * patch_size


def make_padding_plan(source_length: int, target_length: int, patch_size: int) -> PaddingPlan:
    if target_length < source_length:
        raise ConfigError(f"target length {target_length} < source length {source_length}")
    if target_length % patch_size:
        raise ConfigError(f"target length {target_length} is not divisible by patch size {patch_size}")
    origin = np.arange(source_length, target_length) % source_length
    return PaddingPlan(source_length, target_length, origin)


def pad_wraparound(voxels, target_length: int, patch_size: int) -> tuple[np.ndarray, PaddingPlan]:
    voxels = np.asarray(voxels, dtype=np.float64)
    plan = make_padding_plan(voxels.size, target_length, patch_size)
    return voxels[np.arange(target_length) % voxels.size], plan


class VoxelStandardizer(TransformerMixin, BaseEstimator):
    """Record-level z-scoring with statistics from the training split."""

    def fit(self, records, y=None):
        self.stats_ = fit_standardization(records)
        return self

    def _check(self):
        if not hasattr(self, "stats_"):
            raise NotFittedError("VoxelStandardizer is not fitted")

    def transform(self, records):
        self._check()
        return [apply_standardization(r, self.stats_) for r in records]

    def inverse_transform(self, records):
        self._check()
        return [invert_standardization(r, self.stats_) for r in records]


class WrapAroundPadder(TransformerMixin, BaseEstimator):
    """Pads records to a shared length; ``fit`` picks the length from the data."""

    def __init__(self, patch_size: int = 16, target_length: int | None = None):
        self.patch_size = patch_size
        self.target_length = target_length

    def fit(self, records, y=None):
        lengths = [r.voxels.size for r in records]
        L = compute_target_length(lengths, self.patch_size)
        if self.target_length is not None:
            if self.target_length < L:
                raise ConfigError(f"target_length {self.target_length} shorter than longest record {L}")
            L = self.target_length
        self.target_length_ = L
        return self

    def transform(self, records) -> np.ndarray:
        if not hasattr(self, "target_length_"):
            raise NotFittedError("WrapAroundPadder is not fitted")
        return np.stack([pad_wraparound(r.voxels, self.target_length_, self.patch_size)[0]
                         for r in records]) if records else np.zeros((0, self.target_length_))

    def plan_for(self, source_length: int) -> PaddingPlan:
        return make_padding_plan(source_length, self.target_length_, self.patch_size)


@dataclass
class PreparedData:
    """Model-ready arrays for one split."""

    X: np.ndarray            # M x L padded, standardised voxels
    subjects: np.ndarray     # M
    labels: np.ndarray       # M x C
    stimuli: np.ndarray      # M
    vision: np.ndarray       # M x N_x x d_x (zeros when no vision features)
    lengths: dict[int, int]  # true voxel count per subject

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "PreparedData":
        return PreparedData(self.X[idx], self.subjects[idx], self.labels[idx],
                            self.stimuli[idx], self.vision[idx], self.lengths)


class Preprocessor(BaseEstimator):
    """Average repetitions, standardise per subject, wrap-pad to a shared length."""

    def __init__(self, patch_size: int = 16, target_length: int | None = None):
        self.patch_size = patch_size
        self.target_length = target_length

    def fit(self, train_records, y=None):
        averaged = average_repetitions(train_records)
        self.standardizer_ = VoxelStandardizer().fit(averaged)
        self.padder_ = WrapAroundPadder(self.patch_size, self.target_length).fit(averaged)
        self.lengths_ = {}
        for r in averaged:
            self.lengths_.setdefault(r.subject_id, r.voxels.size)
        return self

    def transform(self, records, vision: dict[int, np.ndarray] | None = None) -> PreparedData:
        if not hasattr(self, "padder_"):
            raise NotFittedError("Preprocessor is not fitted")
        recs = self.standardizer_.transform(average_repetitions(records))
        X = self.padder_.transform(recs)
        subjects = np.array([r.subject_id for r in recs], dtype=np.int64)
        labels = np.stack([r.labels for r in recs]) if recs else np.zeros((0, 0))
        stimuli = np.array([r.stimulus_id for r in recs], dtype=np.int64)
        if vision:
            any_v = next(iter(vision.values()))
            missing = [int(s) for s in stimuli if int(s) not in vision]
            if missing:
                raise DataError(f"vision features missing for stimuli {missing[:5]}")
            V = np.stack([vision[int(s)] for s in stimuli]) if recs else np.zeros((0,) + any_v.shape)
        else:
            V = np.zeros((len(recs), 1, 1))
        return PreparedData(X, subjects, labels, stimuli, V, dict(self.lengths_))

    def plan_for_subject(self, subject_id: int) -> PaddingPlan:
        return self.padder_.plan_for(self.lengths_[subject_id])

    @property
    def target_length_(self) -> int:
        return self.padder_.target_length_

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        self.standardizer_.stats_.save(d)
        meta = {"patch_size": self.patch_size, "target_length": self.target_length_,
                "lengths": {str(k): v for k, v in sorted(self.lengths_.items())}}
        (d / "preprocess.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Preprocessor":
        d = Path(directory)
        meta = json.loads((d / "preprocess.json").read_text())
        pre = cls(meta["patch_size"], meta["target_length"])
        pre.standardizer_ = VoxelStandardizer()
        pre.standardizer_.stats_ = StandardizationStats.load(d)
        pre.padder_ = WrapAroundPadder(meta["patch_size"], meta["target_length"])
        pre.padder_.target_length_ = meta["target_length"]
        pre.lengths_ = {int(k): int(v) for k, v in meta["lengths"].items()}
        return pre
