"""Synthetic multi-subject voxel data with a known linear subject/object mixing.

Each trial's latent is ``l = (u_s, o_y)``: a fixed per-subject embedding next to
an object code summed from the active classes. A shared random orthonormal
``Q`` entangles the two parts and a subject-specific expansion ``W_s`` maps the
result to that subject's voxel count::

    voxels = W_s @ Q @ l + noise

``W_s`` is a random Gaussian map passed through a subject-specific spatial
filter along the voxel axis, so subjects differ in voxel-level correlation
structure as well as in their loadings. Vision tokens are a frozen linear
read-out of ``o_y`` and stand in for a pretrained image encoder.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd.io import load_tensor, save_tensor
from .exceptions import ConfigError, DataError


@dataclass(frozen=True)
class GeneratorConfig:
    num_subjects: int = 4
    num_classes: int = 8
    voxel_lengths: tuple[int, ...] | None = None
    base_length: int = 464
    length_jitter: float = 0.10
    subject_dim: int = 8
    object_dim: int = 16
    subject_scale: float = 1.0
    object_scale: float = 1.0
    label_density: float = 0.3
    noise_std: float = 0.1
    train_stimuli_per_subject: int = 500
    test_stimuli: int = 100
    repetitions: int = 3
    vision_tokens: int = 17
    vision_dim: int = 32
    vision_jitter: float = 0.1
    filter_width: int = 9
    inject_class: int = -1
    inject_start: int = 0
    inject_width: int = 0
    inject_amplitude: float = 1.0
    seed: int = 0

    @property
    def latent_dim(self) -> int:
        return self.subject_dim + self.object_dim

    def lengths(self, rng: np.random.Generator | None = None) -> tuple[int, ...]:
        if self.voxel_lengths is not None:
            return tuple(int(n) for n in self.voxel_lengths)
        rng = rng or np.random.default_rng(self.seed)
        lo = int(np.floor(self.base_length * (1.0 - self.length_jitter)))
        hi = int(np.floor(self.base_length * (1.0 + self.length_jitter)))
        return tuple(int(n) for n in rng.integers(lo, hi + 1, size=self.num_subjects))

    def validate(self) -> None:
        if self.num_subjects < 1 or self.num_classes < 1:
            raise ConfigError("num_subjects and num_classes must be positive")
        if self.object_dim < self.num_classes:
            raise ConfigError(
                f"object_dim={self.object_dim} < num_classes={self.num_classes}: "
                "class codes need one orthonormal direction each")
        if self.subject_dim < 1:
            raise ConfigError("subject_dim must be positive")
        if not 0.0 < self.label_density < 1.0:
            raise ConfigError("label_density must lie in (0, 1)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.voxel_lengths is not None:
            if len(self.voxel_lengths) != self.num_subjects:
                raise ConfigError("voxel_lengths needs one entry per subject")
            if min(self.voxel_lengths) < self.latent_dim:
                raise ConfigError("every voxel length must be >= latent_dim (full-rank expansion)")
        elif self.base_length * (1.0 - self.length_jitter) < self.latent_dim:
            raise ConfigError("base_length too small for a full-rank expansion")
        if self.inject_class >= 0:
            if self.inject_class >= self.num_classes:
                raise ConfigError("inject_class out of range")
            if self.inject_width <= 0:
                raise ConfigError("inject_width must be positive when inject_class is set")


@dataclass
class VoxelRecord:
    subject_id: int
    stimulus_id: int
    voxels: np.ndarray
    labels: np.ndarray
    repetition: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelRecord):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.stimulus_id == other.stimulus_id
                and self.repetition == other.repetition
                and np.array_equal(self.voxels, other.voxels)
                and np.array_equal(self.labels, other.labels))


@dataclass
class GroundTruth:
    mixing: np.ndarray                 # Q, latent_dim x latent_dim
    expansions: list[np.ndarray]       # W_s, L_s x latent_dim
    subject_codes: np.ndarray          # u_s rows
    class_codes: np.ndarray            # C x object_dim, orthonormal rows
    vision_projection: np.ndarray      # object_dim x vision_dim
    vision_offsets: np.ndarray         # vision_tokens x vision_dim
    lengths: tuple[int, ...]
    inject_patterns: list[np.ndarray] = field(default_factory=list)


@dataclass
class SyntheticDataset:
    train: list[VoxelRecord]
    test: list[VoxelRecord]
    vision: dict[int, np.ndarray]
    ground_truth: GroundTruth
    config: GeneratorConfig


def random_orthonormal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _spatial_kernel(subject: int, num_subjects: int, width: int) -> np.ndarray:
    # subject s gets a Gaussian-windowed cosine at its own spatial frequency
    freq = 0.5 * subject / max(num_subjects - 1, 1)
    half = width // 2
    j = np.arange(-half, half + 1, dtype=np.float64)
    k = np.cos(2.0 * np.pi * freq * j) * np.exp(-0.5 * (j / max(half / 2.0, 1.0)) ** 2)
    return k / np.linalg.norm(k)


def _circular_filter(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = len(kernel) // 2
    out = np.zeros_like(g)
    for i, w in enumerate(kernel):
        out += w * np.roll(g, i - half, axis=0)
    return out


def generate_dataset(cfg: GeneratorConfig) -> SyntheticDataset:
    """Draw a train/test split plus vision tokens; a pure function of ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lengths = cfg.lengths(rng)
    if cfg.inject_class >= 0 and cfg.inject_start + cfg.inject_width > min(lengths):
        raise ConfigError("injected voxel range exceeds the shortest subject")
    S, C, dl = cfg.num_subjects, cfg.num_classes, cfg.latent_dim

    Q = random_orthonormal(dl, rng)
    class_codes = random_orthonormal(cfg.object_dim, rng)[:C]
    subject_codes = cfg.subject_scale * rng.standard_normal((S, cfg.subject_dim))
    expansions = []
    for s, n in enumerate(lengths):
        g = rng.standard_normal((n, dl)) / np.sqrt(dl)
        if cfg.filter_width > 1:
            g = _circular_filter(g, _spatial_kernel(s, S, cfg.filter_width))
        expansions.append(g)
    vision_projection = rng.standard_normal((cfg.object_dim, cfg.vision_dim)) / np.sqrt(cfg.object_dim)
    vision_offsets = cfg.vision_jitter * rng.standard_normal((cfg.vision_tokens, cfg.vision_dim))
    inject_patterns = []
    if cfg.inject_class >= 0:
        inject_patterns = [rng.choice([-1.0, 1.0], size=cfg.inject_width) for _ in range(S)]

    n_train = cfg.train_stimuli_per_subject
    train_labels = (rng.random((S, n_train, C)) < cfg.label_density).astype(np.float64)
    test_labels = (rng.random((cfg.test_stimuli, C)) < cfg.label_density).astype(np.float64)

    def object_code(y: np.ndarray) -> np.ndarray:
        y_mix = y.copy()
        if cfg.inject_class >= 0:
            y_mix[cfg.inject_class] = 0.0
        return cfg.object_scale * (y_mix @ class_codes)

    def trial(s: int, y: np.ndarray, noise_rng: np.random.Generator) -> np.ndarray:
        latent = np.concatenate([subject_codes[s], object_code(y)])
        v = expansions[s] @ (Q @ latent)
        if cfg.inject_class >= 0 and y[cfg.inject_class]:
            sl = slice(cfg.inject_start, cfg.inject_start + cfg.inject_width)
            v[sl] += cfg.inject_amplitude * inject_patterns[s]
        if cfg.noise_std > 0:
            v = v + cfg.noise_std * noise_rng.standard_normal(v.shape)
        return v

    vision: dict[int, np.ndarray] = {}

    def vision_tokens(y: np.ndarray) -> np.ndarray:
        code = cfg.object_scale * (y @ class_codes)
        return code @ vision_projection + vision_offsets

    train: list[VoxelRecord] = []
    for s in range(S):
        for i in range(n_train):
            stim = s * n_train + i
            y = train_labels[s, i]
            vision[stim] = vision_tokens(y)
            for r in range(cfg.repetitions):
                train.append(VoxelRecord(s, stim, trial(s, y, rng), y.copy(), r))
    test: list[VoxelRecord] = []
    base = S * n_train
    for j in range(cfg.test_stimuli):
        stim = base + j
        y = test_labels[j]
        vision[stim] = vision_tokens(y)
        for s in range(S):
            for r in range(cfg.repetitions):
                test.append(VoxelRecord(s, stim, trial(s, y, rng), y.copy(), r))

    truth = GroundTruth(Q, expansions, subject_codes, class_codes, vision_projection,
                        vision_offsets, lengths, inject_patterns)
    return SyntheticDataset(train, test, vision, truth, cfg)


def average_repetitions(records: list[VoxelRecord]) -> list[VoxelRecord]:
    """Collapse repetitions to one record per (subject, stimulus), in first-seen order."""
    groups: dict[tuple[int, int], list[VoxelRecord]] = {}
    for rec in records:
        groups.setdefault((rec.subject_id, rec.stimulus_id), []).append(rec)
    out = []
    for (s, stim), recs in groups.items():
        first = recs[0]
        for r in recs[1:]:
            if not np.array_equal(r.labels, first.labels):
                raise DataError(f"subject {s} stimulus {stim}: repetitions disagree on labels")
            if r.voxels.shape != first.voxels.shape:
                raise DataError(f"subject {s} stimulus {stim}: repetitions differ in length")
        if len(recs) == 1:
            voxels = first.voxels.copy()
        else:
            voxels = np.mean(np.stack([r.voxels for r in recs]), axis=0)
        out.append(VoxelRecord(s, stim, voxels, first.labels.copy(), 0))
    return out


# ---------------------------------------------------------------- on-disk layout

MANIFEST_FIELDS = ["subject_id", "stimulus_id", "labels", "tensor_file", "repetition"]


def encode_labels(y: np.ndarray) -> str:
    return ";".join(str(i) for i in np.flatnonzero(np.asarray(y) > 0))


def decode_labels(text: str, num_classes: int) -> np.ndarray:
    y = np.zeros(num_classes)
    text = text.strip()
    if not text:
        return y
    for tok in text.split(";"):
        c = int(tok)
        if not 0 <= c < num_classes:
            raise DataError(f"label id {c} outside [0, {num_classes})")
        y[c] = 1.0
    return y


def write_records(root: str | os.PathLike, records: list[VoxelRecord],
                  manifest: str = "manifest.csv") -> None:
    root = Path(root)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    with open(root / manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for rec in records:
            name = f"tensors/s{rec.subject_id}_x{rec.stimulus_id}_r{rec.repetition}.mkt"
            save_tensor(root / name, rec.voxels)
            w.writerow([rec.subject_id, rec.stimulus_id, encode_labels(rec.labels), name, rec.repetition])


def load_voxel_dataset(root: str | os.PathLike, manifest: str = "manifest.csv",
                       num_classes: int | None = None) -> list[VoxelRecord]:
    """Read a manifest and its MKT1 files into validated records.

    ``num_classes`` defaults to the ``num_classes`` field of ``meta.json`` found
    in ``root`` or its parent.
    """
    root = Path(root)
    path = root / manifest
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    if num_classes is None:
        num_classes = _meta_num_classes(root)
    records: list[VoxelRecord] = []
    lengths: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            tensor_path = root / row["tensor_file"]
            if not tensor_path.exists():
                raise FileNotFoundError(f"tensor file not found: {tensor_path}")
            voxels = load_tensor(tensor_path)
            if voxels.ndim != 1:
                raise DataError(f"{tensor_path}: expected a 1-D voxel vector, got shape {voxels.shape}")
            s = int(row["subject_id"])
            if lengths.setdefault(s, voxels.size) != voxels.size:
                raise DataError(
                    f"subject {s}: voxel length {voxels.size} in {row['tensor_file']} "
                    f"disagrees with earlier length {lengths[s]}")
            records.append(VoxelRecord(s, int(row["stimulus_id"]), voxels,
                                       decode_labels(row["labels"], num_classes),
                                       int(row.get("repetition") or 0)))
    return records


def _meta_num_classes(root: Path) -> int:
    for cand in (root / "meta.json", root.parent / "meta.json"):
        if cand.exists():
            return int(json.loads(cand.read_text())["num_classes"])
    raise DataError(f"num_classes not given and no meta.json near {root}")


def write_dataset(root: str | os.PathLike, ds: SyntheticDataset) -> Path:
    """Write ``train/``, ``test/``, ``vision/`` and ``meta.json`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_records(root / "train", ds.train)
    write_records(root / "test", ds.test)
    (root / "vision").mkdir(exist_ok=True)
    with open(root / "vision" / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stimulus_id", "tensor_file"])
        for stim in sorted(ds.vision):
            name = f"x{stim}.mkt"
            save_tensor(root / "vision" / name, ds.vision[stim])
            w.writerow([stim, name])
    cfg = asdict(ds.config)
    if cfg["voxel_lengths"] is not None:
        cfg["voxel_lengths"] = list(cfg["voxel_lengths"])
    meta = {
        "num_subjects": ds.config.num_subjects,
        "num_classes": ds.config.num_classes,
        "lengths": list(ds.ground_truth.lengths),
        "generator": cfg,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_vision(root: str | os.PathLike) -> dict[int, np.ndarray]:
    root = Path(root) / "vision"
    out: dict[int, np.ndarray] = {}
    path = root / "manifest.csv"
    if not path.exists():
        return out
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["stimulus_id"])] = load_tensor(root / row["tensor_file"])
    return out


def read_dataset_dir(root: str | os.PathLike):
    """Return ``(train, test, vision, meta)`` for a directory made by :func:`write_dataset`."""
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    c = int(meta["num_classes"])
    return (load_voxel_dataset(root / "train", num_classes=c),
            load_voxel_dataset(root / "test", num_classes=c),
            load_vision(root), meta)
