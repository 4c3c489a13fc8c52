"""Stage-2 model: biometric and semantic heads over the disentangled token map."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .autograd import (
    AdamW,
    Tensor,
    binary_cross_entropy_with_logits,
    cosine_lr,
    cross_entropy,
    no_grad,
    softmax,
)
from .autograd.io import load_tensor, save_tensor
from .autograd.nn import Linear, Module
from .disentangle import Basis, orthonormal_loss, split
from .exceptions import CheckpointError, ConfigError, DimensionError, NumericalError
from .mae import Encoder, EncoderConfig, MaskedAutoencoder, TrainSchedule, iterate_minibatches, load_state, save_state
from .metrics import accuracy, mean_average_precision

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CrossAttentionConfig:
    heads: int = 4
    query_dim: int = 32
    kv_dim: int = 56
    head_dim: int | None = None

    @property
    def inner_head_dim(self) -> int:
        return self.head_dim if self.head_dim is not None else max(self.kv_dim // self.heads, 1)

    def validate(self) -> None:
        if self.heads < 1 or self.inner_head_dim < 1:
            raise ConfigError("cross-attention needs at least one head of positive width")


class CrossAttention(Module):
    """Multi-head attention with external queries and keys/values from the token map."""

    def __init__(self, cfg: CrossAttentionConfig, rng: np.random.Generator):
        cfg.validate()
        inner = cfg.heads * cfg.inner_head_dim
        self._cfg = cfg
        self.q = Linear(cfg.query_dim, inner, rng)
        self.k = Linear(cfg.kv_dim, inner, rng)
        self.v = Linear(cfg.kv_dim, inner, rng)
        self.out = Linear(inner, cfg.kv_dim, rng)

    def __call__(self, queries: Tensor, tokens: Tensor, attn_out: list | None = None) -> Tensor:
        cfg = self._cfg
        if queries.shape[-1] != cfg.query_dim or tokens.shape[-1] != cfg.kv_dim:
            raise DimensionError(
                f"cross-attention expects queries (..., {cfg.query_dim}) and tokens (..., {cfg.kv_dim}); "
                f"got {queries.shape} and {tokens.shape}")
        B, Nq = queries.shape[:2]
        Nk = tokens.shape[1]
        h, hd = cfg.heads, cfg.inner_head_dim
        q = self.q(queries).reshape(B, Nq, h, hd).transpose(0, 2, 1, 3)
        k = self.k(tokens).reshape(B, Nk, h, hd).transpose(0, 2, 1, 3)
        v = self.v(tokens).reshape(B, Nk, h, hd).transpose(0, 2, 1, 3)
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd)), axis=-1)
        if attn_out is not None:
            attn_out.append(attn.data)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Nq, h * hd)
        return self.out(ctx)


def cross_attend(F_x, Z_obj, module: CrossAttention) -> Tensor:
    """Queries from vision tokens, keys and values from the object token map."""
    F_x = F_x if isinstance(F_x, Tensor) else Tensor(F_x)
    Z_obj = Z_obj if isinstance(Z_obj, Tensor) else Tensor(Z_obj)
    squeeze = F_x.ndim == 2
    if squeeze:
        F_x, Z_obj = F_x.reshape(1, *F_x.shape), Z_obj.reshape(1, *Z_obj.shape)
    out = module(F_x, Z_obj)
    return out[0] if squeeze else out


def global_average_pool(Z: Tensor) -> Tensor:
    """Mean over the token axis (second to last)."""
    return Z.mean(axis=-2)


def _classify_pooled(Z: Tensor, classifier: Linear) -> Tensor:
    pooled = global_average_pool(Z)
    if pooled.ndim == 1:
        return classifier(pooled.reshape(1, -1)).reshape(-1)
    return classifier(pooled)


def biometric_head(Z_subj: Tensor, classifier: Linear) -> Tensor:
    if Z_subj.shape[-1] != classifier.weight.shape[0]:
        raise DimensionError(
            f"subject map has {Z_subj.shape[-1]} channels, classifier expects {classifier.weight.shape[0]}")
    return _classify_pooled(Z_subj, classifier)


def semantic_head(Z_fused: Tensor, classifier: Linear) -> Tensor:
    if Z_fused.shape[-1] != classifier.weight.shape[0]:
        raise DimensionError(
            f"object map has {Z_fused.shape[-1]} channels, classifier expects {classifier.weight.shape[0]}")
    return _classify_pooled(Z_fused, classifier)


def semantic_head_fmri_only(Z_obj: Tensor, classifier: Linear) -> Tensor:
    return semantic_head(Z_obj, classifier)


@dataclass
class LossBreakdown:
    subject: Tensor
    object: Tensor
    orth: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"L_subj": self.subject.item(), "L_obj": self.object.item(),
                "L_orth": self.orth.item(), "total": self.total.item()}


def total_loss(subject_logits: Tensor, object_logits: Tensor, subject_ids, labels,
               basis: Basis, orth_weight: float = 0.1, use_subject_loss: bool = True,
               use_orth_loss: bool = True) -> LossBreakdown:
    """``L_subj + L_obj + lambda * L_orth``, with either extra term switchable off."""
    if orth_weight < 0:
        raise ConfigError("orth_weight must be >= 0")
    l_subj = cross_entropy(subject_logits, subject_ids)
    l_obj = binary_cross_entropy_with_logits(object_logits, labels)
    l_orth = orthonormal_loss(basis)
    total = l_obj
    if use_subject_loss:
        total = total + l_subj
    if use_orth_loss:
        total = total + l_orth * orth_weight
    return LossBreakdown(l_subj, l_obj, l_orth, total)


@dataclass(frozen=True)
class DecoderConfig:
    num_subjects: int = 4
    num_classes: int = 8
    d_obj: int | None = None
    heads: int = 4
    vision_dim: int = 32
    use_cross_attention: bool = True
    use_subject_loss: bool = True
    use_orth_loss: bool = True
    orth_weight: float = 0.1

    def object_dim(self, d: int) -> int:
        d_obj = self.d_obj if self.d_obj is not None else int(round(0.875 * d))
        if not 0 < d_obj < d:
            raise ConfigError(f"d_obj={d_obj} must lie strictly between 0 and d={d}")
        return d_obj


class DualDecoderNet(Module):
    def __init__(self, encoder: Encoder, cfg: DecoderConfig, rng: np.random.Generator):
        d = encoder._cfg.dim
        d_obj = cfg.object_dim(d)
        self._cfg = cfg
        self.encoder = encoder
        self._basis = Basis.random(d, d_obj, rng)
        self.basis = self._basis.B
        self.subject_classifier = Linear(d - d_obj, cfg.num_subjects, rng)
        self.cross = CrossAttention(
            CrossAttentionConfig(cfg.heads, cfg.vision_dim, d_obj), rng) if cfg.use_cross_attention else None
        self.object_classifier = Linear(d_obj, cfg.num_classes, rng)

    @property
    def basis_obj(self) -> Basis:
        self._basis.B = self.basis
        return self._basis

    def object_logits_from(self, Z_obj: Tensor, vision) -> Tensor:
        if self.cross is not None:
            return semantic_head(self.cross(Tensor(vision), Z_obj), self.object_classifier)
        return semantic_head_fmri_only(Z_obj, self.object_classifier)

    def forward(self, X: np.ndarray, vision=None, attn_out: list | None = None):
        F = self.encoder(X, attn_out)
        parts = split(F, self.basis_obj)
        subj = biometric_head(parts.Z_subj, self.subject_classifier)
        obj = self.object_logits_from(parts.Z_obj, vision)
        return subj, obj, parts


def _batch_vision(vision, idx):
    return None if vision is None else vision[idx]


def evaluate_net(net: DualDecoderNet, X, vision, batch_size: int = 200):
    subj, obj = [], []
    with no_grad():
        for start in range(0, X.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            s, o, _ = net.forward(X[sl], None if vision is None else vision[sl])
            subj.append(s.data)
            obj.append(o.data)
    return np.concatenate(subj), np.concatenate(obj)


def train_stage2(X, subjects, labels, vision, encoder: Encoder, cfg: DecoderConfig,
                 schedule: TrainSchedule, seed: int = 0, eval_set=None):
    """End-to-end training of encoder, basis, heads and cross-attention.

    Returns ``(net, history)``; history rows hold the per-epoch mean loss
    components plus validation subject ACC and label mAP (NaN without
    ``eval_set``).
    """
    rng = np.random.default_rng(seed)
    net = DualDecoderNet(encoder, cfg, rng)
    no_decay = {id(p) for _, p in net.named_parameters() if p.ndim == 1}
    no_decay.add(id(net.basis))  # decay would pull the basis away from orthonormality
    opt = AdamW(net.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay,
                betas=schedule.betas, no_decay=no_decay)
    n = X.shape[0]
    steps_per_epoch = -(-n // schedule.batch_size)
    total = schedule.epochs * steps_per_epoch
    warm = schedule.warmup_epochs * steps_per_epoch
    history = []
    step = 0
    last_good = net.state_dict()
    for epoch in range(1, schedule.epochs + 1):
        sums = {"L_subj": 0.0, "L_obj": 0.0, "L_orth": 0.0, "total": 0.0}
        for idx in iterate_minibatches(n, schedule.batch_size, rng):
            subj, obj, _ = net.forward(X[idx], _batch_vision(vision, idx))
            losses = total_loss(subj, obj, subjects[idx], labels[idx], net.basis_obj,
                                cfg.orth_weight, cfg.use_subject_loss, cfg.use_orth_loss)
            if not np.isfinite(losses.total.item()):
                net.load_state_dict(last_good)
                raise NumericalError(
                    f"stage-2 loss became {losses.total.item()} at epoch {epoch}, step {step}; "
                    "weights reverted to the last finite state")
            opt.zero_grad()
            losses.total.backward()
            opt.step(cosine_lr(step, total, schedule.lr, warm))
            for k, v in losses.values().items():
                sums[k] += v * len(idx)
            step += 1
        last_good = net.state_dict()
        row = {"epoch": epoch, **{k: v / n for k, v in sums.items()},
               "val_ACC": float("nan"), "val_mAP": float("nan")}
        if eval_set is not None:
            Xv, sv, yv, vv = eval_set
            ps, po = evaluate_net(net, Xv, vv if cfg.use_cross_attention else None)
            row["val_ACC"] = accuracy(sv, ps.argmax(axis=1))
            row["val_mAP"] = mean_average_precision(po, yv)[0]
        history.append(row)
        logger.info("stage2 epoch %d %s", epoch, row)
    return net, history


HISTORY_FIELDS = ["epoch", "L_subj", "L_obj", "L_orth", "total", "val_ACC", "val_mAP"]


class DualDecoder(ClassifierMixin, BaseEstimator):
    """Biometric + semantic decoder on top of a pretrained :class:`MaskedAutoencoder`.

    ``fit(X, subjects, labels, vision)`` trains end to end; ``predict`` returns
    subject ids, :meth:`predict_labels` the multi-label decisions.
    """

    def __init__(self, encoder=None, d_obj=None, heads=4, use_cross_attention=True,
                 use_subject_loss=True, use_orth_loss=True, orth_weight=0.1, epochs=20,
                 batch_size=64, lr=7.5e-4, weight_decay=0.05, warmup_epochs=2,
                 threshold=0.5, random_state=0):
        self.encoder = encoder
        self.d_obj = d_obj
        self.heads = heads
        self.use_cross_attention = use_cross_attention
        self.use_subject_loss = use_subject_loss
        self.use_orth_loss = use_orth_loss
        self.orth_weight = orth_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.threshold = threshold
        self.random_state = random_state

    def _config(self, num_subjects, num_classes, vision_dim) -> DecoderConfig:
        return DecoderConfig(num_subjects, num_classes, self.d_obj, self.heads, vision_dim,
                             self.use_cross_attention, self.use_subject_loss,
                             self.use_orth_loss, self.orth_weight)

    def _fresh_encoder(self) -> Encoder:
        if self.encoder is None:
            raise ConfigError("DualDecoder needs a fitted MaskedAutoencoder as `encoder`")
        if not hasattr(self.encoder, "encoder_"):
            raise NotFittedError("the stage-1 encoder is not fitted")
        src = self.encoder
        enc = Encoder(src.encoder_config(), src.n_patches_, np.random.default_rng(0))
        enc.load_state_dict(src.encoder_.state_dict())
        return enc

    def fit(self, X, subjects, labels, vision=None, eval_set=None):
        X = np.asarray(X, dtype=np.float64)
        subjects = np.asarray(subjects, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != subjects.shape[0] or X.shape[0] != labels.shape[0]:
            raise DimensionError("X, subjects and labels must agree on the number of samples")
        if self.use_cross_attention:
            if vision is None:
                raise ConfigError("cross-attention is enabled but no vision features were given")
            vision = np.asarray(vision, dtype=np.float64)
        else:
            vision = None
        self.classes_ = np.arange(int(subjects.max()) + 1)
        vision_dim = vision.shape[-1] if vision is not None else 1
        self.config_ = self._config(len(self.classes_), labels.shape[1], vision_dim)
        sched = TrainSchedule(self.epochs, self.batch_size, self.lr, self.weight_decay,
                              self.warmup_epochs)
        self.net_, self.history_ = train_stage2(X, subjects, labels, vision, self._fresh_encoder(),
                                                self.config_, sched, self.random_state, eval_set)
        self.encoder_config_ = self.net_.encoder._cfg
        return self

    def _check(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("DualDecoder is not fitted")

    def decision_function(self, X, vision=None):
        """``(subject_logits, object_logits)``."""
        self._check()
        X = np.asarray(X, dtype=np.float64)
        if self.config_.use_cross_attention:
            if vision is None:
                raise ConfigError("this model was trained with cross-attention; pass vision features")
            vision = np.asarray(vision, dtype=np.float64)
        else:
            vision = None
        return evaluate_net(self.net_, X, vision)

    def predict(self, X, vision=None) -> np.ndarray:
        return self.decision_function(X, vision)[0].argmax(axis=1)

    def predict_label_proba(self, X, vision=None) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X, vision)[1]))

    def predict_labels(self, X, vision=None) -> np.ndarray:
        return (self.predict_label_proba(X, vision) > self.threshold).astype(np.int64)

    def score(self, X, y, vision=None) -> float:
        return accuracy(np.asarray(y), self.predict(X, vision))

    @property
    def basis_(self) -> Basis:
        self._check()
        return self.net_.basis_obj

    def retract_basis(self) -> float:
        """Snap the learned basis to its orthonormal polar factor; returns the prior error."""
        err = self.basis_.orthonormality_error()
        self.basis_.retract()
        return err

    def save(self, directory: str | os.PathLike) -> None:
        self._check()
        d = Path(directory)
        save_state(d, self.net_, "stage2.")
        params = {k: v for k, v in self.get_params(deep=False).items() if k != "encoder"}
        meta = {"params": params, "config": asdict(self.config_),
                "encoder_config": asdict(self.encoder_config_),
                "n_patches": self.net_.encoder._num_patches,
                "d_obj": self.basis_.d_obj}
        (d / "stage2.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        save_tensor(d / "basis.mkt", self.net_.basis.data)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "DualDecoder":
        d = Path(directory)
        path = d / "stage2.json"
        if not path.exists():
            raise CheckpointError(f"stage-2 checkpoint not found: {path}")
        meta = json.loads(path.read_text())
        est = cls(**meta["params"])
        est.config_ = DecoderConfig(**meta["config"])
        est.encoder_config_ = EncoderConfig(**meta["encoder_config"])
        est.classes_ = np.arange(est.config_.num_subjects)
        enc = Encoder(est.encoder_config_, meta["n_patches"], np.random.default_rng(0))
        est.net_ = DualDecoderNet(enc, est.config_, np.random.default_rng(0))
        load_state(d, est.net_, "stage2.")
        basis = load_tensor(d / "basis.mkt")
        if basis.shape != est.net_.basis.shape:
            raise CheckpointError("basis tensor shape does not match the configuration")
        est.history_ = []
        return est
