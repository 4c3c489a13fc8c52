"""Object-voxel fingerprints from GradCAM token scores and attention rollout."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .autograd.io import save_tensor
from .decoder import evaluate_net
from .disentangle import split
from .exceptions import CheckpointError, DimensionError, ValidationError
from .preprocess import PaddingPlan

GRADCAM_VARIANT = "channel weights = token-mean of dlogit/dZ_obj; relu(weighted channel sum)"


@dataclass
class AttributionMap:
    scores: np.ndarray          # length L_s, real voxels only
    class_id: int
    subject_id: int
    aggregation: str
    sample_count: int

    @property
    def is_empty(self) -> bool:
        return self.sample_count == 0


def _check_stochastic(A: np.ndarray, tol: float = 1e-6) -> None:
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"attention matrices must be square, got {A.shape}")
    if np.any(A < -tol) or np.max(np.abs(A.sum(axis=-1) - 1.0)) > tol:
        raise ValidationError("attention matrices must be row-stochastic (rows sum to 1)")


def _residual(A: np.ndarray) -> np.ndarray:
    A = 0.5 * (A + np.eye(A.shape[-1]))
    return A / A.sum(axis=-1, keepdims=True)


def attention_rollout(attn_per_layer, residual: bool = False) -> np.ndarray:
    """``A^(l) @ A^(l-1) @ ... @ A^(1)`` over head-averaged attention matrices.

    Accepts ``(N, N)`` layers or batched ``(B, N, N)`` layers. With
    ``residual=True`` each layer is first replaced by ``0.5 * (A + I)``,
    renormalised.
    """
    layers = [np.asarray(A, dtype=np.float64) for A in attn_per_layer]
    if not layers:
        raise ValidationError("attention_rollout needs at least one layer")
    shape = layers[0].shape
    for A in layers:
        if A.shape != shape:
            raise DimensionError(f"attention layers disagree in shape: {A.shape} vs {shape}")
        _check_stochastic(A)
    out = _residual(layers[0]) if residual else layers[0]
    for A in layers[1:]:
        out = (_residual(A) if residual else A) @ out
    return out


def voxel_scores(t, rollout) -> np.ndarray:
    """Token-level scores ``T = t @ rollout`` (batched over leading axes)."""
    t = np.asarray(t, dtype=np.float64)
    R = np.asarray(rollout, dtype=np.float64)
    if t.shape[-1] != R.shape[-2]:
        raise DimensionError(f"token scores {t.shape} do not match rollout {R.shape}")
    return (t[..., None, :] @ R)[..., 0, :]


def upsample_patchwise(T, patch_size: int) -> np.ndarray:
    return np.repeat(np.asarray(T, dtype=np.float64), patch_size, axis=-1)


def restore_activation(upsampled, plan: PaddingPlan) -> np.ndarray:
    """Fold padded copies back onto their source voxel, keeping the maximum."""
    a = np.asarray(upsampled, dtype=np.float64)
    if a.shape[-1] != plan.target_length:
        raise DimensionError(
            f"activation length {a.shape[-1]} does not match the padding plan ({plan.target_length})")
    L_s = plan.source_length
    out = a[..., :L_s].copy()
    for k, src in enumerate(plan.origin):
        out[..., src] = np.maximum(out[..., src], a[..., L_s + k])
    return out


def gradcam_token_scores(model, X, class_id: int, vision=None):
    """Per-token GradCAM scores for logit ``class_id``; ``X`` is ``(B, L)`` or ``(L,)``.

    Returns ``(t, attention)`` where ``t`` is ``(B, N)`` and ``attention`` is the
    list of per-layer head-averaged ``(B, N, N)`` maps from the same forward pass.
    """
    net = _net_of(model)
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
        vision = None if vision is None else np.asarray(vision)[None]
    if net.cross is None:
        vision = None
    if not 0 <= class_id < net._cfg.num_classes:
        raise IndexError(f"class id {class_id} outside [0, {net._cfg.num_classes})")
    attn: list = []
    with no_grad():
        Z_obj = split(net.encoder(X, attn), net.basis_obj).Z_obj.data
    t = gradcam_from_features(lambda Z: net.object_logits_from(Z, vision), Z_obj, class_id)
    if single:
        return t[0], [a[0] for a in attn]
    return t, attn


def gradcam_from_features(head, Z_obj: np.ndarray, class_id: int) -> np.ndarray:
    """GradCAM on a ``(B, N, k)`` feature map given ``head: Tensor -> (B, C) logits``."""
    Z = Tensor(np.asarray(Z_obj, dtype=np.float64), requires_grad=True)
    logits = head(Z)
    # samples are independent, so the gradient of the sum is each sample's gradient
    logits[:, class_id].sum().backward()
    alpha = Z.grad.mean(axis=1, keepdims=True)
    return np.maximum((alpha * Z.data).sum(axis=-1), 0.0)


def _net_of(model):
    net = getattr(model, "net_", model)
    if not hasattr(net, "object_logits_from"):
        raise CheckpointError("attribution needs a trained stage-2 model")
    return net


def sample_activation_maps(model, X, plan: PaddingPlan, class_id: int, vision=None,
                           residual: bool = False, batch_size: int = 64) -> np.ndarray:
    """Restored per-voxel maps ``(B, L_s)`` for every row of ``X``."""
    net = _net_of(model)
    p = net.encoder._cfg.patch_size
    out = []
    for start in range(0, X.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        t, attn = gradcam_token_scores(model, X[sl], class_id, None if vision is None else vision[sl])
        T = voxel_scores(t, attention_rollout(attn, residual))
        out.append(restore_activation(upsample_patchwise(T, p), plan))
    return np.concatenate(out) if out else np.zeros((0, plan.source_length))


def aggregate_maps(maps, statistic: str = "median") -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    if statistic == "median":
        return np.median(maps, axis=0)
    if statistic == "mean":
        return maps.mean(axis=0)
    raise ValidationError(f"unknown statistic {statistic!r}; use 'median' or 'mean'")


def aggregate_fingerprint(model, data, class_id: int, subject_id: int, plan: PaddingPlan,
                          statistic: str = "median", residual: bool = False,
                          threshold: float = 0.5) -> AttributionMap:
    """Aggregate restored maps over true positives of ``class_id`` for one subject.

    ``data`` is a :class:`~dualdecode.preprocess.PreparedData`. With no
    qualifying sample the map is empty (``sample_count == 0``).
    """
    if statistic not in ("median", "mean"):
        raise ValidationError(f"unknown statistic {statistic!r}; use 'median' or 'mean'")
    net = _net_of(model)
    rows = np.flatnonzero(data.subjects == subject_id)
    vision = data.vision if net.cross is not None else None
    if rows.size:
        _, logits = evaluate_net(net, data.X[rows], None if vision is None else vision[rows])
        prob = 1.0 / (1.0 + np.exp(-logits[:, class_id]))
        rows = rows[(prob > threshold) & (data.labels[rows, class_id] == 1)]
    if rows.size == 0:
        return AttributionMap(np.zeros(0), class_id, subject_id, statistic, 0)
    maps = sample_activation_maps(model, data.X[rows], plan, class_id,
                                  None if vision is None else vision[rows], residual)
    return AttributionMap(aggregate_maps(maps, statistic), class_id, subject_id, statistic, int(rows.size))


def roi_group(amap: AttributionMap | np.ndarray, roi_labels) -> dict[int, np.ndarray]:
    scores = amap.scores if isinstance(amap, AttributionMap) else np.asarray(amap)
    labels = np.asarray(roi_labels, dtype=np.int64)
    if labels.shape != scores.shape:
        raise DimensionError(f"ROI labels {labels.shape} do not match scores {scores.shape}")
    return {int(k): scores[labels == k] for k in np.unique(labels)}


def top_voxels(scores, q: int) -> np.ndarray:
    """Indices of the ``q`` largest scores (ties broken by lower index)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return np.sort(order[:q])


def jaccard(a, b) -> float:
    a, b = set(map(int, a)), set(map(int, b))
    return len(a & b) / len(a | b) if a | b else 1.0


def write_fingerprint(directory: str | os.PathLike, amap: AttributionMap, roi_labels=None,
                      threshold: float = 0.5, residual: bool = False) -> dict:
    """Emit ``fingerprint.mkt``, ``fingerprint.csv`` and ``fingerprint.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"class_id": amap.class_id, "subject_id": amap.subject_id,
            "statistic": amap.aggregation, "threshold": threshold,
            "sample_count": amap.sample_count, "empty": amap.is_empty,
            "gradcam": GRADCAM_VARIANT, "rollout_residual": residual,
            "upsampling": "patch replication"}
    save_tensor(d / "fingerprint.mkt", amap.scores)
    labels = np.zeros(amap.scores.size, dtype=np.int64) if roi_labels is None else np.asarray(roi_labels)
    if labels.shape != amap.scores.shape and not amap.is_empty:
        raise DimensionError("ROI labels do not match the fingerprint length")
    with open(d / "fingerprint.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_index", "roi_label", "score"])
        for i, s in enumerate(amap.scores):
            w.writerow([i, int(labels[i]), repr(float(s))])
    (d / "fingerprint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
