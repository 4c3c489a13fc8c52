"""Transformer encoder over 1-D voxel patches, pretrained as a masked autoencoder."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .autograd import (
    AdamW,
    Tensor,
    concat,
    cosine_lr,
    gelu,
    masked_mse,
    no_grad,
    softmax,
    take_along_axis,
)
from .autograd.io import load_tensor, save_tensor
from .autograd.nn import LayerNorm, Linear, Module, param, sinusoidal_positions
from .exceptions import CheckpointError, ConfigError, DimensionError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    dim: int = 64
    layers: int = 4
    heads: int = 4
    decoder_dim: int = 48
    decoder_layers: int = 2
    decoder_heads: int = 4
    mask_ratio: float = 0.75
    mlp_ratio: int = 4

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder_dim={self.decoder_dim} not divisible by decoder_heads={self.decoder_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.patch_size <= 0 or self.layers < 1:
            raise ConfigError("patch_size and layers must be positive")


# Full-scale defaults; the desk default above is ~1/1000 of the compute.
FULL_SCALE_ENCODER = EncoderConfig(patch_size=64, dim=768, layers=12, heads=6,
                                   decoder_dim=512, decoder_layers=8, decoder_heads=8)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 7.5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 3
    betas: tuple[float, float] = (0.9, 0.999)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x: Tensor, attn_out: list | None = None) -> Tensor:
        B, N, D = x.shape
        h = self._heads
        hd = D // h
        qkv = self.qkv(x).reshape(B, N, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd)), axis=-1)
        if attn_out is not None:
            attn_out.append(attn.data.mean(axis=1))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.proj(out)


class Block(Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor, attn_out: list | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), attn_out)
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


class Encoder(Module):
    """Patch embedding, fixed sinusoidal positions and a stack of blocks."""

    def __init__(self, cfg: EncoderConfig, num_patches: int, rng: np.random.Generator):
        self._cfg = cfg
        self._num_patches = num_patches
        self._pos = sinusoidal_positions(num_patches, cfg.dim)
        self.patch_embed = Linear(cfg.patch_size, cfg.dim, rng)
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.dim)

    def patchify(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        p = self._cfg.patch_size
        if X.ndim != 2 or X.shape[1] != self._num_patches * p:
            raise DimensionError(
                f"expected voxel arrays of shape (batch, {self._num_patches * p}), got {X.shape}")
        return X.reshape(X.shape[0], self._num_patches, p)

    def embed(self, X: np.ndarray) -> Tensor:
        return self.patch_embed(Tensor(self.patchify(X))) + self._pos

    def run_blocks(self, tokens: Tensor, attn_out: list | None = None) -> Tensor:
        for blk in self.blocks:
            tokens = blk(tokens, attn_out)
        return self.norm(tokens)

    def __call__(self, X: np.ndarray, attn_out: list | None = None) -> Tensor:
        return self.run_blocks(self.embed(X), attn_out)


def patch_embed(voxels, weight, bias, patch_size: int, positions=None) -> np.ndarray:
    """Functional patch projection for one padded voxel vector: ``(N, d)`` tokens."""
    voxels = np.asarray(voxels, dtype=np.float64)
    if voxels.ndim != 1 or voxels.size % patch_size:
        raise DimensionError(f"voxel length {voxels.size} is not divisible by patch size {patch_size}")
    tokens = voxels.reshape(-1, patch_size) @ np.asarray(weight) + np.asarray(bias)
    if positions is not None:
        tokens = tokens + positions
    return tokens


def random_mask(num_tokens: int, mask_ratio: float, rng: np.random.Generator,
                batch: int | None = None):
    """Choose ``floor(N * ratio)`` tokens to hide, uniformly without replacement.

    Returns ``(keep_idx, mask_idx)``; with ``batch`` both gain a leading axis.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError("mask_ratio must lie in (0, 1)")
    n_mask = int(np.floor(num_tokens * mask_ratio))
    shape = (num_tokens,) if batch is None else (batch, num_tokens)
    order = np.argsort(rng.random(shape), axis=-1, kind="stable")
    return order[..., n_mask:], order[..., :n_mask]


class MAENet(Module):
    def __init__(self, cfg: EncoderConfig, num_patches: int, rng: np.random.Generator):
        cfg.validate()
        self._cfg = cfg
        self._num_patches = num_patches
        self.encoder = Encoder(cfg, num_patches, rng)
        self.decoder_embed = Linear(cfg.dim, cfg.decoder_dim, rng)
        self.mask_token = param(0.02 * rng.standard_normal(cfg.decoder_dim))
        self._dec_pos = sinusoidal_positions(num_patches, cfg.decoder_dim)
        self.decoder_blocks = [Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio, rng)
                               for _ in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(cfg.decoder_dim)
        self.decoder_pred = Linear(cfg.decoder_dim, cfg.patch_size, rng)

    def reconstruct(self, X: np.ndarray, rng: np.random.Generator):
        """Masked forward pass: returns ``(pred, patches, mask)``; mask is 1 on hidden patches."""
        enc = self.encoder
        patches = enc.patchify(X)
        B, N = patches.shape[:2]
        tokens = enc.embed(X)
        keep, hidden = random_mask(N, self._cfg.mask_ratio, rng, batch=B)
        n_keep = keep.shape[1]
        visible = take_along_axis(tokens, np.repeat(keep[..., None], self._cfg.dim, axis=2), axis=1)
        latent = enc.run_blocks(visible)
        y = self.decoder_embed(latent)
        fill = Tensor(np.zeros((B, N - n_keep, self._cfg.decoder_dim))) + self.mask_token
        full = concat([y, fill], axis=1)
        # slots are in (keep, hidden) order; invert that permutation
        order = np.concatenate([keep, hidden], axis=1)
        restore = np.argsort(order, axis=1, kind="stable")
        full = take_along_axis(full, np.repeat(restore[..., None], self._cfg.decoder_dim, axis=2), axis=1)
        z = full + self._dec_pos
        for blk in self.decoder_blocks:
            z = blk(z)
        pred = self.decoder_pred(self.decoder_norm(z))
        mask = np.zeros((B, N))
        np.put_along_axis(mask, hidden, 1.0, axis=1)
        return pred, patches, mask

    def loss(self, X: np.ndarray, rng: np.random.Generator) -> Tensor:
        pred, patches, mask = self.reconstruct(X, rng)
        return masked_mse(pred, patches, mask)


def save_state(directory: str | os.PathLike, module: Module, prefix: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, p in module.named_parameters():
        save_tensor(d / f"{prefix}{name}.mkt", p.data)


def load_state(directory: str | os.PathLike, module: Module, prefix: str = "") -> None:
    d = Path(directory)
    state = {}
    for name, _ in module.named_parameters():
        path = d / f"{prefix}{name}.mkt"
        if not path.exists():
            raise CheckpointError(f"checkpoint tensor missing: {path}")
        state[name] = load_tensor(path)
    module.load_state_dict(state)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def pretrain_stage1(X: np.ndarray, cfg: EncoderConfig, schedule: TrainSchedule, seed: int = 0,
                    eval_seed: int = 12345):
    """Fit an MAE on padded voxel rows ``X``. Returns ``(net, history)``.

    ``history`` rows are ``(epoch, train_loss, eval_loss)``; ``eval_loss`` is
    the masked MSE over all of ``X`` under a fixed mask draw, so epochs are
    comparable. Epoch 0 is the untrained network.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] % cfg.patch_size:
        raise DimensionError(f"voxel length {X.shape[1]} not divisible by patch size {cfg.patch_size}")
    rng = np.random.default_rng(seed)
    net = MAENet(cfg, X.shape[1] // cfg.patch_size, rng)
    params = net.parameters()
    no_decay = {id(p) for n, p in net.named_parameters() if p.ndim == 1}
    opt = AdamW(params, lr=schedule.lr, weight_decay=schedule.weight_decay,
                betas=schedule.betas, no_decay=no_decay)
    steps_per_epoch = -(-X.shape[0] // schedule.batch_size)
    total = schedule.epochs * steps_per_epoch
    warm = schedule.warmup_epochs * steps_per_epoch

    def evaluate() -> float:
        with no_grad():
            erng = np.random.default_rng(eval_seed)
            losses, weights = [], []
            for start in range(0, X.shape[0], 256):
                xb = X[start:start + 256]
                losses.append(net.loss(xb, erng).item())
                weights.append(xb.shape[0])
            return float(np.average(losses, weights=weights))

    history = [(0, float("nan"), evaluate())]
    step = 0
    for epoch in range(1, schedule.epochs + 1):
        running, count = 0.0, 0
        for idx in iterate_minibatches(X.shape[0], schedule.batch_size, rng):
            loss = net.loss(X[idx], rng)
            if not np.isfinite(loss.item()):
                raise NumericalError(
                    f"stage-1 loss became {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, total, schedule.lr, warm))
            running += loss.item() * len(idx)
            count += len(idx)
            step += 1
        history.append((epoch, running / count, evaluate()))
        logger.info("stage1 epoch %d loss %.5f eval %.5f", epoch, history[-1][1], history[-1][2])
    return net, history


class MaskedAutoencoder(TransformerMixin, BaseEstimator):
    """Stage-1 feature learner: ``fit`` pretrains, ``transform`` returns ``(M, N, d)`` tokens.

    Only the encoder is kept after fitting.
    """

    def __init__(self, patch_size=16, dim=64, layers=4, heads=4, decoder_dim=48,
                 decoder_layers=2, decoder_heads=4, mask_ratio=0.75, epochs=30,
                 batch_size=64, lr=7.5e-4, weight_decay=0.05, warmup_epochs=3,
                 random_state=0):
        self.patch_size = patch_size
        self.dim = dim
        self.layers = layers
        self.heads = heads
        self.decoder_dim = decoder_dim
        self.decoder_layers = decoder_layers
        self.decoder_heads = decoder_heads
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.random_state = random_state

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.patch_size, self.dim, self.layers, self.heads, self.decoder_dim,
                             self.decoder_layers, self.decoder_heads, self.mask_ratio)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.epochs, self.batch_size, self.lr, self.weight_decay,
                             self.warmup_epochs)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        net, self.history_ = pretrain_stage1(X, self.encoder_config(), self.schedule(),
                                             self.random_state)
        self.encoder_ = net.encoder
        self.n_patches_ = X.shape[1] // self.patch_size
        return self

    def _check(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("MaskedAutoencoder is not fitted")

    def transform(self, X, batch_size: int = 256) -> np.ndarray:
        self._check()
        X = check_array(X, dtype=np.float64)
        out = []
        with no_grad():
            for start in range(0, X.shape[0], batch_size):
                out.append(self.encoder_(X[start:start + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.n_patches_, self.dim))

    def encode(self, voxels, return_attention: bool = False):
        """Encode one padded voxel vector to ``(N, d)`` tokens, optionally with per-layer attention."""
        self._check()
        attn: list | None = [] if return_attention else None
        with no_grad():
            F = self.encoder_(np.asarray(voxels, dtype=np.float64)[None, :], attn).data[0]
        if return_attention:
            return F, [a[0] for a in attn]
        return F

    def save(self, directory: str | os.PathLike) -> None:
        self._check()
        d = Path(directory)
        save_state(d, self.encoder_, "encoder.")
        meta = {"params": self.get_params(), "n_patches": self.n_patches_,
                "encoder_config": asdict(self.encoder_config())}
        (d / "encoder.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "MaskedAutoencoder":
        d = Path(directory)
        path = d / "encoder.json"
        if not path.exists():
            raise CheckpointError(f"encoder checkpoint not found: {path}")
        meta = json.loads(path.read_text())
        est = cls(**meta["params"])
        est.n_patches_ = meta["n_patches"]
        est.encoder_ = Encoder(est.encoder_config(), est.n_patches_, np.random.default_rng(0))
        load_state(d, est.encoder_, "encoder.")
        return est
