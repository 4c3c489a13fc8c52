"""Learnable change of basis that splits latent tokens into subject and object coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, frobenius_norm_sq, matmul
from .autograd.nn import param
from .exceptions import ConfigError, DimensionError, NumericalError

MAX_CONDITION = 1e12


class Basis:
    """A ``d x d`` matrix whose first ``d - d_obj`` columns span the subject subspace."""

    def __init__(self, matrix, d_obj: int, trainable: bool = True):
        m = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"basis must be square, got {m.shape}")
        if not 0 < d_obj < m.shape[0]:
            raise ConfigError(f"d_obj={d_obj} must lie strictly between 0 and d={m.shape[0]}")
        self.B = param(m) if trainable else Tensor(m)
        self.d_obj = int(d_obj)

    @classmethod
    def random(cls, d: int, d_obj: int, rng: np.random.Generator) -> "Basis":
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        return cls(q * np.sign(np.diag(r)), d_obj)

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def d_subj(self) -> int:
        return self.d - self.d_obj

    @property
    def subject_part(self) -> Tensor:
        return self.B[:, :self.d_subj]

    @property
    def object_part(self) -> Tensor:
        return self.B[:, self.d_subj:]

    def orthonormality_error(self) -> float:
        b = self.B.data
        return float(np.linalg.norm(b @ b.T - np.eye(self.d)))

    def retract(self) -> None:
        """Replace the matrix by its nearest orthonormal matrix, in place."""
        self.B.data = project_to_orthonormal(self.B.data)


@dataclass
class DisentangledFeatures:
    Z_subj: Tensor
    Z_obj: Tensor


def split(F, basis: Basis) -> DisentangledFeatures:
    """``Z_subj = F B_subj`` and ``Z_obj = F B_obj`` for ``(..., N, d)`` tokens."""
    F = F if isinstance(F, Tensor) else Tensor(F)
    if F.shape[-1] != basis.d:
        raise DimensionError(f"features have {F.shape[-1]} columns but the basis is {basis.d} x {basis.d}")
    return DisentangledFeatures(matmul(F, basis.subject_part), matmul(F, basis.object_part))


def orthonormal_loss(basis: Basis | Tensor) -> Tensor:
    """``||B B^T - I||_F^2``."""
    B = basis.B if isinstance(basis, Basis) else basis
    return frobenius_norm_sq(matmul(B, B.T) - np.eye(B.shape[0]))


def change_of_basis_coords(v, B) -> np.ndarray:
    """Coordinates ``w`` of ``v`` in the basis given by the columns of ``B`` (solves ``B w = v``)."""
    B = np.asarray(B, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise DimensionError(f"basis must be square, got {B.shape}")
    if v.shape[0] != B.shape[0]:
        raise DimensionError(f"vector of length {v.shape[0]} vs basis of size {B.shape[0]}")
    cond = np.linalg.cond(B)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"basis is singular or ill-conditioned (cond={cond:.3g})")
    return np.linalg.solve(B, v)


def project_to_orthonormal(B) -> np.ndarray:
    """Orthogonal polar factor of ``B``: the closest orthonormal matrix in Frobenius norm."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise DimensionError(f"basis must be square, got {B.shape}")
    U, s, Vt = np.linalg.svd(B)
    if s[-1] <= s[0] * 1e-12:
        raise NumericalError("basis is rank deficient; the polar factor is not unique")
    return U @ Vt
