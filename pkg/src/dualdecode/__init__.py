"""Biometric and semantic decoding of voxel responses with an orthonormal feature split."""

from .attribution import AttributionMap, aggregate_fingerprint, attention_rollout
from .baselines import (
    LeastSquaresSubjectClassifier,
    LinearSoftmaxSubjectClassifier,
    SphericalKMeans,
    kmeans_subject_baseline,
    linear_subject_baselines,
)
from .decoder import DualDecoder
from .disentangle import Basis, change_of_basis_coords, split
from .mae import MaskedAutoencoder
from .metrics import EvalReport, evaluate
from .preprocess import Preprocessor
from .synth import GeneratorConfig, generate_dataset

__all__ = [
    "AttributionMap", "Basis", "DualDecoder", "EvalReport", "GeneratorConfig",
    "LeastSquaresSubjectClassifier", "LinearSoftmaxSubjectClassifier", "MaskedAutoencoder",
    "Preprocessor", "SphericalKMeans", "aggregate_fingerprint", "attention_rollout",
    "change_of_basis_coords", "evaluate", "generate_dataset", "kmeans_subject_baseline",
    "linear_subject_baselines", "split",
]
