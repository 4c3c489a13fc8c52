"""Subject-identification baselines: K-Means (Euclidean / cosine) and linear read-outs."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClassifierMixin, ClusterMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .autograd import AdamW, Tensor, cross_entropy, matmul
from .autograd.nn import param
from .exceptions import ConfigError
from .metrics import EvalReport, accuracy, matthews_corrcoef


def _normalize_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms == 0, 1.0, norms)


def _distances(X: np.ndarray, centers: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        d = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
        return np.maximum(d, 0.0)
    return 1.0 - X @ _normalize_rows(centers).T


def _lloyd(X, k, metric, rng, max_iter, tol):
    """One K-Means run. ``X`` is already row-normalised for the cosine metric."""
    centers = X[rng.choice(X.shape[0], size=k, replace=False)].copy()
    objectives = []
    labels = np.zeros(X.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        dist = _distances(X, centers, metric)
        labels = dist.argmin(axis=1)
        objectives.append(float(dist[np.arange(X.shape[0]), labels].sum()))
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:
                # empty cluster: reseed from the point farthest from its centre
                far = int(dist[np.arange(X.shape[0]), labels].argmax())
                new[j] = X[far]
        if metric == "cosine":
            new = _normalize_rows(new)
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift <= tol:
            break
    dist = _distances(X, centers, metric)
    labels = dist.argmin(axis=1)
    inertia = float(dist[np.arange(X.shape[0]), labels].sum())
    return labels, centers, inertia, objectives


class SphericalKMeans(ClusterMixin, BaseEstimator):
    """Lloyd's K-Means with Euclidean or cosine distance and best-of-``n_init`` restarts."""

    def __init__(self, n_clusters=4, metric="euclidean", n_init=10, max_iter=300, tol=1e-6,
                 random_state=0):
        self.n_clusters = n_clusters
        self.metric = metric
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        X = check_array(X, dtype=np.float64)
        if self.metric == "cosine":
            X = _normalize_rows(X)
        rng = np.random.default_rng(self.random_state)
        best = None
        for _ in range(self.n_init):
            run = _lloyd(X, self.n_clusters, self.metric, rng, self.max_iter, self.tol)
            if best is None or run[2] < best[2]:
                best = run
        self.labels_, self.cluster_centers_, self.inertia_, self.objective_history_ = best
        return self

    def predict(self, X):
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("SphericalKMeans is not fitted")
        X = check_array(X, dtype=np.float64)
        if self.metric == "cosine":
            X = _normalize_rows(X)
        return _distances(X, self.cluster_centers_, self.metric).argmin(axis=1)


def align_clusters(true_labels, cluster_labels, num_classes: int | None = None) -> np.ndarray:
    """Relabel clusters to maximise agreement with ``true_labels`` (Hungarian assignment)."""
    t = np.asarray(true_labels, dtype=np.int64)
    c = np.asarray(cluster_labels, dtype=np.int64)
    k = max(int(t.max()), int(c.max())) + 1 if num_classes is None else num_classes
    contingency = np.zeros((k, k))
    np.add.at(contingency, (c, t), 1.0)
    rows, cols = linear_sum_assignment(-contingency)
    mapping = np.empty(k, dtype=np.int64)
    mapping[rows] = cols
    return mapping[c]


def kmeans_subject_baseline(voxels, subjects, K: int, metric: str = "euclidean", seed: int = 0):
    """Cluster ``voxels`` into ``K`` groups; returns ``(assignments, aligned ACC, aligned MCC)``."""
    km = SphericalKMeans(K, metric=metric, random_state=seed).fit(voxels)
    aligned = align_clusters(subjects, km.labels_, K)
    return km.labels_, accuracy(subjects, aligned), matthews_corrcoef(aligned, subjects, K)


class LeastSquaresSubjectClassifier(ClassifierMixin, BaseEstimator):
    """Closed-form ridge regression onto one-hot subject ids; predicts the argmax."""

    def __init__(self, ridge=1e-8):
        self.ridge = ridge

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.arange(int(y.max()) + 1)
        Xa = np.hstack([X, np.ones((X.shape[0], 1))])
        Y = np.eye(len(self.classes_))[y]
        gram = Xa.T @ Xa + self.ridge * np.eye(Xa.shape[1])
        self.coef_ = np.linalg.solve(gram, Xa.T @ Y)
        return self

    def decision_function(self, X):
        X = check_array(X, dtype=np.float64)
        return np.hstack([X, np.ones((X.shape[0], 1))]) @ self.coef_

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


class LinearSoftmaxSubjectClassifier(ClassifierMixin, BaseEstimator):
    """A single linear layer trained with cross-entropy by full-batch AdamW."""

    def __init__(self, epochs=200, lr=1e-2, weight_decay=0.0, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.arange(int(y.max()) + 1)
        rng = np.random.default_rng(self.random_state)
        W = param(0.01 * rng.standard_normal((X.shape[1], len(self.classes_))))
        b = param(np.zeros(len(self.classes_)))
        opt = AdamW([W, b], lr=self.lr, weight_decay=self.weight_decay)
        Xt = Tensor(X)
        for _ in range(self.epochs):
            loss = cross_entropy(matmul(Xt, W) + b, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.coef_, self.intercept_ = W.data, b.data
        return self

    def decision_function(self, X):
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


def linear_subject_baselines(X_train, s_train, X_test, s_test, num_subjects: int | None = None,
                             seed: int = 0) -> dict[str, EvalReport]:
    """Least-squares and cross-entropy linear read-outs, scored by ACC and MCC on the test split."""
    k = num_subjects or int(max(np.max(s_train), np.max(s_test))) + 1
    out = {}
    for name, est in (("least_squares", LeastSquaresSubjectClassifier()),
                      ("cross_entropy", LinearSoftmaxSubjectClassifier(random_state=seed))):
        pred = est.fit(X_train, s_train).predict(X_test)
        out[name] = EvalReport(ACC=accuracy(s_test, pred), MCC=matthews_corrcoef(pred, s_test, k))
    return out
