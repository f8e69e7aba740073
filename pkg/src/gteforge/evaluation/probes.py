"""Deterministic classifiers and clusterers run on frozen embeddings."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LogisticRegression:
    """Multinomial logistic regression with L2 penalty, fit by Nesterov's method.

    Minimizes ``C * sum_i CE_i + ||W||^2 / 2`` (intercept unpenalized), the
    usual ``C``-parameterized objective, after standardizing features with
    training statistics.  The step size is ``1 / L`` for the Lipschitz bound
    ``L = lambda_max(X'X) / 2 + 1 / C`` (per-sample scaling), so no line search
    or randomness is involved and ``max_iter`` caps the work exactly.
    """

    def __init__(self, C: float = 1.0, max_iter: int = 100):
        self.C = C
        self.max_iter = max_iter

    def fit(self, X, y) -> "LogisticRegression":
        X = np.asarray(X, dtype=np.float64)
        labels = list(y)
        self.classes_ = sorted(set(labels), key=str)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        index = {c: i for i, c in enumerate(self.classes_)}
        n, d = X.shape
        k = len(self.classes_)
        Y = np.zeros((n, k))
        Y[np.arange(n), [index[c] for c in labels]] = 1.0

        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        Xs = np.hstack([(X - self.mean_) / self.scale_, np.ones((n, 1))])

        reg = 1.0 / (self.C * n)
        lip = 0.5 * np.linalg.eigvalsh(Xs.T @ Xs / n)[-1] + reg
        step = 1.0 / lip
        penal = np.ones((d + 1, 1))
        penal[-1] = 0.0

        W = np.zeros((d + 1, k))
        prev = W.copy()
        for t in range(1, self.max_iter + 1):
            look = W + (t - 2) / (t + 1) * (W - prev) if t > 1 else W
            grad = Xs.T @ (_softmax(Xs @ look) - Y) / n + reg * penal * look
            prev, W = W, look - step * grad
        self.coef_ = W
        return self

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Xs = np.hstack([(X - self.mean_) / self.scale_, np.ones((len(X), 1))])
        return Xs @ self.coef_

    def predict(self, X) -> list:
        # argmax returns the lowest index on ties
        return [self.classes_[i] for i in np.argmax(self.decision_function(X), axis=1)]


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[int(rng.integers(n))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def _nearest(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.argmin(d2, axis=1)


class MiniBatchKMeans:
    """Web-scale k-means: per-center learning rates ``1 / count`` on small batches."""

    def __init__(self, n_clusters: int, batch_size: int = 32, max_iter: int = 100, seed: int = 0):
        self.n_clusters = n_clusters
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.seed = seed

    def fit_predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        n = len(X)
        if n < self.n_clusters:
            raise ValueError(f"{n} points cannot form {self.n_clusters} clusters")
        rng = np.random.default_rng(self.seed)
        C = kmeans_plus_plus(X, self.n_clusters, rng)
        counts = np.zeros(self.n_clusters)
        for _ in range(self.max_iter):
            batch = X[rng.choice(n, size=min(self.batch_size, n), replace=False)]
            for x, c in zip(batch, _nearest(batch, C)):
                counts[c] += 1
                C[c] += (x - C[c]) / counts[c]
        self.cluster_centers_ = C
        self.labels_ = _nearest(X, C)
        return self.labels_


def accuracy(pred: Sequence, gold: Sequence) -> float:
    if len(pred) != len(gold) or not len(gold):
        raise ValueError("accuracy needs equally long, non-empty sequences")
    return float(np.mean([p == g for p, g in zip(pred, gold)]))


def unit_rows(a) -> np.ndarray:
    """Scale rows to unit length; zero rows have no direction and are rejected."""
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding has no cosine similarity")
    return a / norms


# Scores are rounded before ranking so that float noise below this precision
# (e.g. two parallel vectors normalizing to values one ulp apart) never
# decides a tie; ties are then broken by the documented id or index rule.
SCORE_DECIMALS = 12


def cosine_matrix(a, b) -> np.ndarray:
    """Cosine similarities between the rows of ``a`` and ``b``, rounded for ranking."""
    return np.round(unit_rows(a) @ unit_rows(b).T, SCORE_DECIMALS)
