"""Owner-only k-means authenticator with a distance threshold.

Clusters the authorized driver's windows into k behavior modes, then
calibrates a threshold at a configured quantile of the training
nearest-centroid distances. New windows score by distance to the
nearest centroid; anything past the threshold is flagged unauthorized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TrainingError
from ..features import FeatureVector, check_schema, to_matrix
from .decision import AuthDecision, Verdict

DEFAULT_K = 4
DEFAULT_QUANTILE = 0.99


@dataclass(frozen=True)
class KmeansAuthenticator:
    centroids: np.ndarray
    threshold: float
    quantile: float
    schema: tuple[str, ...]
    inertia_history: tuple[float, ...]
    train_distances: tuple[float, ...] = ()


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] + (C * C).sum(1)[None, :] - 2.0 * (X @ C.T)
    return np.clip(d2, 0.0, None)


def _pp_seed(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: spread initial centroids by squared distance."""
    n = len(X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = X[rng.integers(n)]
        else:
            centroids[i] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[i]) ** 2).sum(1))
    return centroids


def kmeans_fit(
    vectors: list[FeatureVector],
    k: int = DEFAULT_K,
    seed: int = 0,
    *,
    quantile: float = DEFAULT_QUANTILE,
    tol: float = 1e-6,
    max_iter: int = 300,
) -> KmeansAuthenticator:
    """Lloyd iterations until centroid movement < tol or max_iter.

    Inertia (sum of squared nearest-centroid distances) is checked to be
    non-increasing after every iteration; an empty cluster is re-seeded
    at the point currently farthest from its nearest centroid.
    """
    X, schema = to_matrix(vectors)
    n = len(X)
    if n < k:
        raise TrainingError(f"need at least k={k} vectors, got {n}")
    if not 0 < quantile <= 1:
        raise TrainingError("quantile must be in (0, 1]")
    rng = np.random.default_rng(seed)
    C = _pp_seed(X, k, rng)

    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, C)
        assign = d2.argmin(axis=1)
        nearest = d2[np.arange(n), assign]
        for c in range(k):
            if not np.any(assign == c):
                far = int(nearest.argmax())
                C[c] = X[far]
                d2[:, c] = ((X - C[c]) ** 2).sum(1)
                assign = d2.argmin(axis=1)
                nearest = d2[np.arange(n), assign]
        inertia = float(nearest.sum())
        if history and inertia > history[-1] + 1e-9:
            raise RuntimeError(
                f"k-means inertia increased: {history[-1]} -> {inertia}"
            )
        history.append(inertia)
        new_C = np.stack([X[assign == c].mean(axis=0) for c in range(k)])
        shift = float(np.sqrt(((new_C - C) ** 2).sum(axis=1)).max())
        C = new_C
        if shift < tol:
            break

    train_d = np.sqrt(_sq_dists(X, C).min(axis=1))
    threshold = float(np.quantile(train_d, quantile))
    if not np.all(np.isfinite(C)):
        raise TrainingError("non-finite centroids")
    return KmeansAuthenticator(C, threshold, quantile, schema,
                               tuple(history), tuple(float(x) for x in train_d))


def kmeans_score(model: KmeansAuthenticator, vector: FeatureVector) -> float:
    check_schema(model.schema, vector.schema)
    return float(np.sqrt(_sq_dists(vector.values[None, :], model.centroids).min()))


def kmeans_decide(model: KmeansAuthenticator, vector: FeatureVector) -> AuthDecision:
    """Distance to the nearest centroid; authorized iff score <= threshold."""
    score = kmeans_score(model, vector)
    verdict = Verdict.AUTHORIZED if score <= model.threshold else Verdict.UNAUTHORIZED
    return AuthDecision(verdict, score, model.threshold, vector.window_start)
