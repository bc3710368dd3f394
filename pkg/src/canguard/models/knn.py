"""k-nearest-neighbor driver classifier on standardized features.

Tie handling is order-free so predictions are invariant under any
permutation of the training set: neighbors are selected by
(distance, label), vote ties break on smallest summed distance, then
lexicographically smallest label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TrainingError
from ..features import FeatureVector, check_schema, to_matrix
from ..traces import UNKNOWN, is_valid_driver_label


@dataclass(frozen=True)
class KnnModel:
    k: int
    X: np.ndarray
    labels: tuple[str, ...]
    schema: tuple[str, ...]


def knn_train(vectors: list[FeatureVector], k: int) -> KnnModel:
    X, schema = to_matrix(vectors)
    labels = []
    for v in vectors:
        if v.label is None or v.label == UNKNOWN or not is_valid_driver_label(v.label):
            raise TrainingError(f"training window at {v.window_start} lacks a driver label")
        labels.append(v.label)
    if not 1 <= k <= len(vectors):
        raise TrainingError(f"k={k} must be within 1..{len(vectors)}")
    return KnnModel(k, X, tuple(labels), schema)


def knn_predict(model: KnnModel, vector: FeatureVector) -> str:
    check_schema(model.schema, vector.schema)
    d = np.sqrt(((model.X - vector.values) ** 2).sum(axis=1))
    labels = np.asarray(model.labels)
    order = np.lexsort((labels, d))[: model.k]
    votes: dict[str, list[float]] = {}
    for i in order:
        votes.setdefault(str(labels[i]), []).append(float(d[i]))
    top = max(len(v) for v in votes.values())
    return min(
        (lab for lab, ds in votes.items() if len(ds) == top),
        key=lambda lab: (sum(votes[lab]), lab),
    )


def knn_nearest_distance(model: KnnModel, vector: FeatureVector) -> float:
    check_schema(model.schema, vector.schema)
    return float(np.sqrt(((model.X - vector.values) ** 2).sum(axis=1)).min())
