"""Versioned model bundle: standardizer + optional PCA + core authenticator.

Bundles serialize to a self-describing JSON record carrying the raw
feature schema, all parameters, the threshold, and calibration
metadata. Loading never guesses: a bundle applied to features with a
different schema is a hard error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import SchemaMismatchError
from ..features import FeatureVector, PcaModel, Standardizer, check_schema, project
from .autoencoder import AutoencoderModel, autoencoder_decide
from .decision import AuthDecision, Verdict
from .kmeans import KmeansAuthenticator, kmeans_decide
from .knn import KnnModel, knn_nearest_distance, knn_predict

FORMAT = "canguard-model"
VERSION = 1


@dataclass(frozen=True)
class AuthModel:
    """A trained authenticator: produces a decision + score per window."""

    kind: str  # "knn" | "kmeans" | "autoencoder"
    standardizer: Standardizer
    core: KnnModel | KmeansAuthenticator | AutoencoderModel
    authorized: frozenset[str]
    pca: PcaModel | None = None
    calibration: dict | None = None

    @property
    def raw_schema(self) -> tuple[str, ...]:
        return self.standardizer.schema

    def _prepare(self, vector: FeatureVector) -> FeatureVector:
        check_schema(self.raw_schema, vector.schema)
        v = FeatureVector((vector.values - self.standardizer.mean) / self.standardizer.std,
                          vector.schema, vector.window_start, vector.label)
        if self.pca is not None:
            v = project(self.pca, v)
        return v

    def decide(self, vector: FeatureVector) -> AuthDecision:
        v = self._prepare(vector)
        if self.kind == "knn":
            label = knn_predict(self.core, v)
            verdict = Verdict.AUTHORIZED if label in self.authorized else Verdict.UNAUTHORIZED
            score = knn_nearest_distance(self.core, v)
            return AuthDecision(verdict, score, float("inf"), vector.window_start, label)
        if self.kind == "kmeans":
            return kmeans_decide(self.core, v)
        if self.kind == "autoencoder":
            return autoencoder_decide(self.core, v)
        raise ValueError(f"unknown model kind {self.kind!r}")


def _arr(x) -> list:
    return np.asarray(x).tolist()


def save_model(model: AuthModel, path: str | Path) -> None:
    core = model.core
    if model.kind == "knn":
        params = {"k": core.k, "X": _arr(core.X), "labels": list(core.labels),
                  "schema": list(core.schema)}
    elif model.kind == "kmeans":
        params = {"centroids": _arr(core.centroids), "threshold": core.threshold,
                  "quantile": core.quantile, "schema": list(core.schema),
                  "inertia_history": list(core.inertia_history),
                  "train_distances": list(core.train_distances)}
    elif model.kind == "autoencoder":
        params = {"sizes": list(core.sizes), "weights": [_arr(w) for w in core.weights],
                  "biases": [_arr(b) for b in core.biases], "threshold": core.threshold,
                  "quantile": core.quantile, "schema": list(core.schema),
                  "loss_history": list(core.loss_history)}
    else:
        raise ValueError(f"unknown model kind {model.kind!r}")

    record = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "schema": list(model.raw_schema),
        "standardizer": {"mean": _arr(model.standardizer.mean),
                         "std": _arr(model.standardizer.std)},
        "pca": None if model.pca is None else {
            "mean": _arr(model.pca.mean),
            "components": _arr(model.pca.components),
            "explained_variance": _arr(model.pca.explained_variance),
            "schema": list(model.pca.schema),
        },
        "authorized": sorted(model.authorized),
        "params": params,
        "calibration": model.calibration or {},
    }
    Path(path).write_text(json.dumps(record, sort_keys=True) + "\n")


def load_model(path: str | Path, expected_schema: tuple[str, ...] | None = None) -> AuthModel:
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaMismatchError(f"cannot load model {path}: {e}") from e
    if record.get("format") != FORMAT:
        raise SchemaMismatchError(f"{path} is not a {FORMAT} record")
    if record.get("version") != VERSION:
        raise SchemaMismatchError(f"unsupported model version {record.get('version')}")

    schema = tuple(record["schema"])
    if expected_schema is not None:
        check_schema(schema, tuple(expected_schema))
    std = record["standardizer"]
    standardizer = Standardizer(np.array(std["mean"]), np.array(std["std"]), schema)
    pca = None
    if record["pca"] is not None:
        p = record["pca"]
        pca = PcaModel(np.array(p["mean"]), np.array(p["components"]),
                       np.array(p["explained_variance"]), tuple(p["schema"]))

    kind = record["kind"]
    params = record["params"]
    core_schema = tuple(params["schema"])
    if kind == "knn":
        core = KnnModel(params["k"], np.array(params["X"]),
                        tuple(params["labels"]), core_schema)
    elif kind == "kmeans":
        core = KmeansAuthenticator(np.array(params["centroids"]), params["threshold"],
                                   params["quantile"], core_schema,
                                   tuple(params["inertia_history"]),
                                   tuple(params["train_distances"]))
    elif kind == "autoencoder":
        core = AutoencoderModel(tuple(params["sizes"]),
                                [np.array(w) for w in params["weights"]],
                                [np.array(b) for b in params["biases"]],
                                params["threshold"], params["quantile"], core_schema,
                                tuple(params["loss_history"]))
    else:
        raise SchemaMismatchError(f"unknown model kind {kind!r}")

    return AuthModel(kind, standardizer, core, frozenset(record["authorized"]),
                     pca, record.get("calibration") or {})
