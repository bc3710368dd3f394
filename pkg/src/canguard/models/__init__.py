"""Driver-authentication models and evaluation metrics."""

from .decision import AuthDecision, Verdict, rolling_majority
from .knn import KnnModel, knn_train, knn_predict
from .kmeans import KmeansAuthenticator, kmeans_fit, kmeans_decide
from .autoencoder import (
    AutoencoderModel,
    autoencoder_train,
    autoencoder_decide,
    reconstruction_errors,
)
from .metrics import Metrics, evaluate
from .store import AuthModel, save_model, load_model

__all__ = [
    "AuthDecision",
    "Verdict",
    "rolling_majority",
    "KnnModel",
    "knn_train",
    "knn_predict",
    "KmeansAuthenticator",
    "kmeans_fit",
    "kmeans_decide",
    "AutoencoderModel",
    "autoencoder_train",
    "autoencoder_decide",
    "reconstruction_errors",
    "Metrics",
    "evaluate",
    "AuthModel",
    "save_model",
    "load_model",
]
