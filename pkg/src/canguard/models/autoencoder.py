"""Fully-connected autoencoder authenticator (tanh hidden, identity output).

Trained by seeded mini-batch gradient descent on mean squared
reconstruction error over the authorized driver's windows only; the
decision threshold is a quantile of the training reconstruction errors.
Backpropagation is hand-rolled and is verified against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DivergenceError, TrainingError
from ..features import FeatureVector, check_schema, to_matrix
from .decision import AuthDecision, Verdict

DEFAULT_HIDDEN = (32, 8, 32)
DEFAULT_EPOCHS = 200
DEFAULT_LEARNING_RATE = 0.01
DEFAULT_BATCH = 32
DEFAULT_QUANTILE = 0.99


@dataclass(frozen=True)
class AutoencoderModel:
    sizes: tuple[int, ...]          # input, hidden..., output (mirrored)
    weights: list[np.ndarray]       # weights[i]: (sizes[i+1], sizes[i])
    biases: list[np.ndarray]
    threshold: float
    quantile: float
    schema: tuple[str, ...]
    loss_history: tuple[float, ...] = ()


def init_params(sizes: tuple[int, ...], seed: int):
    """Uniform(-r, r) weights with r = 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        r = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-r, r, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def forward(weights, biases, X: np.ndarray) -> list[np.ndarray]:
    """Activations per layer; tanh on hidden layers, identity on the output."""
    acts = [X]
    a = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W.T + b
        a = z if i == last else np.tanh(z)
        acts.append(a)
    return acts


def loss_and_grads(weights, biases, X: np.ndarray):
    """Mean squared reconstruction error and its analytic gradients."""
    acts = forward(weights, biases, X)
    out = acts[-1]
    resid = out - X
    batch, dim = X.shape
    loss = float((resid * resid).mean())
    delta = 2.0 * resid / (batch * dim)
    gw = [None] * len(weights)
    gb = [None] * len(biases)
    for i in range(len(weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i]) * (1.0 - acts[i] * acts[i])
    return loss, gw, gb


def reconstruction_errors(model_or_parts, X: np.ndarray) -> np.ndarray:
    """Per-sample mean squared reconstruction error."""
    if isinstance(model_or_parts, AutoencoderModel):
        weights, biases = model_or_parts.weights, model_or_parts.biases
    else:
        weights, biases = model_or_parts
    out = forward(weights, biases, X)[-1]
    return ((out - X) ** 2).mean(axis=1)


def autoencoder_train(
    vectors: list[FeatureVector],
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    epochs: int = DEFAULT_EPOCHS,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    seed: int = 0,
    *,
    batch_size: int = DEFAULT_BATCH,
    quantile: float = DEFAULT_QUANTILE,
) -> AutoencoderModel:
    """Deterministic given the seed; reports per-epoch loss.

    Raises DivergenceError with the offending epoch if the loss goes
    non-finite.
    """
    X, schema = to_matrix(vectors)
    n, dim = X.shape
    if n < 2:
        raise TrainingError("autoencoder needs at least 2 training vectors")
    if tuple(hidden) != tuple(reversed(hidden)):
        raise TrainingError(f"hidden layout {hidden} is not mirrored")
    sizes = (dim, *hidden, dim)
    weights, biases = init_params(sizes, seed)
    rng = np.random.default_rng(seed + 1)

    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for i0 in range(0, n, batch_size):
            batch = X[order[i0:i0 + batch_size]]
            _, gw, gb = loss_and_grads(weights, biases, batch)
            for i in range(len(weights)):
                weights[i] -= learning_rate * gw[i]
                biases[i] -= learning_rate * gb[i]
        loss = float(reconstruction_errors((weights, biases), X).mean())
        if not np.isfinite(loss):
            raise DivergenceError(epoch, learning_rate)
        history.append(loss)

    errors = reconstruction_errors((weights, biases), X)
    threshold = float(np.quantile(errors, quantile))
    return AutoencoderModel(sizes, weights, biases, threshold, quantile,
                            schema, tuple(history))


def autoencoder_decide(model: AutoencoderModel, vector: FeatureVector) -> AuthDecision:
    check_schema(model.schema, vector.schema)
    score = float(reconstruction_errors(model, vector.values[None, :])[0])
    verdict = Verdict.AUTHORIZED if score <= model.threshold else Verdict.UNAUTHORIZED
    return AuthDecision(verdict, score, model.threshold, vector.window_start)
