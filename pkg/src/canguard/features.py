"""Window feature extraction, lag features, standardization, and PCA.

Each time window becomes a fixed-length vector of per-ID statistics:
presence flag, frames/second, inter-arrival mean and stddev, and the
mean and stddev of each of up to 8 data bytes (treated as unsigned
integers; no signal decoding). The schema is a pure function of the
window spec and ID vocabulary, so extraction is reproducible and
models can hard-fail on schema drift.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._codec_py import FLAG_EXTENDED
from .errors import DegenerateDataError, SchemaMismatchError, TrainingError
from .traces import FrameBlock, Trace, id_text

PER_ID_FIELDS = (
    ["presence", "rate", "iat_mean", "iat_std"]
    + [f"b{j}_mean" for j in range(8)]
    + [f"b{j}_std" for j in range(8)]
)
FEATURES_PER_ID = len(PER_ID_FIELDS)


@dataclass(frozen=True, slots=True)
class WindowSpec:
    length: float = 60.0
    stride: float = 10.0
    min_frames: int = 100

    def __post_init__(self):
        if not 0 < self.stride <= self.length:
            raise ValueError("require 0 < stride <= length")
        if self.min_frames < 1:
            raise ValueError("min_frames must be >= 1")


@dataclass(frozen=True, slots=True)
class FeatureVector:
    values: np.ndarray
    schema: tuple[str, ...]
    window_start: float
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if len(self.values) != len(self.schema):
            raise ValueError("values length must match schema length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")


def vocab_from_trace(trace: Trace) -> list[str]:
    """Sorted canonical ID list observed in a trace (the per-vehicle ID set)."""
    b = trace.block
    keys = _id_keys(b.ids, b.flags)
    out = set()
    for k in np.unique(keys):
        out.add(id_text(int(k) & 0xFFFF_FFFF, bool(int(k) >> 32)))
    return sorted(out)


def build_schema(id_vocab: list[str]) -> tuple[str, ...]:
    return tuple(f"{ident}:{field}" for ident in id_vocab for field in PER_ID_FIELDS)


def vocab_from_schema(schema: tuple[str, ...]) -> list[str]:
    """Recover the ID vocabulary from a raw window schema."""
    vocab = list(dict.fromkeys(name.split(":", 1)[0] for name in schema))
    if build_schema(vocab) != tuple(schema):
        raise SchemaMismatchError(
            "schema is not a raw window schema (lagged or PCA-projected?)"
        )
    return vocab


def _id_keys(ids: np.ndarray, flags: np.ndarray) -> np.ndarray:
    return ids.astype(np.uint64) | (np.uint64(1) << np.uint64(32)) * (flags & FLAG_EXTENDED)


def _vocab_keys(id_vocab: list[str]) -> dict[int, int]:
    keys = {}
    for pos, ident in enumerate(id_vocab):
        key = int(ident, 16) | ((1 << 32) if len(ident) == 8 else 0)
        keys[key] = pos
    return keys


def window_values(block: FrameBlock, i0: int, i1: int, length: float,
                  vocab_pos: dict[int, int], n_ids: int) -> np.ndarray:
    """Feature values for frames [i0:i1) of a window of the given length."""
    out = np.zeros(n_ids * FEATURES_PER_ID)
    keys = _id_keys(block.ids[i0:i1], block.flags[i0:i1])
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    bounds = np.r_[starts, len(keys)]
    for g in range(len(starts)):
        pos = vocab_pos.get(int(sorted_keys[starts[g]]))
        if pos is None:
            continue  # not in the fixed vocabulary
        idxs = order[bounds[g]:bounds[g + 1]] + i0
        base = pos * FEATURES_PER_ID
        count = len(idxs)
        out[base] = 1.0
        out[base + 1] = count / length
        t = block.ts[idxs]
        if count >= 2:
            iat = np.diff(t)
            out[base + 2] = iat.mean()
            out[base + 3] = iat.std()
        pay = block.payload[idxs].astype(np.float64)
        valid = np.arange(8)[None, :] < block.dlc[idxs][:, None]
        cnt = valid.sum(axis=0)
        ok = cnt > 0
        sums = (pay * valid).sum(axis=0)
        mean = np.divide(sums, cnt, out=np.zeros(8), where=ok)
        sq = (pay * pay * valid).sum(axis=0)
        var = np.divide(sq, cnt, out=np.zeros(8), where=ok) - mean * mean
        out[base + 4: base + 12] = mean
        out[base + 12: base + 20] = np.sqrt(np.clip(var, 0.0, None))
    return out


def extract_windows(trace: Trace, spec: WindowSpec, id_vocab: list[str]) -> list[FeatureVector]:
    """One FeatureVector per window holding at least ``min_frames`` frames.

    Windows anchor at the first frame's timestamp. A frame sitting exactly
    on a window boundary belongs to the earlier window; the very first
    frame belongs to window 0.
    """
    if not id_vocab:
        raise ValueError("id_vocab must be non-empty")
    schema = build_schema(id_vocab)
    vocab_pos = _vocab_keys(id_vocab)
    b = trace.block
    out: list[FeatureVector] = []
    if not len(b):
        return out
    label = trace.meta.driver_label if trace.meta.driver_label != "unknown" else None
    t0 = float(b.ts[0])
    u = b.ts - t0
    duration = float(u[-1])
    k = 0
    while k * spec.stride + spec.length <= duration + 1e-9:
        start_u = k * spec.stride
        end_u = start_u + spec.length
        i0 = int(np.searchsorted(u, start_u, side="left" if k == 0 else "right"))
        i1 = int(np.searchsorted(u, end_u, side="right"))
        if i1 - i0 >= spec.min_frames:
            values = window_values(b, i0, i1, spec.length, vocab_pos, len(id_vocab))
            out.append(FeatureVector(values, schema, t0 + start_u, label))
        k += 1
    return out


def add_lag_features(vectors: list[FeatureVector], lags: list[int]) -> list[FeatureVector]:
    """Append the values of earlier windows; drops the first max(lags) windows."""
    if not lags or any(l <= 0 or l != int(l) for l in lags):
        raise ValueError("lags must be positive integers")
    lags = [int(l) for l in lags]
    if max(lags) >= len(vectors):
        raise ValueError("max lag must be smaller than the number of windows")
    starts = [v.window_start for v in vectors]
    if starts != sorted(starts):
        raise ValueError("vectors must be time-ordered")
    base_schema = vectors[0].schema
    schema = tuple(base_schema) + tuple(
        f"{name}:lag{l}" for l in lags for name in base_schema
    )
    out = []
    for i in range(max(lags), len(vectors)):
        parts = [vectors[i].values] + [vectors[i - l].values for l in lags]
        out.append(FeatureVector(np.concatenate(parts), schema,
                                 vectors[i].window_start, vectors[i].label))
    return out


# --- matrix helpers ---

def to_matrix(vectors: list[FeatureVector]) -> tuple[np.ndarray, tuple[str, ...]]:
    if not vectors:
        raise TrainingError("no feature vectors")
    schema = vectors[0].schema
    for v in vectors:
        if v.schema != schema:
            raise SchemaMismatchError("inconsistent schemas across vectors")
    return np.stack([v.values for v in vectors]), schema


def check_schema(expected: tuple[str, ...], got: tuple[str, ...]) -> None:
    if tuple(expected) != tuple(got):
        raise SchemaMismatchError(
            f"schema mismatch: expected {len(expected)} features, got {len(got)}; "
            "first difference at "
            + next((f"{i} ({e!r} != {g!r})" for i, (e, g) in enumerate(zip(expected, got)) if e != g),
                   "length")
        )


# --- standardization ---

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray  # floored, constant columns carry STD_FLOOR
    schema: tuple[str, ...]


def fit_standardizer(vectors: list[FeatureVector]) -> Standardizer:
    if len(vectors) < 2:
        raise TrainingError("standardizer needs at least 2 vectors")
    X, schema = to_matrix(vectors)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return Standardizer(mean, np.maximum(std, STD_FLOOR), schema)


def apply_standardizer(s: Standardizer, vectors: list[FeatureVector]) -> list[FeatureVector]:
    out = []
    for v in vectors:
        check_schema(s.schema, v.schema)
        out.append(FeatureVector((v.values - s.mean) / s.std, v.schema,
                                 v.window_start, v.label))
    return out


# --- principal component analysis ---

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray          # rows are principal directions
    explained_variance: np.ndarray  # non-increasing
    schema: tuple[str, ...]

    @property
    def out_schema(self) -> tuple[str, ...]:
        return tuple(f"pc{i}" for i in range(len(self.components)))


def fit_pca(vectors: list[FeatureVector], n_components: int) -> PcaModel:
    """PCA via eigendecomposition of the sample covariance (ddof=1).

    Deterministic sign convention: the largest-magnitude entry of each
    component is made positive.
    """
    X, schema = to_matrix(vectors)
    n, dim = X.shape
    if not 1 <= n_components <= dim:
        raise ValueError(f"n_components must be in 1..{dim}")
    if n < 2:
        raise TrainingError("PCA needs at least 2 vectors")
    mean = X.mean(axis=0)
    centered = X - mean
    if not np.any(np.abs(centered) > 1e-15):
        raise DegenerateDataError("all input vectors are identical (rank 0)")
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    comps = eigvecs[:, order].T
    for i in range(len(comps)):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    comps = comps[:n_components]
    gram = comps @ comps.T
    if np.max(np.abs(gram - np.eye(n_components))) > 1e-8:
        raise DegenerateDataError("covariance eigenbasis is not orthonormal")
    return PcaModel(mean, comps, eigvals[:n_components], schema)


def project(model: PcaModel, vector: FeatureVector) -> FeatureVector:
    check_schema(model.schema, vector.schema)
    vals = model.components @ (vector.values - model.mean)
    return FeatureVector(vals, model.out_schema, vector.window_start, vector.label)


def project_all(model: PcaModel, vectors: list[FeatureVector]) -> list[FeatureVector]:
    return [project(model, v) for v in vectors]


def reconstruct(model: PcaModel, projected: FeatureVector) -> np.ndarray:
    return model.mean + projected.values @ model.components


# --- CSV persistence ---

def write_features_csv(vectors: list[FeatureVector], path) -> None:
    """Persist a feature matrix; header = window_start, label, then the schema."""
    _, schema = to_matrix(vectors)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "label", *schema])
        for v in vectors:
            w.writerow([repr(float(v.window_start)), v.label or "",
                        *(repr(float(x)) for x in v.values)])


def read_features_csv(path) -> list[FeatureVector]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["window_start", "label"]:
        raise SchemaMismatchError(f"{path} is not a feature CSV")
    schema = tuple(rows[0][2:])
    out = []
    for row in rows[1:]:
        if not row:
            continue
        out.append(FeatureVector(np.array([float(x) for x in row[2:]]),
                                 schema, float(row[0]), row[1] or None))
    return out
