"""Circuit metrics: attention entropy/specialization, feature complexity,
histogram mutual information, information-flow efficiency, divergence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .trace import TraceRecord

ROW_TOL = 1e-5
METRIC_KINDS = ("entropy", "specialization", "complexity", "ife", "divergence")
METRIC_CSV_HEADER = ["metric", "layer", "head", "timestep", "arm", "value", "n"]


class MetricError(ValueError):
    pass


@dataclass
class MetricValue:
    kind: str
    value: float
    layer: str = ""
    head: int | None = None
    timestep: int | None = None
    arm: str = ""
    sample_count: int = 1

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise MetricError(f"unknown metric kind {self.kind!r}")

    def csv_row(self) -> list:
        return [
            self.kind,
            self.layer,
            "" if self.head is None else self.head,
            "" if self.timestep is None else self.timestep,
            self.arm,
            repr(float(self.value)),
            self.sample_count,
        ]

    def to_dict(self) -> dict:
        return asdict(self)


def _check_rows(A: np.ndarray, tol: float = ROW_TOL) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise MetricError(f"attention map must be 2-D [queries, keys], got shape {A.shape}")
    sums = A.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(A < -tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise MetricError(f"attention rows are not normalized (max |row sum - 1| = {worst:.3g})")
    return np.clip(A, 0.0, None)


def _plogp_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return -math.fsum((p * np.log2(p)).tolist())


def attention_entropy(A, per_row: bool = False) -> float:
    """Shannon entropy in bits of an attention map [queries, keys].

    By default the map is divided by its query count so it forms one joint
    distribution over (query, key); ``per_row=True`` instead averages the
    entropy of each row.
    """
    A = _check_rows(A)
    Q = A.shape[0]
    if per_row:
        return math.fsum(_plogp_bits(row) for row in A) / Q
    return _plogp_bits((A / Q).ravel())


def max_entropy(shape: tuple[int, int], per_row: bool = False) -> float:
    Q, K = shape
    return math.log2(K) if per_row else math.log2(Q * K)


def specialization(A, per_row: bool = False) -> float:
    """(H_max - H) / H_max, in [0, 1]; 0 for uniform attention."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] < 2:
        raise MetricError(f"specialization needs at least 2 keys, got shape {A.shape}")
    h_max = max_entropy(A.shape, per_row)
    s = (h_max - attention_entropy(A, per_row)) / h_max
    return min(1.0, max(0.0, s))


def feature_complexity(F, eps_sparsity: float = 1e-6) -> float:
    """Population std x (max - min) x fraction of entries with |x| < eps_sparsity."""
    F = np.asarray(F, dtype=np.float64).ravel()
    if F.size == 0:
        raise MetricError("feature_complexity of an empty tensor")
    sparsity = float(np.mean(np.abs(F) < eps_sparsity))
    return float(F.std()) * float(F.max() - F.min()) * sparsity


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.int64)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _paired(X, Y, bins: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64).ravel()
    Y = np.asarray(Y, dtype=np.float64).ravel()
    if X.size != Y.size:
        raise MetricError(f"paired samples differ in length: {X.size} vs {Y.size}")
    if X.size < bins:
        raise MetricError(f"{X.size} samples is fewer than {bins} bins; use a smaller bin count")
    return X, Y


def binned_entropy(X, bins: int = 64) -> float:
    """Plug-in entropy (bits) of X over ``bins`` equal-width bins spanning its range."""
    X = np.asarray(X, dtype=np.float64).ravel()
    counts = np.bincount(_bin_index(X, bins), minlength=bins)
    return _plogp_bits(counts / X.size)


def mutual_information(X, Y, bins: int = 64) -> float:
    """Histogram plug-in mutual information in bits between paired samples."""
    X, Y = _paired(X, Y, bins)
    ix, iy = _bin_index(X, bins), _bin_index(Y, bins)
    n = X.size
    hx = _plogp_bits(np.bincount(ix, minlength=bins) / n)
    hy = _plogp_bits(np.bincount(iy, minlength=bins) / n)
    hxy = _plogp_bits(np.bincount(ix * bins + iy, minlength=bins * bins) / n)
    return max(0.0, hx + hy - hxy)


def information_flow_efficiency(F_l, F_next, bins: int = 64, clamp: bool = True) -> float:
    """MI(F_l, F_next) / max(H(F_l), H(F_next)) under one shared binning rule."""
    X, Y = _paired(F_l, F_next, bins)
    if X.min() == X.max() or Y.min() == Y.max():
        raise MetricError("information flow undefined for a constant layer (zero entropy)")
    hx, hy = binned_entropy(X, bins), binned_entropy(Y, bins)
    ife = mutual_information(X, Y, bins) / max(hx, hy)
    return min(ife, 1.0) if clamp else ife


def pair_layers(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduce two [B, C, H, W] activations to paired per-(sample, location) values.

    Channels are averaged and the finer map is average-pooled onto the coarser
    grid, so both sides index the same (sample, row, col) cells.
    """
    a = np.asarray(a, dtype=np.float64).mean(axis=1)
    b = np.asarray(b, dtype=np.float64).mean(axis=1)
    side = min(a.shape[-1], b.shape[-1])

    def pool(x):
        f = x.shape[-1] // side
        return x.reshape(x.shape[0], side, f, side, f).mean(axis=(2, 4))

    return pool(a).ravel(), pool(b).ravel()


def divergence(series_a: Mapping[int, Sequence[float]], series_b: Mapping[int, Sequence[float]]) -> dict[int, float]:
    """Per-timestep |mean_A - mean_B| of a per-head metric between two arms."""
    if set(series_a) != set(series_b):
        raise MetricError(f"timestep mismatch: {sorted(series_a)} vs {sorted(series_b)}")
    return {
        t: abs(float(np.mean(series_a[t])) - float(np.mean(series_b[t])))
        for t in sorted(series_a)
    }


def circuit_complexity(
    records: Iterable[TraceRecord], timestep: int, layers: Sequence[str] | None = None, eps_sparsity: float = 1e-6
) -> tuple[float, dict[str, float]]:
    """Mean feature complexity over hooked layers at ``timestep``, plus the per-layer values.

    Batches of the same layer are pooled before the metric is taken.
    """
    by_layer: dict[str, list[np.ndarray]] = {}
    for r in records:
        if r.kind == "activation" and r.timestep == timestep and (layers is None or r.name in layers):
            by_layer.setdefault(r.name, []).append(r.payload)
    if not by_layer:
        raise MetricError(f"no activation records at timestep {timestep}")
    per_layer = {
        name: feature_complexity(np.concatenate([p.ravel() for p in parts]), eps_sparsity)
        for name, parts in by_layer.items()
    }
    return float(np.mean(list(per_layer.values()))), per_layer


def head_maps(record: TraceRecord) -> np.ndarray:
    """Attention record payload as a stack of [queries, keys] maps."""
    p = record.payload
    return p.reshape((-1,) + p.shape[-2:])


def head_entropy(record: TraceRecord, per_row: bool = False) -> float:
    return float(np.mean([attention_entropy(m, per_row) for m in head_maps(record)]))


def head_specialization(record: TraceRecord, per_row: bool = False) -> float:
    return float(np.mean([specialization(m, per_row) for m in head_maps(record)]))


class AttentionProfiler(TransformerMixin, BaseEstimator):
    """Map attention maps [n, queries, keys] to (entropy, specialization) features."""

    def __init__(self, per_row: bool = False):
        self.per_row = per_row

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 3:
            raise ValueError(f"expected [n, queries, keys], got shape {X.shape}")
        self.n_queries_, self.n_keys_ = X.shape[1:]
        self.max_entropy_ = max_entropy((self.n_queries_, self.n_keys_), self.per_row)
        return self

    def transform(self, X):
        check_is_fitted(self, "max_entropy_")
        X = np.asarray(X)
        if X.shape[1:] != (self.n_queries_, self.n_keys_):
            raise ValueError(f"fitted on maps of shape {(self.n_queries_, self.n_keys_)}, got {X.shape[1:]}")
        out = np.empty((len(X), 2))
        for i, m in enumerate(X):
            out[i] = attention_entropy(m, self.per_row), specialization(m, self.per_row)
        return out

    def get_feature_names_out(self, input_features=None):
        return np.array(["entropy", "specialization"], dtype=object)
