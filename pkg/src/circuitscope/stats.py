"""Two-sample statistics for comparing metric samples between arms."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special
from scipy.stats import norm

STATS_CSV_HEADER = [
    "comparison", "metric", "timestep", "test", "statistic", "p", "adjusted_p",
    "d", "ci_low", "ci_high", "n_a", "n_b", "power",
]


class StatsError(ValueError):
    pass


@dataclass
class SampleSet:
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size == 0 or not np.all(np.isfinite(self.values)):
            raise StatsError(f"sample set {self.label!r} must be nonempty and finite")

    def __len__(self) -> int:
        return self.values.size


@dataclass
class TestResult:
    kind: str
    statistic: float | None = None
    p_value: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    power: float | None = None
    adjusted_p: float | None = None
    n_a: int = 0
    n_b: int = 0
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _values(x, minimum: int = 1, name: str = "sample") -> np.ndarray:
    v = x.values if isinstance(x, SampleSet) else np.asarray(x, dtype=np.float64).ravel()
    if v.size < minimum:
        raise StatsError(f"{name} needs at least {minimum} values, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise StatsError(f"{name} contains non-finite values")
    return v


def effect_label(d: float) -> str:
    d = abs(d)
    if d < 0.2:
        return "negligible"
    if d < 0.5:
        return "small"
    if d < 0.8:
        return "medium"
    return "large"


def pooled_sd(a, b) -> float:
    a, b = _values(a, 2, "a"), _values(b, 2, "b")
    na, nb = a.size, b.size
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    return math.sqrt(pooled)


def cohens_d(a, b) -> tuple[float, str]:
    """Standardized mean difference (mean_a - mean_b) / pooled SD, with its size label."""
    a, b = _values(a, 2, "a"), _values(b, 2, "b")
    sd = pooled_sd(a, b)
    if sd == 0.0:
        raise StatsError("Cohen's d undefined: pooled standard deviation is zero")
    d = (a.mean() - b.mean()) / sd
    return float(d), effect_label(d)


def bootstrap_ci(a, b, resamples: int = 10_000, coverage: float = 0.95, seed: int = 0, chunk: int = 1000) -> tuple[float, float]:
    """Percentile bootstrap interval for mean(a) - mean(b).

    Resamples are drawn in chunks, each from its own stream derived from
    (seed, chunk number), so the result does not depend on how chunks are run.
    """
    a, b = _values(a, 2, "a"), _values(b, 2, "b")
    diffs = np.empty(resamples)
    for c, start in enumerate(range(0, resamples, chunk)):
        m = min(chunk, resamples - start)
        rng = np.random.default_rng([seed, c])
        ia = rng.integers(0, a.size, size=(m, a.size))
        ib = rng.integers(0, b.size, size=(m, b.size))
        diffs[start : start + m] = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    tail = (1.0 - coverage) / 2.0 * 100.0
    lo, hi = np.percentile(diffs, [tail, 100.0 - tail])
    return float(lo), float(hi)


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def welch_t_test(a, b) -> tuple[float, float, float]:
    """Welch's unequal-variance t test: (t, two-sided p, Welch-Satterthwaite df)."""
    a, b = _values(a, 2, "a"), _values(b, 2, "b")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va == 0.0 and vb == 0.0:
        raise StatsError("Welch t test undefined: both samples have zero variance")
    se = math.sqrt(va + vb)
    t = (a.mean() - b.mean()) / se
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), t_sf_two_sided(t, df), float(df)


def ks_statistic(a, b) -> float:
    a, b = np.sort(_values(a, 1, "a")), np.sort(_values(b, 1, "b"))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_test(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov D and its asymptotic p-value."""
    a, b = _values(a, 1, "a"), _values(b, 1, "b")
    D = ks_statistic(a, b)
    n_eff = a.size * b.size / (a.size + b.size)
    p = float(special.kolmogorov(math.sqrt(n_eff) * D))
    return D, min(1.0, max(0.0, p))


def power_two_sample(d: float, n_per_group: int, alpha: float = 0.05) -> float:
    """Normal-approximation power of a two-sided two-sample t test: Phi(d sqrt(n/2) - z_{1-alpha/2})."""
    if d < 0:
        raise StatsError("effect size must be non-negative")
    if n_per_group < 2:
        raise StatsError("power needs at least 2 observations per group")
    return float(norm.cdf(d * math.sqrt(n_per_group / 2.0) - norm.ppf(1.0 - alpha / 2.0)))


def bonferroni(p_values) -> list[float]:
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise StatsError("p-values must lie in [0, 1]")
    return np.minimum(1.0, p * p.size).tolist()


def format_p(p: float) -> str:
    return "<1e-12" if p < 1e-12 else f"{p:.3g}"


def compare(a, b, resamples: int = 10_000, coverage: float = 0.95, alpha: float = 0.05, seed: int = 0) -> dict:
    """Run the full battery on one pair of samples; p-values are unadjusted."""
    a, b = _values(a, 2, "a"), _values(b, 2, "b")
    out: dict = {"n_a": int(a.size), "n_b": int(b.size)}
    try:
        t, p, df = welch_t_test(a, b)
    except StatsError:
        t, p, df = 0.0, 1.0, float("nan")
    out.update(welch_t=t, welch_p=p, welch_df=df)
    D, ks_p = ks_test(a, b)
    out.update(ks_d=D, ks_p=ks_p)
    try:
        d, label = cohens_d(a, b)
    except StatsError:
        d, label = 0.0, "negligible"
    out.update(cohens_d=d, effect=label)
    out["ci_low"], out["ci_high"] = bootstrap_ci(a, b, resamples, coverage, seed)
    out["power"] = power_two_sample(abs(d), min(a.size, b.size), alpha)
    return out
