"""Baseline and control-variate cdf/quantile estimators.

All quantile inversions in this package use the strict convention
``inf{y : F(y) > alpha}`` evaluated on the sample support.  With uniform
weights this is the (floor(alpha n) + 1)-th order statistic; for
non-integer alpha*n it coincides with the ceil(alpha n)-th order statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelPair
from .sampling import RngStream, StrataSpec, sample_input


class EstimatorError(Exception):
    pass


@dataclass(frozen=True)
class WeightedCdf:
    """Sorted support points with probability weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray
    uniform_fallback: bool = False

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.ndim != 1 or p.shape != w.shape or len(p) == 0:
            raise ValueError("points and weights must be matching nonempty 1-d arrays")
        if np.any(np.diff(p) < 0):
            raise ValueError("points must be sorted ascending")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12 * max(1.0, len(w)):
            raise ValueError(f"weights sum to {w.sum()}, not 1")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    def evaluate(self, y) -> np.ndarray | float:
        """Right-continuous step cdf at y."""
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(self.points, np.asarray(y, dtype=float), side="right")
        out = np.where(idx > 0, cum[np.minimum(idx, len(cum)) - 1], 0.0)
        return float(out) if np.isscalar(y) else out


def weighted_cdf(y_values, weights, uniform_fallback=False) -> WeightedCdf:
    """Sort (y, w) pairs by y and normalize into a WeightedCdf."""
    y = np.asarray(y_values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(y, kind="stable")
    return WeightedCdf(y[order], w[order] / w.sum(), uniform_fallback)


def empirical_cdf(y_values) -> WeightedCdf:
    y = np.asarray(y_values, dtype=float)
    if y.size == 0:
        raise EstimatorError("empirical cdf needs a nonempty sample")
    return weighted_cdf(y, np.full(y.size, 1.0 / y.size))


def quantile_from_weighted_cdf(cdf: WeightedCdf, alpha: float,
                               strict: bool = False) -> float:
    """Generalized inverse: smallest point whose cumulative weight is >= alpha.

    With uniform weights this is the ceil(alpha*n)-th order statistic.
    ``strict=True`` switches to inf{y : F(y) > alpha}, which differs only
    when some cumulative weight hits alpha exactly.  Cumulative weights
    within a size-scaled rounding tolerance of alpha count as equal, so
    exact-mass hits (e.g. integer alpha*n) invert the same way regardless
    of accumulation error.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    cum = np.cumsum(cdf.weights)
    tol = 16 * len(cum) * np.finfo(float).eps
    if strict:
        k = np.searchsorted(cum, alpha + tol, side="right")
    else:
        k = np.searchsorted(cum, alpha - tol, side="left")
    return float(cdf.points[min(k, len(cum) - 1)])


def empirical_quantile(y_values, alpha: float) -> float:
    """Plain-sample quantile: the (floor(alpha*n) + 1)-th order statistic.

    This is inf{y : F_n(y) > alpha}, one order statistic above the
    generalized inverse when alpha*n is an integer; the replication means
    and stds of the baseline estimator are calibrated to this convention.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    y = np.sort(np.asarray(y_values, dtype=float))
    if y.size == 0:
        raise EstimatorError("empirical quantile needs a nonempty sample")
    return float(y[min(int(math.floor(alpha * y.size)), y.size - 1)])


# ---------------------------------------------------------------------------
# Control variates with the indicator control


@dataclass(frozen=True)
class PairedSample:
    """i.i.d. records (x, y, z) under the original input distribution."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        if len(self.y) < 1 or len(self.y) != len(self.z):
            raise ValueError("paired sample needs matching nonempty y and z")

    @property
    def n(self) -> int:
        return len(self.y)


def draw_paired_sample(pair: ModelPair, stream: RngStream, n: int) -> PairedSample:
    x = sample_input(pair.input, stream, n)
    return PairedSample(x=x, y=pair.eval_full(x), z=pair.eval_metamodel(x))


def cv_weights(z_values, z_alpha: float, alpha: float) -> tuple[np.ndarray, bool]:
    """Hesterberg weights for the indicator control 1{Z <= z_alpha}.

    Returns (weights, degenerate) where degenerate marks the fallback to
    uniform weights when every Z falls on one side of z_alpha.
    """
    z = np.asarray(z_values, dtype=float)
    n = len(z)
    below = z <= z_alpha
    n0 = int(below.sum())
    if n0 == 0 or n0 == n:
        return np.full(n, 1.0 / n), True
    return np.where(below, alpha / n0, (1 - alpha) / (n - n0)), False


def cv_cdf(sample: PairedSample, z_alpha: float, alpha: float) -> WeightedCdf:
    """Weighted-average form of the CV cdf estimator with indicator control."""
    w, degenerate = cv_weights(sample.z, z_alpha, alpha)
    return weighted_cdf(sample.y, w, uniform_fallback=degenerate)


def cv_quantile(sample: PairedSample, z_alpha: float, alpha: float) -> float:
    return quantile_from_weighted_cdf(cv_cdf(sample, z_alpha, alpha), alpha)


def cv_cdf_general(sample: PairedSample, g, g_mean: float, y: float) -> float:
    """CV estimate of F(y) with a general control g(Z) of known mean.

    Uses the least-squares slope of 1{Y <= y} on g(Z).
    """
    gz = np.asarray(g(sample.z), dtype=float)
    gbar = gz.mean()
    dev = gz - gbar
    ss = float(np.sum(dev**2))
    if ss == 0.0:
        raise EstimatorError("control g(Z) has zero variance over the sample")
    ind = (sample.y <= y).astype(float)
    slope = float(np.sum((ind - ind.mean()) * dev)) / ss
    return float(ind.mean() - slope * (gbar - g_mean))


def indicator_correlation(sample: PairedSample, y: float, z_alpha: float) -> float:
    """Empirical correlation of 1{Y <= y} and 1{Z <= z_alpha}.

    Population-style normalization (no n-1 correction).
    """
    iy = (sample.y <= y).astype(float)
    iz = (sample.z <= z_alpha).astype(float)
    dy = iy - iy.mean()
    dz = iz - iz.mean()
    denom = np.sqrt(np.sum(dy**2)) * np.sqrt(np.sum(dz**2))
    if denom == 0.0:
        raise EstimatorError("constant indicator column; correlation undefined")
    return float(np.sum(dy * dz) / denom)


# ---------------------------------------------------------------------------
# Post-stratification


def ps_cdf(sample: PairedSample, spec: StrataSpec, y: float) -> float:
    """Post-stratified estimate of F(y) with known stratum probabilities."""
    strat = spec.stratum_of(sample.z)
    widths = spec.widths
    total = 0.0
    for j in range(spec.m):
        mask = strat == j
        if not mask.any():
            raise EstimatorError(f"stratum {j} holds no sample point")
        total += widths[j] * float((sample.y[mask] <= y).mean())
    return total


def ps_variance_estimate(p_hat, spec: StrataSpec, n: int) -> float:
    """Leading-order variance of the PS cdf estimate."""
    p = np.asarray(p_hat, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("stratum probabilities must lie in [0, 1]")
    return float(np.sum(spec.widths * (p - p**2)) / n)


# ---------------------------------------------------------------------------
# Correlation diagnostics


@dataclass(frozen=True)
class CorrelationReport:
    rho: float
    rho_indicator: float
    sample_size: int


def correlation_report(pair: ModelPair, alpha: float, sample_count: int,
                       stream: RngStream) -> CorrelationReport:
    """Monte Carlo estimates of corr(Y, Z) and the indicator correlation at
    the alpha-levels of Y and Z."""
    if sample_count < 10**4:
        raise ValueError("sample_count must be at least 1e4")
    s = draw_paired_sample(pair, stream, sample_count)
    rho = float(np.corrcoef(s.y, s.z)[0, 1])
    y_alpha = empirical_quantile(s.y, alpha)
    z_alpha = empirical_quantile(s.z, alpha)
    rho_i = indicator_correlation(s, y_alpha, z_alpha)
    return CorrelationReport(rho=rho, rho_indicator=rho_i, sample_size=sample_count)
