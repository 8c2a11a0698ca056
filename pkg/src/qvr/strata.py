"""Controlled stratification: fixed allocation, optimal allocation, and the
two-phase adaptive pipelines for cdf and quantile estimation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimators import quantile_from_weighted_cdf, weighted_cdf
from .model import ModelPair
from .sampling import (
    AllocationPlan,
    RngStream,
    SamplingError,
    StrataSpec,
    StratifiedSample,
    evaluate_full,
    sample_strata,
)


class StrataError(Exception):
    pass


@dataclass(frozen=True)
class ConditionalProbs:
    """Per-stratum estimates of P_j(y) = P(Y <= y | Z in stratum j)."""

    p_hat: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_hat, dtype=float)
        c = np.asarray(self.counts, dtype=int)
        if p.shape != c.shape or p.ndim != 1:
            raise ValueError("p_hat and counts must be matching 1-d arrays")
        if np.any((p < 0) | (p > 1)):
            raise ValueError("conditional probabilities must lie in [0, 1]")
        object.__setattr__(self, "p_hat", p)
        object.__setattr__(self, "counts", c)


def _require_filled(sample: StratifiedSample, spec: StrataSpec):
    if sample.m != spec.m:
        raise StrataError("sample stratum count does not match spec")
    for j, yj in enumerate(sample.y):
        if yj is None:
            raise StrataError(f"stratum {j} has no full-model outputs")
        if len(yj) == 0 and spec.widths[j] > 0:
            raise StrataError(f"stratum {j} has positive weight but no points")


def conditional_probs(sample: StratifiedSample, spec: StrataSpec,
                      y: float) -> ConditionalProbs:
    _require_filled(sample, spec)
    p = np.array([float((yj <= y).mean()) if len(yj) else 0.0 for yj in sample.y])
    return ConditionalProbs(p_hat=p, counts=sample.counts)


def cs_cdf(sample: StratifiedSample, spec: StrataSpec,
           y: float) -> tuple[float, ConditionalProbs]:
    """Stratified estimate of F(y): sum of width_j * P_hat_j(y)."""
    p = conditional_probs(sample, spec, y)
    return float(np.sum(spec.widths * p.p_hat)), p


def cs_quantile(sample: StratifiedSample, spec: StrataSpec, alpha: float,
                strict: bool = False) -> float:
    """Quantile of the stratified cdf, inverted on the pooled sorted outputs.

    Each output in stratum j carries weight width_j / N_j, so the pooled
    weighted cdf equals the stratified cdf at every support point.
    ``strict`` selects the inf{y : F(y) > alpha} inversion used by the
    adaptive pilot step.
    """
    _require_filled(sample, spec)
    ys, ws = [], []
    for j, yj in enumerate(sample.y):
        if len(yj) == 0:
            continue
        ys.append(yj)
        ws.append(np.full(len(yj), spec.widths[j] / len(yj)))
    cdf = weighted_cdf(np.concatenate(ys), np.concatenate(ws))
    return quantile_from_weighted_cdf(cdf, alpha, strict=strict)


def cs_variance(p: ConditionalProbs, spec: StrataSpec, plan: AllocationPlan) -> float:
    """Variance of the stratified cdf estimate at fixed allocation."""
    counts = np.asarray(plan.counts, dtype=float)
    widths = spec.widths
    active = widths > 0
    if np.any(active & (counts == 0)):
        raise StrataError("positive-weight stratum with zero allocation")
    q = widths**2 * (p.p_hat - p.p_hat**2)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, q / counts, 0.0)
    return float(terms.sum())


def optimal_allocation(p: ConditionalProbs, spec: StrataSpec) -> np.ndarray:
    """Allocation fractions minimizing the stratified variance.

    beta*_j is proportional to width_j * sqrt(P_j (1 - P_j)); strata whose
    within-stratum indicator has zero variance get zero allocation.
    """
    root_q = spec.widths * np.sqrt(p.p_hat - p.p_hat**2)
    total = root_q.sum()
    if total == 0.0:
        raise StrataError("all strata have zero indicator variance; "
                          "no allocation defined")
    return root_q / total


def ocs_variance(p: ConditionalProbs, spec: StrataSpec) -> float:
    """n-times the variance of the optimally allocated stratified estimate."""
    return float(np.sum(spec.widths * np.sqrt(p.p_hat - p.p_hat**2)) ** 2)


def ps_form_variance(p: ConditionalProbs, spec: StrataSpec) -> float:
    """n-times the variance under proportional allocation."""
    return float(np.sum(spec.widths * (p.p_hat - p.p_hat**2)))


# ---------------------------------------------------------------------------
# Adaptive two-phase pipelines


@dataclass(frozen=True)
class AcsConfig:
    """Two-phase adaptive stratification setup.

    ``pilot_per_stratum`` defaults to n/10 points in every stratum;
    ``pilot_exponent`` instead sizes the whole pilot as n**gamma split by
    ``pilot_beta`` (default proportional to stratum widths).
    """

    spec: StrataSpec
    n: int
    pilot_per_stratum: int | None = None
    pilot_exponent: float | None = None
    pilot_beta: tuple[float, ...] | None = None
    min_per_stratum: int = 1

    def __post_init__(self):
        if self.n < 2 * self.spec.m:
            raise ValueError("budget too small for a pilot phase")
        if self.pilot_exponent is not None and not 0 < self.pilot_exponent < 1:
            raise ValueError("pilot exponent must lie in (0, 1)")
        if self.pilot_beta is not None:
            b = np.asarray(self.pilot_beta, dtype=float)
            if len(b) != self.spec.m or np.any(b <= 0) or abs(b.sum() - 1) > 1e-9:
                raise ValueError("pilot_beta must be positive and sum to 1")
        if self.min_per_stratum < 1:
            raise ValueError("min_per_stratum must be >= 1")

    def pilot_counts(self) -> np.ndarray:
        m = self.spec.m
        if self.pilot_per_stratum is not None:
            counts = np.full(m, int(self.pilot_per_stratum))
        elif self.pilot_exponent is not None:
            pilot_total = int(round(self.n**self.pilot_exponent))
            beta = (np.asarray(self.pilot_beta, dtype=float)
                    if self.pilot_beta is not None else self.spec.widths)
            counts = largest_remainder(beta * pilot_total)
        else:
            counts = np.full(m, max(self.n // 10, 1))
        counts = np.maximum(counts, self.min_per_stratum)
        if counts.sum() >= self.n:
            raise ValueError("pilot consumes the entire budget")
        return counts


@dataclass
class AcsResult:
    """Outcome of an adaptive run: estimate, allocations and diagnostics."""

    estimate: float
    beta_tilde: np.ndarray
    final_counts: np.ndarray
    realized_fractions: np.ndarray
    pilot_quantile: float | None
    conditional: ConditionalProbs
    draw_count: int
    proportional_fallback: bool = False
    floored_strata: tuple[int, ...] = ()
    sample: StratifiedSample | None = None


def largest_remainder(targets: np.ndarray) -> np.ndarray:
    """Round nonnegative reals to integers preserving their (rounded) sum."""
    t = np.asarray(targets, dtype=float)
    if np.any(t < 0):
        raise ValueError("targets must be nonnegative")
    floors = np.floor(t).astype(int)
    short = int(round(t.sum())) - int(floors.sum())
    if short > 0:
        order = np.argsort(-(t - floors), kind="stable")
        floors[order[:short]] += 1
    return floors


def phase_two_counts(beta_tilde: np.ndarray, pilot: np.ndarray, n: int,
                     min_per_stratum: int, widths: np.ndarray
                     ) -> tuple[np.ndarray, tuple[int, ...]]:
    """Phase-two allocation toward targets beta_tilde * n.

    Pilot points are kept, so a stratum whose pilot already exceeds its
    target contributes no phase-two points; its surplus is redistributed to
    the other strata proportionally to their deficits.  Positive-width strata
    are floored at min_per_stratum total points; floored strata are reported.
    """
    targets = largest_remainder(beta_tilde * n)
    floored = []
    for j in range(len(targets)):
        if widths[j] > 0 and targets[j] < min_per_stratum:
            floored.append(j)
            targets[j] = min_per_stratum
    budget = n - int(pilot.sum())
    if budget < 0:
        raise StrataError("pilot already exceeds the total budget")
    deficits = np.maximum(targets - pilot, 0).astype(float)
    if deficits.sum() > 0:
        extra = largest_remainder(budget * deficits / deficits.sum())
    else:
        extra = largest_remainder(budget * widths / widths.sum())
    gap = budget - int(extra.sum())
    if gap != 0:
        extra[int(np.argmax(extra))] += gap
    return extra.astype(int), tuple(floored)


def _pilot_phase(pair: ModelPair, config: AcsConfig, stream: RngStream
                 ) -> tuple[StratifiedSample, np.ndarray, int]:
    pilot = config.pilot_counts()
    sample, draws = sample_strata(pair, config.spec,
                                  AllocationPlan(tuple(int(c) for c in pilot)),
                                  stream.child(0))
    return evaluate_full(pair, sample), pilot, draws


def _beta_from_pilot(sample: StratifiedSample, spec: StrataSpec,
                     y: float) -> tuple[np.ndarray, bool]:
    p = conditional_probs(sample, spec, y)
    try:
        return optimal_allocation(p, spec), False
    except StrataError:
        return spec.widths.copy(), True


def _phase_two(pair: ModelPair, config: AcsConfig, pilot_sample: StratifiedSample,
               pilot: np.ndarray, beta_tilde: np.ndarray, stream: RngStream
               ) -> tuple[StratifiedSample, np.ndarray, int, tuple[int, ...]]:
    extra, floored = phase_two_counts(beta_tilde, pilot, config.n,
                                      config.min_per_stratum, config.spec.widths)
    second, draws = sample_strata(pair, config.spec,
                                  AllocationPlan(tuple(int(c) for c in extra)),
                                  stream.child(1))
    merged = pilot_sample.merged(evaluate_full(pair, second))
    return merged, merged.counts, draws, floored


def acs_cdf(pair: ModelPair, config: AcsConfig, y: float,
            stream: RngStream) -> AcsResult:
    """Adaptive stratified estimate of F(y): pilot, re-allocate, pool."""
    pilot_sample, pilot, d1 = _pilot_phase(pair, config, stream)
    beta_tilde, fallback = _beta_from_pilot(pilot_sample, config.spec, y)
    merged, counts, d2, floored = _phase_two(pair, config, pilot_sample, pilot,
                                             beta_tilde, stream)
    estimate, p = cs_cdf(merged, config.spec, y)
    return AcsResult(
        estimate=estimate,
        beta_tilde=beta_tilde,
        final_counts=counts,
        realized_fractions=counts / counts.sum(),
        pilot_quantile=None,
        conditional=p,
        draw_count=d1 + d2,
        proportional_fallback=fallback,
        floored_strata=floored,
        sample=merged,
    )


def acs_quantile(pair: ModelPair, config: AcsConfig, alpha: float,
                 stream: RngStream) -> AcsResult:
    """Adaptive stratified quantile: allocation tuned at the pilot quantile."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    pilot_sample, pilot, d1 = _pilot_phase(pair, config, stream)
    # The pilot allocation is tuned at the strict inverse of the pilot cdf,
    # which sits one support point above the generalized inverse whenever the
    # pilot mass hits alpha exactly (routine when a cutpoint equals alpha).
    y_tilde = cs_quantile(pilot_sample, config.spec, alpha, strict=True)
    beta_tilde, fallback = _beta_from_pilot(pilot_sample, config.spec, y_tilde)
    merged, counts, d2, floored = _phase_two(pair, config, pilot_sample, pilot,
                                             beta_tilde, stream)
    estimate = cs_quantile(merged, config.spec, alpha)
    _, p = cs_cdf(merged, config.spec, estimate)
    return AcsResult(
        estimate=estimate,
        beta_tilde=beta_tilde,
        final_counts=counts,
        realized_fractions=counts / counts.sum(),
        pilot_quantile=y_tilde,
        conditional=p,
        draw_count=d1 + d2,
        proportional_fallback=fallback,
        floored_strata=floored,
        sample=merged,
    )


# ---------------------------------------------------------------------------
# Closed-form variance diagnostics (two strata at cutpoint alpha)


def two_strata_acs_factor(alpha: float, F: float, rho_I: float
                          ) -> tuple[float, float]:
    """Variance factor K of the adaptive two-strata scheme and the ratio
    K^2 = sigma2_ACS / sigma2_EE at the point with cdf value F."""
    if not (0 < alpha < 1 and 0 < F < 1):
        raise ValueError("alpha and F must lie in (0, 1)")
    r = np.sqrt(((1 - alpha) * (1 - F)) / (alpha * F))
    s = np.sqrt(((1 - alpha) * F) / (alpha * (1 - F)))
    b1, b2 = 1 + rho_I * r, 1 - rho_I * s
    b3, b4 = 1 + rho_I / r, 1 - rho_I / s
    if min(b1, b2, b3, b4) < 0:
        raise StrataError(
            f"infeasible (alpha={alpha}, F={F}, rho_I={rho_I}): "
            "a bracketed term is negative"
        )
    K = alpha * np.sqrt(b1) * np.sqrt(b2) + (1 - alpha) * np.sqrt(b3) * np.sqrt(b4)
    return float(K), float(K**2)


def strong_control_rho(alpha: float, F: float, branch: str) -> float:
    """Indicator correlation when the metamodel is a monotone map of Y.

    branch "z_below": the metamodel alpha-quantile falls below the image of y;
    branch "z_at_or_above": it falls at or above.
    """
    if not (0 < alpha < 1 and 0 < F < 1):
        raise ValueError("alpha and F must lie in (0, 1)")
    ratio = (alpha * (1 - F)) / ((1 - alpha) * F)
    if branch == "z_below":
        return float(np.sqrt(ratio))
    if branch == "z_at_or_above":
        return float(np.sqrt(1.0 / ratio))
    raise ValueError(f"unknown branch {branch!r}")


@dataclass(frozen=True)
class VarianceDiag:
    """Closed-form variance summary for a (spec, conditional-probs) pair."""

    sigma2_ps: float
    sigma2_ocs: float
    beta_star: np.ndarray
    sigma2_cs: float | None = None


def variance_diagnostics(p: ConditionalProbs, spec: StrataSpec,
                         plan: AllocationPlan | None = None) -> VarianceDiag:
    return VarianceDiag(
        sigma2_ps=ps_form_variance(p, spec),
        sigma2_ocs=ocs_variance(p, spec),
        beta_star=optimal_allocation(p, spec),
        sigma2_cs=None if plan is None else cs_variance(p, spec, plan),
    )
