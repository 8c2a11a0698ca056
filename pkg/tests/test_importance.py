import math

import numpy as np
import pytest
from scipy.stats import norm

from qvr.estimators import empirical_cdf, quantile_from_weighted_cdf
from qvr.importance import (
    BiasedFamily,
    BiasedParams,
    CisNonConvergence,
    ImportanceError,
    WeightedSample,
    biased_density,
    cis_quantile,
    draw_weighted_sample,
    fit_biased_member,
    is_cdf,
    is_variance_estimate,
    lognormal_params_from_moments,
    moment_match,
    tail_quantile,
    true_optimal_moments,
    variance_optimal_params,
)
from qvr.model import (
    InputDistribution,
    Lognormal,
    identity1d,
    toy1d,
    toy2d,
)
from qvr.sampling import RngStream

TRUNC_MEAN = -norm.pdf(0) / norm.cdf(0)          # E[X | X <= 0], X ~ N(0,1)
TRUNC_VAR = 1 - (norm.pdf(0) / norm.cdf(0)) ** 2


class TestBiasedParams:
    def test_requires_symmetric_positive_definite(self):
        with pytest.raises(ValueError):
            BiasedParams(lam=[0.0, 0.0], C=[[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            BiasedParams(lam=[0.0], C=[[-1.0]])

    def test_dimension(self):
        p = BiasedParams(lam=[0.0, 1.0], C=np.eye(2))
        assert p.dimension == 2


class TestBiasedDensity:
    def test_standard_bivariate_gaussian(self):
        fam = BiasedFamily("joint_gaussian")
        p = BiasedParams(lam=[0.0, 0.0], C=np.eye(2))
        val = biased_density(fam, p, np.array([0.0, 0.0]))
        assert float(val[0]) == pytest.approx(1 / (2 * math.pi), rel=1e-12)

    def test_componentwise_normal(self):
        base = identity1d().input
        fam = BiasedFamily("componentwise_matched", base=base)
        p = BiasedParams(lam=[1.0], C=[[1.0]])
        val = biased_density(fam, p, np.array([[1.0]]))
        assert float(val[0]) == pytest.approx(0.39894228, abs=1e-7)

    def test_lognormal_moment_round_trip(self):
        for mean, var in [(1.0, 0.5), (3.0, 2.0), (0.2, 0.01)]:
            mu, sigma = lognormal_params_from_moments(mean, var)
            back_mean = math.exp(mu + sigma**2 / 2)
            back_var = (math.exp(sigma**2) - 1) * math.exp(2 * mu + sigma**2)
            assert back_mean == pytest.approx(mean, abs=1e-10)
            assert back_var == pytest.approx(var, abs=1e-10)

    def test_componentwise_lognormal_member(self):
        base = InputDistribution((Lognormal(0.0, 1.0),))
        fam = BiasedFamily("componentwise_matched", base=base)
        p = BiasedParams(lam=[2.0], C=[[0.5]])
        member = fam.member(p)
        x = member.sample(np.random.default_rng(0), 200000)[:, 0]
        assert x.mean() == pytest.approx(2.0, abs=0.02)
        assert x.var() == pytest.approx(0.5, rel=0.05)

    def test_family_validation(self):
        with pytest.raises(ValueError):
            BiasedFamily("unknown")
        with pytest.raises(ValueError):
            BiasedFamily("componentwise_matched")


class TestMomentMatch:
    def test_truncated_normal_closed_form(self):
        p = moment_match(identity1d(), 0.0, None, 10**6, RngStream(1))
        assert p.lam[0] == pytest.approx(TRUNC_MEAN, abs=0.003)
        assert p.C[0, 0] == pytest.approx(TRUNC_VAR, abs=0.005)

    def test_always_true_event_recovers_unconditioned_moments(self):
        n = 10**5
        p = moment_match(identity1d(), 1e9, None, n, RngStream(2))
        assert abs(p.lam[0]) < 3 / math.sqrt(n) * 1.5
        assert p.C[0, 0] == pytest.approx(1.0, abs=0.02)

    def test_empty_event_rejected(self):
        with pytest.raises(ImportanceError):
            moment_match(identity1d(), -50.0, None, 10**3, RngStream(3))

    def test_pilot_count_minimum(self):
        with pytest.raises(ValueError):
            moment_match(identity1d(), 0.0, None, 100, RngStream(4))

    def test_convergence_rate(self):
        truth = np.array([TRUNC_MEAN, TRUNC_VAR])
        sizes = [10**3, 10**4, 10**5]
        errs = []
        for s in sizes:
            per = []
            for r in range(20):
                p = moment_match(identity1d(), 0.0, None, s,
                                 RngStream(5, (s, r)))
                per.append((p.lam[0] - truth[0]) ** 2)
            errs.append(math.sqrt(np.mean(per)))
        slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.15)

    def test_matches_metamodel_event_oracle(self):
        pair = toy2d()
        z95 = 2.6  # approximate metamodel 0.95-level, fixed for the check
        lam_ref, C_ref = true_optimal_moments(pair, z95, 10**6, RngStream(6),
                                              tail="upper", use_full_model=False)
        p = moment_match(pair, z95, None, 10**6, RngStream(7), tail="upper")
        assert np.all(np.abs(p.lam - lam_ref) < 0.02)
        assert np.all(np.abs(p.C - C_ref) < 0.02)


class TestTrueOptimalMoments:
    def test_identity_truncated(self):
        lam, C = true_optimal_moments(identity1d(), 0.0, 10**6, RngStream(8))
        assert lam[0] == pytest.approx(TRUNC_MEAN, abs=0.003)
        assert C[0, 0] == pytest.approx(TRUNC_VAR, abs=0.005)

    def test_always_true(self):
        lam, C = true_optimal_moments(identity1d(), 1e9, 10**6, RngStream(9))
        assert abs(lam[0]) < 0.005
        assert C[0, 0] == pytest.approx(1.0, abs=0.01)

    def test_minimum_sample(self):
        with pytest.raises(ValueError):
            true_optimal_moments(identity1d(), 0.0, 10**4, RngStream(10))


class TestIsCdf:
    def test_unit_weights_equal_empirical(self):
        rng = np.random.default_rng(11)
        y = rng.standard_normal(500)
        ws = WeightedSample(x=np.zeros((500, 1)), y=y, w=np.ones(500))
        for y0 in (-1.0, 0.0, 1.3):
            emp = (y <= y0).mean()
            assert is_cdf(ws, y0, "raw") == pytest.approx(emp)
            assert is_cdf(ws, y0, "self_normalized") == pytest.approx(emp)

    def test_self_normalized_limit_is_one(self):
        rng = np.random.default_rng(12)
        ws = WeightedSample(x=np.zeros((50, 1)),
                            y=rng.standard_normal(50),
                            w=rng.random(50) + 0.1)
        assert is_cdf(ws, 1e9, "self_normalized") == 1.0

    def test_raw_unbiased_identity_biased(self):
        pair = identity1d()
        fam = BiasedFamily("joint_gaussian")
        y0 = 1.6449
        for lam in (-1.0, 0.5, 1.0):
            params = BiasedParams(lam=[lam], C=[[1.0]])
            reps = 2000
            vals = np.empty(reps)
            for r in range(reps):
                ws = draw_weighted_sample(pair, fam, params,
                                          RngStream(13, (int(lam * 10) + 100, r)),
                                          500)
                vals[r] = is_cdf(ws, y0, "raw")
            se = vals.std(ddof=1) / math.sqrt(reps)
            assert abs(vals.mean() - norm.cdf(y0)) < 3 * se + 1e-4

    def test_weight_mean_is_one(self):
        pair = identity1d()
        fam = BiasedFamily("joint_gaussian")
        ws = draw_weighted_sample(pair, fam,
                                  BiasedParams(lam=[0.7], C=[[1.3]]),
                                  RngStream(14), 10**5)
        se = ws.w.std(ddof=1) / math.sqrt(ws.n)
        assert abs(ws.w.mean() - 1.0) < 3 * se

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ImportanceError):
            WeightedSample(x=np.zeros((2, 1)), y=np.array([0.0, 1.0]),
                           w=np.array([1.0, 0.0]))


class TestIsVariance:
    def test_unit_weights_binomial(self):
        rng = np.random.default_rng(15)
        y = rng.standard_normal(1000)
        ws = WeightedSample(x=np.zeros((1000, 1)), y=y, w=np.ones(1000))
        est = is_cdf(ws, 0.0, "raw")
        assert is_variance_estimate(ws, 0.0) == pytest.approx(
            est * (1 - est) / 1000, rel=1e-9)

    def test_matches_replication_variance(self):
        pair = identity1d()
        fam = BiasedFamily("joint_gaussian")
        params = BiasedParams(lam=[-1.0], C=[[1.0]])
        reps, n = 4000, 400
        vals = np.empty(reps)
        form = np.empty(reps)
        for r in range(reps):
            ws = draw_weighted_sample(pair, fam, params, RngStream(16, (r,)), n)
            vals[r] = is_cdf(ws, 0.0, "raw")
            form[r] = is_variance_estimate(ws, 0.0)
        assert vals.var(ddof=1) == pytest.approx(form.mean(), rel=0.10)

    def test_near_optimal_member_shrinks_variance(self):
        pair = identity1d()
        fam = BiasedFamily("joint_gaussian")
        # member close to the conditional law given X <= 0
        good = BiasedParams(lam=[TRUNC_MEAN], C=[[TRUNC_VAR]])
        plain = BiasedParams(lam=[0.0], C=[[1.0]])
        vg = ve = 0.0
        for r in range(50):
            wg = draw_weighted_sample(pair, fam, good, RngStream(17, (r,)), 2000)
            wp = draw_weighted_sample(pair, fam, plain, RngStream(18, (r,)), 2000)
            vg += is_variance_estimate(wg, 0.0)
            ve += is_variance_estimate(wp, 0.0)
        assert vg < ve


class TestSelfNormalizedCdfValidity:
    def test_valid_cdf(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            n = rng.integers(2, 100)
            ws = WeightedSample(x=np.zeros((n, 1)),
                                y=rng.standard_normal(n),
                                w=rng.random(n) + 1e-3)
            grid = np.linspace(-3, 3, 31)
            vals = [is_cdf(ws, g, "self_normalized") for g in grid]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
            assert 0 <= vals[0] and vals[-1] <= 1 + 1e-12


class TestCisPipeline:
    def test_forced_original_density_self_normalized(self):
        pair = identity1d()
        fam = BiasedFamily("joint_gaussian")
        params = BiasedParams(lam=[0.0], C=[[1.0]])
        res = cis_quantile(pair, fam, 0.9, 500, RngStream(20), params=params,
                           mode="self_normalized")
        x = fam.member(params).sample(RngStream(20).child(1).generator(), 500)
        cdf = empirical_cdf(x[:, 0])
        assert res.estimate == quantile_from_weighted_cdf(cdf, 0.9)

    def test_tail_mode_uses_next_order_statistic(self):
        # With unit weights the tail inversion sits one order statistic above
        # the plain empirical quantile (calibration choice).
        rng = np.random.default_rng(21)
        y = np.sort(rng.standard_normal(100))
        ws = WeightedSample(x=np.zeros((100, 1)), y=y, w=np.ones(100))
        assert tail_quantile(ws, 0.9) == y[91]

    def test_toy2d_fit_converges(self):
        pair = toy2d()
        fam = BiasedFamily("joint_gaussian")
        params, diag = fit_biased_member(pair, fam, 0.95, RngStream(22),
                                         pilot_count=100_000)
        assert diag.converged
        assert diag.mass_in_event >= 0.10
        # optimized member pushes its mean into the metamodel upper tail
        z_center = pair.eval_metamodel(params.lam.reshape(1, -1))[0]
        assert z_center > diag.z_threshold

    def test_toy1d_reports_non_convergence(self):
        pair = toy1d()
        fam = BiasedFamily("joint_gaussian")
        with pytest.raises(CisNonConvergence) as err:
            fit_biased_member(pair, fam, 0.95, RngStream(23),
                              pilot_count=100_000)
        assert err.value.diagnostics.converged is False

    def test_estimate_reasonable_on_toy2d(self):
        pair = toy2d()
        fam = BiasedFamily("joint_gaussian")
        params, diag = fit_biased_member(pair, fam, 0.95, RngStream(24),
                                         pilot_count=100_000)
        vals = [cis_quantile(pair, fam, 0.95, 200, RngStream(25, (r,)),
                             params=params, diagnostics=diag).estimate
                for r in range(200)]
        assert np.mean(vals) == pytest.approx(2.75, abs=0.1)
        assert np.std(vals, ddof=1) < 0.3

    def test_moment_selection_mode(self):
        pair = toy2d()
        fam = BiasedFamily("joint_gaussian")
        params, diag = fit_biased_member(pair, fam, 0.95, RngStream(26),
                                         pilot_count=50_000,
                                         selection="moment")
        assert diag.converged


class TestVarianceOptimalParams:
    def test_prefers_tail_over_original(self):
        pair = toy2d()
        p = variance_optimal_params(pair, 2.6, None, 100_000, RngStream(27),
                                    tail="upper")
        # chi-square-optimal member recenters into the tail event
        assert pair.eval_metamodel(p.lam.reshape(1, -1))[0] > 1.0
