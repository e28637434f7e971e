import math
import warnings

import mpmath
import numpy as np
import pytest
from scipy import stats

from cocoafuse.errors import MetricError
from cocoafuse.metrics import (
    KHAT_THRESHOLD,
    MetricsReport,
    cic,
    cil,
    emse,
    fit_generalized_pareto,
    lppd,
    psis_loo,
    r_squared,
    smooth_importance_weights,
)


def lppd_extended_precision(ll: np.ndarray) -> float:
    """Direct evaluation of the definition with 60-digit arithmetic."""
    mpmath.mp.dps = 60
    s, n = ll.shape
    total = mpmath.mpf(0)
    for j in range(n):
        acc = mpmath.mpf(0)
        for i in range(s):
            acc += mpmath.e ** mpmath.mpf(float(ll[i, j]))
        total += mpmath.log(acc / s)
    return float(total)


class TestLppd:
    def test_single_draw_reduction(self, rng):
        ll = rng.normal(-2, 1, size=(1, 15))
        value, se = lppd(ll)
        assert value == pytest.approx(float(ll.sum()), rel=1e-12)

    def test_constant_matrix(self):
        ll = np.full((40, 7), -1.25)
        value, se = lppd(ll)
        assert value == pytest.approx(7 * -1.25, rel=1e-12)
        assert se == 0.0

    def test_matches_extended_precision(self, rng):
        ll = rng.normal(-5, 3, size=(50, 20))
        value, _ = lppd(ll)
        oracle = lppd_extended_precision(ll)
        assert abs(value - oracle) <= 1e-10 * abs(oracle)

    def test_impossible_point_named(self):
        ll = np.zeros((10, 4))
        ll[:, 2] = -np.inf
        with pytest.raises(MetricError, match="point 2"):
            lppd(ll)

    def test_se_formula(self, rng):
        ll = rng.normal(0, 1, size=(30, 50))
        value, se = lppd(ll)
        points = np.array(
            [float(np.log(np.mean(np.exp(ll[:, j])))) for j in range(50)]
        )
        assert se == pytest.approx(math.sqrt(50 * points.var(ddof=1)), rel=1e-9)


class TestGeneralizedParetoFit:
    @pytest.mark.parametrize("k_true", [-0.2, 0.1, 0.5, 0.9])
    def test_recovers_known_shape(self, rng, k_true):
        x = stats.genpareto.rvs(c=k_true, scale=1.0, size=4000, random_state=rng)
        k_hat, sigma_hat = fit_generalized_pareto(x)
        assert k_hat == pytest.approx(k_true, abs=0.08)
        assert sigma_hat == pytest.approx(1.0, rel=0.15)

    def test_rejects_tiny_samples(self):
        with pytest.raises(ValueError):
            fit_generalized_pareto(np.array([1.0, 2.0]))


class TestSmoothing:
    def test_constant_weights_untouched(self):
        lw, k = smooth_importance_weights(np.zeros(500))
        assert k == 0.0
        np.testing.assert_array_equal(lw, np.zeros(500))

    def test_smoothed_never_exceeds_raw_max(self, rng):
        lw_raw = rng.normal(0, 2, 1000)
        lw, _ = smooth_importance_weights(lw_raw)
        assert lw.max() <= 0.0 + 1e-12

    def test_only_tail_modified(self, rng):
        lw_raw = rng.normal(0, 1, 1000)
        lw, _ = smooth_importance_weights(lw_raw)
        n_tail = int(math.ceil(min(0.2 * 1000, 3 * math.sqrt(1000))))
        order = np.argsort(lw_raw)
        body = order[: 1000 - n_tail]
        np.testing.assert_allclose(lw[body], (lw_raw - lw_raw.max())[body], rtol=1e-12)


class TestPsisLoo:
    def test_constant_loglik_equals_lppd_exactly(self):
        ll = np.tile(np.linspace(-3, -1, 12), (500, 1))
        loo, _, khat = psis_loo(ll)
        ref, _ = lppd(ll)
        assert loo == ref
        assert np.all(khat == 0.0)

    def test_heavy_tail_ratios_flagged(self, rng):
        # importance ratios with tail exponent 1.2 => GPD shape ~ 1/1.2 > 0.7
        s, n = 4000, 3
        ratios = stats.pareto.rvs(b=1.2, size=(s, n), random_state=rng)
        ll = -np.log(ratios)
        _, _, khat = psis_loo(ll)
        assert np.all(khat > KHAT_THRESHOLD)

    def test_small_draw_count_warns(self, rng):
        ll = rng.normal(-1, 0.5, size=(100, 5))
        with pytest.warns(RuntimeWarning, match="400"):
            psis_loo(ll)

    def test_loo_below_lppd_on_real_fits(self):
        """Importance-weighted leave-one-out cannot beat in-sample fit."""
        from cocoafuse.dataio import Dataset, fit_apply_features
        from cocoafuse.model import ModelDims, ModelSpec, PriorConfig
        from cocoafuse.sampler import SamplerConfig, sample_posterior

        identity = [{"kind": "identity", "column": "x"}]
        spec = ModelSpec(
            n_experts=1, mode="mixture", expert_features=identity,
            gate_features=identity, behavior_features=identity,
        )
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.uniform(-1, 1, 15)
            y = 0.5 * x + rng.normal(0, 0.4, 15)
            data = fit_apply_features(
                Dataset(columns={"x": x, "y": y}, response="y"),
                identity, identity, identity,
            )
            priors = PriorConfig.default(spec, ModelDims.from_dataset(spec, data))
            cfg = SamplerConfig(chains=2, warmup=150, samples=200, max_leapfrog=8, seed=seed)
            post = sample_posterior(data, spec, priors, cfg)
            ll = post.loglik_matrix()
            loo, _, _ = psis_loo(ll)
            in_sample, _ = lppd(ll)
            assert loo <= in_sample + 1e-9


class TestCoverageMetrics:
    def test_cic_all_inside(self):
        y = np.array([0.0, 1.0, 2.0])
        iv = np.array([[-1, 1], [0, 2], [1, 3]], dtype=float)
        assert cic(y, iv)[0] == 1.0

    def test_cic_none_inside(self):
        y = np.array([5.0, 5.0])
        iv = np.array([[0, 1], [0, 1]], dtype=float)
        value, se = cic(y, iv)
        assert value == 0.0
        assert se == 0.0

    def test_cic_calibration_simulation(self, rng):
        n = 1000
        mu = rng.uniform(-1, 1, n)
        y = rng.normal(mu, 1.0)
        half = stats.norm.ppf(0.975)
        iv = np.column_stack([mu - half, mu + half])
        value, _ = cic(y, iv)
        assert 0.92 <= value <= 0.98

    def test_cic_monotone_transform_invariant(self, rng):
        y = rng.normal(0, 2, 300)
        lo = y - rng.uniform(0.1, 2, 300)
        hi = y + rng.uniform(-0.5, 2, 300)
        hi = np.maximum(lo, hi)
        iv = np.column_stack([lo, hi])
        base, _ = cic(y, iv)
        transformed, _ = cic(np.exp(y), np.exp(iv))
        assert transformed == base

    def test_cil_identical_intervals(self):
        iv = np.tile([[0.0, 2.0]], (10, 1))
        value, se = cil(iv)
        assert value == 2.0
        assert se == 0.0

    def test_cil_zero_width(self):
        iv = np.zeros((5, 2))
        assert cil(iv)[0] == 0.0

    def test_cil_gaussian_sigma_one(self, rng):
        draws = rng.normal(0, 1, (400, 4000))
        iv = np.quantile(draws, [0.025, 0.975], axis=1).T
        value, se = cil(iv)
        assert value == pytest.approx(2 * stats.norm.ppf(0.975), abs=3 * se + 0.02)

    def test_invalid_intervals(self):
        with pytest.raises(MetricError):
            cil(np.array([[1.0, 0.0]]))


class TestEmse:
    def test_perfect_draws(self):
        y = np.array([1.0, -2.0, 0.5])
        draws = np.tile(y[:, None], (1, 10))
        value, se = emse(y, draws)
        assert value == 0.0

    def test_alternating_unit_offsets(self):
        y = np.zeros(4)
        draws = np.tile([1.0, -1.0], (4, 5))
        value, _ = emse(y, draws)
        assert value == 1.0

    def test_bias_variance_decomposition(self, rng):
        n, s = 300, 2000
        bias = rng.uniform(-1, 1, n)
        spread = rng.uniform(0.5, 1.5, n)
        y = np.zeros(n)
        draws = bias[:, None] + spread[:, None] * rng.standard_normal((n, s))
        value, se = emse(y, draws)
        expected = np.mean(bias**2) + np.mean(spread**2)
        assert value == pytest.approx(expected, rel=0.02)

    def test_needs_two_draws(self):
        with pytest.raises(MetricError):
            emse(np.zeros(3), np.zeros((3, 1)))


class TestRSquared:
    def test_perfect_prediction(self, rng):
        y = rng.normal(0, 1, 50)
        assert r_squared(y, y) == 1.0

    def test_mean_prediction_is_zero(self, rng):
        y = rng.normal(3, 2, 80)
        assert r_squared(y, np.full(80, y.mean())) == pytest.approx(0.0, abs=1e-12)

    def test_worse_than_mean_is_negative(self):
        y = np.array([0.0, 1.0, 2.0, 3.0])
        assert r_squared(y, y[::-1]) < 0.0

    def test_zero_variance_rejected(self):
        with pytest.raises(MetricError):
            r_squared(np.ones(5), np.ones(5))


class TestSeScaling:
    def test_standard_errors_shrink_like_sqrt_n(self, rng):
        sizes = np.array([200, 800, 3200, 12800])
        rows = {"lppd": [], "cic": [], "cil": [], "emse": []}
        for n in sizes:
            mu = rng.normal(0, 1, n)
            y = rng.normal(mu, 1.0)
            draws = mu[:, None] + rng.standard_normal((n, 200))
            ll = rng.normal(-1.4, 0.5, size=(200, n))
            iv = np.quantile(draws, [0.025, 0.975], axis=1).T
            rows["lppd"].append(lppd(ll)[1])
            rows["cic"].append(cic(y, iv)[1])
            rows["cil"].append(cil(iv)[1])
            rows["emse"].append(emse(y, draws)[1])
        logn = np.log(sizes)
        for name, ses in rows.items():
            slope = np.polyfit(logn, np.log(ses), 1)[0]
            target = 0.5 if name == "lppd" else -0.5  # lppd se grows with sqrt(N)
            assert slope == pytest.approx(target, abs=0.15), name


class TestReport:
    def test_csv_row_order(self):
        report = MetricsReport(
            psis_loo=(-10.0, 1.0),
            lppd=(-11.0, 1.1),
            cic=(0.95, 0.01),
            cil=(3.9, 0.05),
            emse=(0.2, 0.01),
            r2=0.87,
        )
        header, row = report.csv_row()
        assert header[:2] == ["loo", "loo_se"]
        assert header[-1] == "r2"
        assert float(row[0]) == -10.0
        assert float(row[-1]) == 0.87

    def test_invariants_enforced(self):
        with pytest.raises(MetricError):
            MetricsReport(
                psis_loo=(0, 0), lppd=(0, 0), cic=(1.4, 0), cil=(1, 0), emse=(0, 0), r2=0.5
            )
