import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson
from scipy.optimize import minimize

from cocoafuse.dataio import Dataset, fit_apply_features
from cocoafuse.density_core import (
    FusionCoefficient,
    GaussianParams,
    Weights,
    fusion_logpdf,
)
from cocoafuse.errors import ConfigError
from cocoafuse.model import (
    ModelDims,
    ModelSpec,
    ParameterVector,
    PriorConfig,
    behavior_beta,
    conditional_logpdf,
    constrain,
    draw_from_prior,
    flatten_params,
    gate_probs,
    log_posterior_unconstrained,
    log_prior,
    parameter_names,
    pointwise_loglik,
    unconstrain,
    unflatten_params,
)

IDENTITY_X = [{"kind": "identity", "column": "x"}]


def make_spec(mode="fusion", m=2, constraint="none"):
    return ModelSpec(
        n_experts=m,
        mode=mode,
        constraint=constraint,
        expert_features=IDENTITY_X,
        gate_features=IDENTITY_X,
        behavior_features=IDENTITY_X,
    )


def make_data(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, n)
    y = np.where(x > 0, 2.0, -2.0) + rng.normal(0, 0.5, n)
    ds = Dataset(columns={"x": x, "y": y}, response="y")
    return fit_apply_features(ds, IDENTITY_X, IDENTITY_X, IDENTITY_X)


def random_params(rng, spec, dims):
    priors = PriorConfig.default(spec, dims)
    return draw_from_prior(priors, spec, dims, rng)


class TestGateProbs:
    def test_zero_matrix_uniform(self):
        w = gate_probs(np.array([1.0, 0.3]), np.zeros((2, 3)))
        np.testing.assert_allclose(w.pi, np.ones(3) / 3)

    def test_two_expert_logistic(self):
        # logit of expert 1 equals 3.0 against the pinned reference
        gate = np.array([[3.0, 0.0]])
        w = gate_probs(np.array([1.0]), gate)
        sigma = 1.0 / (1.0 + math.exp(-3.0))
        np.testing.assert_allclose(w.pi, [sigma, 1 - sigma], rtol=1e-12)

    @given(st.floats(-30, 30))
    @settings(max_examples=50, deadline=None)
    def test_softmax_shift_invariance(self, c):
        gate = np.array([[1.0, -2.0, 0.5], [0.2, 0.1, -0.3]])
        x = np.array([1.0, 0.7])
        base = gate_probs(x, gate)
        shifted = gate_probs(x, gate + c)
        np.testing.assert_allclose(shifted.pi, base.pi, rtol=1e-9, atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            gate_probs(np.array([1.0, 2.0, 3.0]), np.zeros((2, 2)))


class TestBehaviorBeta:
    def test_zero_vector_is_half(self):
        b = behavior_beta(np.array([1.0, 2.0]), np.zeros(2))
        assert b.beta == pytest.approx(0.5)

    def test_direct_logistic(self):
        b = behavior_beta(np.array([1.0]), np.array([5.0]))
        assert b.beta == pytest.approx(1.0 / (1.0 + math.exp(-5.0)), rel=1e-12)

    def test_monotone_in_each_coefficient(self):
        x = np.array([1.0, 0.5])
        base = behavior_beta(x, np.array([0.3, -0.2])).beta
        assert behavior_beta(x, np.array([0.8, -0.2])).beta > base
        assert behavior_beta(x, np.array([0.3, 0.4])).beta > base

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            behavior_beta(np.array([1.0, 2.0]), np.zeros(3))


class TestConditionalLogpdf:
    def test_single_expert_all_modes_coincide(self, rng):
        data = make_data(12, seed=1)
        dims = ModelDims(1, 2, 2, 2)
        pv = ParameterVector(
            coeffs=np.array([[0.4, 1.2]]),
            sigmas=np.array([0.6]),
            gate=np.zeros((2, 1)),
            behavior=np.array([0.3, -0.1]),
        )
        values = {}
        for mode in ("mixture", "blend", "fusion"):
            spec = make_spec(mode, m=1)
            pv_mode = pv if mode == "fusion" else ParameterVector(
                coeffs=pv.coeffs, sigmas=pv.sigmas, gate=pv.gate
            )
            values[mode] = pointwise_loglik(pv_mode, data, spec)
        mu = 0.4 + 1.2 * data.columns["x"]
        direct = -0.5 * np.log(2 * np.pi * 0.36) - 0.5 * (data.y - mu) ** 2 / 0.36
        for mode in values:
            np.testing.assert_allclose(values[mode], direct, rtol=1e-12)

    def test_degenerate_gate_selects_expert_one(self):
        data = make_data(10, seed=2)
        spec = make_spec("mixture", m=2)
        pv = ParameterVector(
            coeffs=np.array([[1.0, 0.5], [-3.0, 2.0]]),
            sigmas=np.array([0.5, 1.5]),
            gate=np.array([[40.0, 0.0], [0.0, 0.0]]),  # expert 1 gets ~all mass
        )
        ll = pointwise_loglik(pv, data, spec)
        mu = 1.0 + 0.5 * data.columns["x"]
        direct = -0.5 * np.log(2 * np.pi * 0.25) - 0.5 * (data.y - mu) ** 2 / 0.25
        np.testing.assert_allclose(ll, direct, atol=1e-12)

    def test_fusion_matches_density_core_composition(self, rng):
        """Fusion-mode value assembled by hand from the density kernels."""
        data = make_data(15, seed=3)
        spec = make_spec("fusion", m=3)
        dims = ModelDims.from_dataset(spec, data)
        pv = random_params(rng, spec, dims)
        ll = pointwise_loglik(pv, data, spec)
        for i in range(data.n_rows):
            u = data.expert_design[i]
            comps = [
                GaussianParams(float(u @ pv.coeffs[j]), float(pv.sigmas[j]))
                for j in range(3)
            ]
            w = gate_probs(data.gate_design[i], pv.gate)
            beta = behavior_beta(data.behavior_design[i], pv.behavior)
            by_hand = fusion_logpdf(float(data.y[i]), comps, w, beta)
            assert ll[i] == pytest.approx(by_hand, rel=1e-10, abs=1e-10)

    def test_raw_covariate_entrypoint(self, rng):
        data = make_data(8, seed=4)
        spec = make_spec("fusion", m=2)
        dims = ModelDims.from_dataset(spec, data)
        pv = random_params(rng, spec, dims)
        ll = pointwise_loglik(pv, data, spec)
        one = conditional_logpdf(
            float(data.y[3]),
            {"x": float(data.columns["x"][3])},
            pv,
            spec,
            data.feature_records,
        )
        assert one == pytest.approx(ll[3], rel=1e-12)

    def test_proper_density_quadrature(self, rng):
        """exp(conditional logpdf) integrates to one in y at every x."""
        data = make_data(4, seed=5)
        for mode in ("mixture", "blend", "fusion"):
            spec = make_spec(mode, m=2)
            dims = ModelDims.from_dataset(spec, data)
            pv = random_params(rng, spec, dims)
            for i in range(data.n_rows):
                mus = data.expert_design[i] @ pv.coeffs.T
                pooled = float(np.max(np.abs(mus)) + 10 * np.max(pv.sigmas))
                ys = np.linspace(-pooled, pooled, 20001)
                row = data.subset(np.array([i]))
                ll = np.array(
                    [
                        pointwise_loglik(
                            pv,
                            Dataset(
                                columns={**{k: v for k, v in row.columns.items() if k != "y"}, "y": np.array([yv])},
                                response="y",
                                expert_design=row.expert_design,
                                gate_design=row.gate_design,
                                behavior_design=row.behavior_design,
                            ),
                            spec,
                        )[0]
                        for yv in ys
                    ]
                )
                assert simpson(np.exp(ll), x=ys) == pytest.approx(1.0, abs=1e-6)

    def test_blend_is_fusion_beta_to_zero_limit(self, rng):
        data = make_data(10, seed=6)
        spec_f = make_spec("fusion", m=2)
        spec_b = make_spec("blend", m=2)
        dims = ModelDims.from_dataset(spec_f, data)
        pv = random_params(rng, spec_f, dims)
        pv_lo = ParameterVector(
            coeffs=pv.coeffs, sigmas=pv.sigmas, gate=pv.gate,
            behavior=np.array([-35.0, 0.0]),
        )
        pv_blend = ParameterVector(coeffs=pv.coeffs, sigmas=pv.sigmas, gate=pv.gate)
        np.testing.assert_allclose(
            pointwise_loglik(pv_lo, data, spec_f),
            pointwise_loglik(pv_blend, data, spec_b),
            atol=1e-9,
        )

    def test_mixture_is_fusion_beta_to_one_limit(self, rng):
        data = make_data(10, seed=7)
        spec_f = make_spec("fusion", m=2)
        spec_m = make_spec("mixture", m=2)
        dims = ModelDims.from_dataset(spec_f, data)
        pv = random_params(rng, spec_f, dims)
        pv_hi = ParameterVector(
            coeffs=pv.coeffs, sigmas=pv.sigmas, gate=pv.gate,
            behavior=np.array([35.0, 0.0]),
        )
        pv_mix = ParameterVector(coeffs=pv.coeffs, sigmas=pv.sigmas, gate=pv.gate)
        np.testing.assert_allclose(
            pointwise_loglik(pv_hi, data, spec_f),
            pointwise_loglik(pv_mix, data, spec_m),
            atol=1e-9,
        )

    def test_blend_mode_unimodal_in_y(self, rng):
        from cocoafuse.density_core import count_modes

        data = make_data(5, seed=8)
        spec = make_spec("blend", m=3)
        dims = ModelDims.from_dataset(spec, data)
        pv = random_params(rng, spec, dims)
        row = data.subset(np.array([2]))

        def logdens(ys):
            out = np.empty(ys.size)
            for j, yv in enumerate(ys):
                d = Dataset(
                    columns={"x": row.columns["x"], "y": np.array([yv])},
                    response="y",
                    expert_design=row.expert_design,
                    gate_design=row.gate_design,
                    behavior_design=row.behavior_design,
                )
                out[j] = pointwise_loglik(pv, d, spec)[0]
            return out

        assert count_modes(logdens, (-30.0, 30.0, 4001)) == 1


class TestPriors:
    def test_laplace_at_location(self):
        spec = make_spec("mixture", m=1)
        dims = ModelDims(1, 1, 1, 1)
        priors = PriorConfig.default(spec, dims)
        pv = ParameterVector(
            coeffs=np.array([[0.0]]), sigmas=np.array([1.0]), gate=np.zeros((1, 1))
        )
        # single coefficient at its location contributes log(1/2)
        lp = log_prior(pv, priors)
        sigma_term = -math.log(1.0) - 0.0 - 0.5 * math.log(2 * math.pi)
        assert lp == pytest.approx(math.log(0.5) + sigma_term, rel=1e-12)

    def test_lognormal_at_exp_location(self):
        spec = make_spec("mixture", m=1)
        dims = ModelDims(1, 1, 1, 1)
        base = PriorConfig.default(spec, dims)
        loc, scale = 0.7, 1.3
        priors = PriorConfig(
            expert_coeffs=base.expert_coeffs,
            expert_sigmas=type(base.expert_sigmas)(
                family="lognormal", loc=np.array([loc]), scale=np.array([scale])
            ),
            gate=base.gate,
        )
        sigma = math.exp(loc)
        pv = ParameterVector(
            coeffs=np.array([[0.0]]), sigmas=np.array([sigma]), gate=np.zeros((1, 1))
        )
        lp = log_prior(pv, priors)
        expected_sigma_term = -math.log(sigma) - math.log(scale) - 0.5 * math.log(2 * math.pi)
        assert lp == pytest.approx(math.log(0.5) + expected_sigma_term, rel=1e-12)

    def test_doubling_scales_lowers_density_at_location(self):
        spec = make_spec("fusion", m=2)
        dims = ModelDims(2, 2, 2, 2)
        priors = PriorConfig.default(spec, dims)
        pv = ParameterVector(
            coeffs=np.zeros((2, 2)),
            sigmas=np.array([1.0, 1.0]),
            gate=np.zeros((2, 2)),
            behavior=np.zeros(2),
        )
        doubled = PriorConfig(
            expert_coeffs=type(priors.expert_coeffs)(
                "laplace", priors.expert_coeffs.loc, 2 * priors.expert_coeffs.scale
            ),
            expert_sigmas=type(priors.expert_sigmas)(
                "lognormal", priors.expert_sigmas.loc, 2 * priors.expert_sigmas.scale
            ),
            gate=type(priors.gate)("laplace", priors.gate.loc, 2 * priors.gate.scale),
            behavior=type(priors.behavior)(
                "laplace", priors.behavior.loc, 2 * priors.behavior.scale
            ),
        )
        assert log_prior(pv, doubled) < log_prior(pv, priors)

    def test_family_conventions_enforced(self):
        from cocoafuse.model import PriorBlock

        with pytest.raises(ConfigError):
            PriorConfig(
                expert_coeffs=PriorBlock("lognormal", np.zeros(1), np.ones(1)),
                expert_sigmas=PriorBlock("lognormal", np.zeros(1), np.ones(1)),
                gate=PriorBlock("laplace", np.zeros(1), np.ones(1)),
            )


class TestTransform:
    @pytest.mark.parametrize("constraint", ["none", "ordered_bias", "ordered_sigma"])
    @pytest.mark.parametrize("mode", ["mixture", "blend", "fusion"])
    def test_round_trip(self, rng, constraint, mode):
        spec = make_spec(mode, m=3, constraint=constraint)
        dims = ModelDims(3, 2, 2, 2)
        priors = PriorConfig.default(spec, dims)
        for _ in range(20):
            pv = draw_from_prior(priors, spec, dims, rng)
            z = unconstrain(pv, spec)
            back, _ = constrain(z, spec, dims)
            np.testing.assert_allclose(back.coeffs, pv.coeffs, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(back.sigmas, pv.sigmas, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(back.gate, pv.gate, rtol=1e-12, atol=1e-12)
            if spec.has_behavior:
                np.testing.assert_allclose(back.behavior, pv.behavior, rtol=1e-12)

    def test_ordered_sigma_holds_by_construction(self, rng):
        spec = make_spec("mixture", m=4, constraint="ordered_sigma")
        dims = ModelDims(4, 2, 2, 2)
        for _ in range(50):
            z = rng.normal(0, 3, dims.n_free(spec))
            pv, _ = constrain(z, spec, dims)
            assert np.all(np.diff(pv.sigmas) >= 0)
            assert np.all(pv.sigmas > 0)

    def test_ordered_bias_holds_by_construction(self, rng):
        spec = make_spec("mixture", m=4, constraint="ordered_bias")
        dims = ModelDims(4, 2, 2, 2)
        for _ in range(50):
            z = rng.normal(0, 3, dims.n_free(spec))
            pv, _ = constrain(z, spec, dims)
            assert np.all(np.diff(pv.coeffs[:, 0]) >= 0)

    def test_log_jacobian_finite(self, rng):
        spec = make_spec("fusion", m=3, constraint="ordered_sigma")
        dims = ModelDims(3, 2, 2, 2)
        for _ in range(20):
            z = rng.normal(0, 2, dims.n_free(spec))
            _, lj = constrain(z, spec, dims)
            assert math.isfinite(lj)

    def test_flatten_unflatten_inverse(self, rng):
        spec = make_spec("fusion", m=2)
        dims = ModelDims(2, 3, 2, 2)
        priors = PriorConfig.default(spec, dims)
        pv = draw_from_prior(priors, spec, dims, rng)
        flat = flatten_params(pv, spec)
        back = unflatten_params(flat, spec, dims)
        np.testing.assert_array_equal(back.coeffs, pv.coeffs)
        np.testing.assert_array_equal(back.gate, pv.gate)


def finite_difference_gradient(f, z, h=1e-5):
    grad = np.empty_like(z)
    for i in range(z.size):
        step = h * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        grad[i] = (f(zp) - f(zm)) / (2 * step)
    return grad


class TestLogPosteriorGradient:
    @pytest.mark.parametrize("mode", ["mixture", "blend", "fusion"])
    @pytest.mark.parametrize("constraint", ["none", "ordered_bias", "ordered_sigma"])
    def test_matches_central_finite_differences(self, mode, constraint):
        rng = np.random.default_rng(99)
        data = make_data(25, seed=10)
        spec = make_spec(mode, m=2, constraint=constraint)
        dims = ModelDims.from_dataset(spec, data)
        priors = PriorConfig.default(spec, dims)

        def value(z):
            return log_posterior_unconstrained(z, data, priors, spec, dims)[0]

        worst = 0.0
        for _ in range(20):
            z = rng.normal(0, 0.5, dims.n_free(spec))
            _, grad = log_posterior_unconstrained(z, data, priors, spec, dims)
            fd = finite_difference_gradient(value, z)
            scale = np.maximum(np.abs(fd), np.maximum(np.abs(grad), 1e-3))
            rel = np.max(np.abs(grad - fd) / scale)
            worst = max(worst, rel)
        assert worst <= 1e-5

    def test_gradient_zero_at_independent_optimum(self):
        """Nelder-Mead (derivative-free) optimum of the single-expert
        log posterior has (near-)zero analytic gradient."""
        data = make_data(60, seed=11)
        spec = make_spec("mixture", m=1)
        dims = ModelDims.from_dataset(spec, data)
        base = PriorConfig.default(spec, dims)
        from cocoafuse.model import PriorBlock

        wide = PriorConfig(
            expert_coeffs=PriorBlock("laplace", base.expert_coeffs.loc, 100 * base.expert_coeffs.scale),
            expert_sigmas=PriorBlock("lognormal", base.expert_sigmas.loc, 10 * base.expert_sigmas.scale),
            gate=base.gate,
        )

        def negative(z):
            return -log_posterior_unconstrained(z, data, wide, spec, dims)[0]

        res = minimize(
            negative, np.zeros(dims.n_free(spec)), method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000},
        )
        _, grad = log_posterior_unconstrained(res.x, data, wide, spec, dims)
        assert np.max(np.abs(grad)) < 1e-3

    def test_nonfinite_point_flags_divergence(self):
        data = make_data(10, seed=12)
        spec = make_spec("mixture", m=2)
        dims = ModelDims.from_dataset(spec, data)
        priors = PriorConfig.default(spec, dims)
        z = np.zeros(dims.n_free(spec))
        z[2 * 2] = -1e6  # first sigma underflows exp to zero
        value, grad = log_posterior_unconstrained(z, data, priors, spec, dims)
        assert value == -np.inf
        assert np.all(grad == 0.0)

    def test_m1_has_no_free_gate_columns(self):
        data = make_data(10, seed=13)
        spec = make_spec("mixture", m=1)
        dims = ModelDims.from_dataset(spec, data)
        assert dims.n_free(spec) == 2 + 1  # intercept, slope, sigma
        names = parameter_names(spec, data)
        assert not any(n.startswith("gate") for n in names)


class TestSpecSerialization:
    def test_model_spec_round_trip(self):
        spec = make_spec("fusion", m=3, constraint="ordered_bias")
        back = ModelSpec.from_json(json.loads(json.dumps(spec.to_json())))
        assert back == spec

    def test_priors_round_trip(self):
        spec = make_spec("fusion", m=2)
        dims = ModelDims(2, 2, 2, 2)
        priors = PriorConfig.default(spec, dims)
        back = PriorConfig.from_json(json.loads(json.dumps(priors.to_json())))
        np.testing.assert_array_equal(back.expert_coeffs.loc, priors.expert_coeffs.loc)
        np.testing.assert_array_equal(back.behavior.scale, priors.behavior.scale)

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            ModelSpec.from_json({"n_experts": 2, "mode": "average"})
