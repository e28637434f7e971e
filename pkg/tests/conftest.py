"""Shared helpers: random instances and independent oracles."""

from __future__ import annotations

import numpy as np
import pytest

from cocoafuse.density_core import (
    FusionCoefficient,
    GaussianParams,
    Weights,
    blend_params,
    gaussian_logpdf,
    log_sum_exp,
)


def random_components(rng: np.random.Generator, m: int) -> list[GaussianParams]:
    """Proper components with means in [-5, 5], sigmas in [0.1, 2]."""
    mus = rng.uniform(-5.0, 5.0, size=m)
    sigmas = rng.uniform(0.1, 2.0, size=m)
    return [GaussianParams(float(mu), float(s)) for mu, s in zip(mus, sigmas)]


def random_interior_weights(rng: np.random.Generator, m: int) -> Weights:
    """Strictly interior weights (every entry at least 0.05 after mixing)."""
    raw = rng.dirichlet(np.ones(m))
    pi = 0.95 * raw + 0.05 / m
    return Weights(pi=pi / pi.sum())


def naive_interpolation_logpdf(x, components, w: Weights, beta: float):
    """Counterexample generator: the direct density mixture
    beta * f_mix + (1 - beta) * f_blend, which is itself a mixture of
    M + 1 components and can pick up a spurious mode."""
    bp = blend_params(components, w)
    mus = np.array([c.mu for c in components] + [bp.mu])
    sigmas = np.array([c.sigma for c in components] + [bp.sigma])
    weights = np.concatenate([beta * w.pi, [1.0 - beta]])
    x = np.asarray(x, dtype=float)
    terms = np.log(weights) + gaussian_logpdf(x[..., None], mus, sigmas)
    return log_sum_exp(terms, axis=-1)


def blend_logpdf_general_form(x, components, w: Weights):
    """Blend density straight from its definition: a sum of rescaled
    components evaluated at the matched standardized coordinates."""
    bp = blend_params(components, w)
    x = np.asarray(x, dtype=float)
    total = np.zeros(np.shape(x))
    for pi, c in zip(w.pi, components):
        x_i = c.mu + c.sigma * (x - bp.mu) / bp.sigma
        total = total + pi * (c.sigma / bp.sigma) * np.exp(
            gaussian_logpdf(x_i, c.mu, c.sigma)
        )
    return np.log(total)


def density_integral(logpdf, lo: float, hi: float, n: int = 40001) -> float:
    """Simpson quadrature of exp(logpdf) on [lo, hi]."""
    from scipy.integrate import simpson

    xs = np.linspace(lo, hi, n)
    return float(simpson(np.exp(logpdf(xs)), x=xs))


def posterior_from_params(param_list, spec, dims, data=None):
    """Wrap explicit parameter draws as a single-chain PosteriorSample.

    ``pointwise`` is filled from ``data`` when given, else left empty.
    """
    from cocoafuse.model import flatten_params, pointwise_loglik
    from cocoafuse.sampler import PosteriorSample, SamplerConfig

    s = len(param_list)
    flats = np.stack([flatten_params(pv, spec) for pv in param_list])
    if data is not None:
        pw = np.stack([pointwise_loglik(pv, data, spec) for pv in param_list])
    else:
        pw = np.zeros((s, 0))
    cfg = SamplerConfig(chains=1, warmup=100, samples=max(100, s), seed=0)
    return PosteriorSample(
        draws=flats[None, :, :],
        pointwise=pw[None, :, :],
        spec=spec,
        dims=dims,
        config=cfg,
        divergences=np.zeros(1, dtype=int),
        accept_rate=np.ones(1),
        step_sizes=np.ones(1),
        inv_mass=np.ones((1, flats.shape[1])),
        parameter_names=[f"p{i}" for i in range(flats.shape[1])],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
