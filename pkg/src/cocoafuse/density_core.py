"""Kernels for combining univariate Gaussian densities.

Three combination rules are provided for a set of M Gaussian components
with weights ``pi``:

- ``mixture_logpdf``: the usual convex combination of densities,
- ``blend_logpdf``: a single Gaussian whose mean is the weighted mean of
  the component means and whose *variance* is the weighted mean of the
  component variances,
- ``fusion_logpdf``: a mixture of per-component blends, interpolating
  between blending (``beta -> 0``) and mixing (``beta -> 1``).

Everything here is pure and stateless; the functions accept scalars or
numpy arrays for the evaluation point ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GaussianParams",
    "Weights",
    "FusionCoefficient",
    "log_sum_exp",
    "gaussian_logpdf",
    "mixture_logpdf",
    "blend_params",
    "blend_logpdf",
    "fusion_component_params",
    "fusion_logpdf",
    "count_modes",
    "mode_count_grid",
]

_LOG_2PI = math.log(2.0 * math.pi)

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GaussianParams:
    """Mean and standard deviation of one Gaussian component.

    ``sigma`` is a standard deviation; the blend/fusion formulas square
    it internally where variances are combined.
    """

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def variance(self) -> float:
        return self.sigma * self.sigma


@dataclass(frozen=True)
class Weights:
    """Convex combination weights: nonnegative, summing to one."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        object.__setattr__(self, "pi", pi)
        if pi.ndim != 1 or pi.size == 0:
            raise ValueError("weights must be a nonempty 1-d vector")
        if np.any(pi < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(pi.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1, got {pi.sum()!r}")

    def __len__(self) -> int:
        return self.pi.size


@dataclass(frozen=True)
class FusionCoefficient:
    """Interpolation coefficient in (0, 1), stored as its logit.

    The open-interval constraint is enforced by the parameterization:
    any finite logit maps into (0, 1), and the endpoints are reached
    only as limits.
    """

    logit: float

    def __post_init__(self):
        if not math.isfinite(self.logit):
            raise ValueError("logit of the fusion coefficient must be finite")

    @classmethod
    def from_beta(cls, beta: float) -> "FusionCoefficient":
        if not 0.0 < beta < 1.0:
            raise ValueError(f"beta must lie strictly in (0, 1), got {beta}")
        return cls(logit=math.log(beta / (1.0 - beta)))

    @property
    def beta(self) -> float:
        # logistic, stable on both sides
        if self.logit >= 0.0:
            return 1.0 / (1.0 + math.exp(-self.logit))
        e = math.exp(self.logit)
        return e / (1.0 + e)


def log_sum_exp(terms, axis=None):
    """log(sum(exp(terms))) with the max factored out.

    Exact for the dominating term and immune to overflow for finite
    inputs; entries may be ``-inf`` (empty contribution) but not NaN.

    Raises
    ------
    ValueError
        If ``terms`` is empty along the reduction axis.
    """
    t = np.asarray(terms, dtype=float)
    empty = t.size == 0 if axis is None else t.shape[axis] == 0
    if empty:
        raise ValueError("log_sum_exp of an empty sequence")
    m = np.max(t, axis=axis, keepdims=True)
    # max of -inf means every term is -inf: exp(t - m) would be NaN
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(t - m_safe), axis=axis)) + np.squeeze(
            m_safe, axis=axis
        )
    if axis is None:
        return float(out)
    return out


def gaussian_logpdf(x, mu, sigma):
    """Log density of N(mu, sigma^2) at ``x`` (vectorized in all args)."""
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * _LOG_2PI


def _split(components: Sequence[GaussianParams]):
    mus = np.array([c.mu for c in components], dtype=float)
    sigmas = np.array([c.sigma for c in components], dtype=float)
    return mus, sigmas


def mixture_logpdf(x, components: Sequence[GaussianParams], w: Weights):
    """Log density of the weighted mixture at ``x``."""
    mus, sigmas = _split(components)
    _check_arity(mus, w)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):  # zero weights contribute -inf cleanly
        log_w = np.log(w.pi)
    terms = log_w + gaussian_logpdf(x[..., None], mus, sigmas)
    return log_sum_exp(terms, axis=-1)


def blend_params(components: Sequence[GaussianParams], w: Weights) -> GaussianParams:
    """Parameters of the blended Gaussian.

    The blend mean is the weighted mean of the component means and the
    blend *variance* is the weighted mean of the component variances.
    """
    mus, sigmas = _split(components)
    _check_arity(mus, w)
    mu = float(np.dot(w.pi, mus))
    var = float(np.dot(w.pi, sigmas * sigmas))
    return GaussianParams(mu=mu, sigma=math.sqrt(var))


def blend_logpdf(x, components: Sequence[GaussianParams], w: Weights):
    """Log density of the blend at ``x``.

    For Gaussian components the blend collapses to a single Gaussian
    with ``blend_params``, which is what is evaluated here.
    """
    p = blend_params(components, w)
    return gaussian_logpdf(x, p.mu, p.sigma)


def fusion_component_params(
    components: Sequence[GaussianParams], w: Weights, beta: FusionCoefficient
) -> list[GaussianParams]:
    """Per-component parameters after interpolating toward the blend.

    Component i keeps a fraction ``beta`` of its own mean/variance and
    takes the rest from the blend; equivalently each output is the blend
    of the original components under weights
    ``tau_j = beta * delta_ij + (1 - beta) * pi_j``.
    """
    mus, sigmas = _split(components)
    _check_arity(mus, w)
    b = beta.beta
    blend = blend_params(components, w)
    out_mus = b * mus + (1.0 - b) * blend.mu
    out_vars = b * sigmas * sigmas + (1.0 - b) * blend.variance
    return [
        GaussianParams(mu=float(m), sigma=math.sqrt(float(v)))
        for m, v in zip(out_mus, out_vars)
    ]


def fusion_logpdf(
    x, components: Sequence[GaussianParams], w: Weights, beta: FusionCoefficient
):
    """Log density of the fusion: the mixture of the interpolated components."""
    fused = fusion_component_params(components, w, beta)
    return mixture_logpdf(x, fused, w)


def _check_arity(mus: np.ndarray, w: Weights):
    if mus.size != len(w):
        raise ValueError(f"{mus.size} components but {len(w)} weights")


GridSpec = tuple[float, float, int]


def mode_count_grid(
    components: Sequence[GaussianParams], points_per_sigma: int = 25
) -> GridSpec:
    """A grid wide and fine enough for ``count_modes`` on these components.

    Spans all means +/- 6 max sigma with at least 2000 points and at
    least ``points_per_sigma`` points per smallest sigma.
    """
    mus, sigmas = _split(components)
    lo = float(mus.min() - 6.0 * sigmas.max())
    hi = float(mus.max() + 6.0 * sigmas.max())
    n = max(2000, int(math.ceil((hi - lo) / sigmas.min() * points_per_sigma)) + 1)
    return (lo, hi, n)


def count_modes(
    logpdf: Callable[[np.ndarray], np.ndarray],
    grid: GridSpec,
    min_sigma: float | None = None,
) -> int:
    """Number of strict interior local maxima of ``exp(logpdf)`` on a grid.

    ``logpdf`` must accept an ndarray of evaluation points. Runs of
    equal values are collapsed, so a flat-topped peak counts once.
    When ``min_sigma`` is given, a grid coarser than 10 points per
    ``min_sigma`` is rejected.
    """
    lo, hi, n = grid
    if n < 3 or hi <= lo:
        raise ValueError(f"degenerate grid {grid!r}")
    spacing = (hi - lo) / (n - 1)
    if min_sigma is not None and spacing > min_sigma / 10.0:
        raise ValueError(
            f"grid spacing {spacing:.3g} too coarse for min sigma {min_sigma:.3g}"
            " (need >= 10 points per sigma)"
        )
    xs = np.linspace(lo, hi, n)
    values = np.asarray(logpdf(xs), dtype=float)
    diffs = np.diff(values)
    signs = np.sign(diffs)
    signs = signs[signs != 0.0]  # collapse plateaus
    # a mode is a rise followed by a fall
    return int(np.sum((signs[:-1] > 0) & (signs[1:] < 0)))
