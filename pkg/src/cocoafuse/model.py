"""Probabilistic model: experts, gate, behavior gate, priors, gradients.

The model combines M conditionally Gaussian linear experts. A softmax
gate over covariate features produces the combination weights; in
fusion mode a logistic behavior gate produces the interpolation
coefficient beta that moves the conditional density between a blend
(beta -> 0) and a mixture (beta -> 1) of the experts.

Log-likelihoods are evaluated in log-space throughout (log-sum-exp over
experts), and all gradients are hand-derived closed forms so the
posterior can be explored with gradient-based samplers. A smooth
bijection maps the constrained parameters (positive scales, optional
ordering constraints, pinned last gate column) to an unconstrained
vector with a tractable log-Jacobian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataio import (
    Dataset,
    FeatureMapSpec,
    FeatureTransform,
    _build_design,
    feature_map,
)
from .density_core import FusionCoefficient, Weights, log_sum_exp
from .errors import ConfigError, DataError

__all__ = [
    "ModelSpec",
    "ModelDims",
    "ParameterVector",
    "PriorBlock",
    "PriorConfig",
    "gate_probs",
    "behavior_beta",
    "conditional_logpdf",
    "pointwise_loglik",
    "component_params",
    "log_prior",
    "log_posterior_unconstrained",
    "constrain",
    "unconstrain",
    "draw_from_prior",
    "parameter_names",
]

_LOG_2PI = math.log(2.0 * math.pi)

MODES = ("mixture", "blend", "fusion")
CONSTRAINTS = ("none", "ordered_bias", "ordered_sigma")


# ---------------------------------------------------------------------------
# Specs and parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Structure of one model instance.

    ``expert_features`` has dimension n (an intercept column is added
    implicitly, so each expert carries n + 1 coefficients plus a scale);
    gate and behavior feature maps get a leading constant entry.
    """

    n_experts: int
    mode: str
    expert_features: FeatureMapSpec
    gate_features: FeatureMapSpec
    behavior_features: FeatureMapSpec
    constraint: str = "none"

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"need at least one expert, got {self.n_experts}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"unknown constraint {self.constraint!r}")
        object.__setattr__(self, "expert_features", feature_map(self.expert_features))
        object.__setattr__(self, "gate_features", feature_map(self.gate_features))
        object.__setattr__(
            self, "behavior_features", feature_map(self.behavior_features)
        )

    @property
    def has_behavior(self) -> bool:
        return self.mode == "fusion"

    def to_json(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "mode": self.mode,
            "constraint": self.constraint,
            "expert_features": [t.to_json() for t in self.expert_features],
            "gate_features": [t.to_json() for t in self.gate_features],
            "behavior_features": [t.to_json() for t in self.behavior_features],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        try:
            return cls(
                n_experts=int(obj["n_experts"]),
                mode=obj["mode"],
                constraint=obj.get("constraint", "none"),
                expert_features=feature_map(obj.get("expert_features", [])),
                gate_features=feature_map(obj.get("gate_features", [])),
                behavior_features=feature_map(obj.get("behavior_features", [])),
            )
        except KeyError as exc:
            raise ConfigError(f"model spec missing field {exc}") from None


@dataclass(frozen=True)
class ModelDims:
    """Design-matrix widths the parameter shapes depend on."""

    n_experts: int
    p_expert: int  # intercept + feature coefficients
    q_gate: int
    q_behavior: int

    @classmethod
    def from_dataset(cls, spec: ModelSpec, data: Dataset) -> "ModelDims":
        if data.expert_design is None:
            raise DataError("dataset has no derived features; fit them first")
        return cls(
            n_experts=spec.n_experts,
            p_expert=data.expert_design.shape[1],
            q_gate=data.gate_design.shape[1],
            q_behavior=data.behavior_design.shape[1],
        )

    def n_free(self, spec: ModelSpec) -> int:
        m = self.n_experts
        n = m * self.p_expert + m + self.q_gate * (m - 1)
        if spec.has_behavior:
            n += self.q_behavior
        return n


@dataclass(frozen=True)
class ParameterVector:
    """All uncertain parameters of one model instance.

    ``gate`` is the full q_gate x M matrix with its last column pinned
    to zero (the last expert is the softmax reference). ``behavior`` is
    present only in fusion mode.
    """

    coeffs: np.ndarray  # (M, p_expert)
    sigmas: np.ndarray  # (M,)
    gate: np.ndarray  # (q_gate, M), last column zero
    behavior: np.ndarray | None = None  # (q_behavior,)

    def __post_init__(self):
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        sigmas = np.atleast_1d(np.asarray(self.sigmas, dtype=float))
        gate = np.atleast_2d(np.asarray(self.gate, dtype=float))
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "gate", gate)
        if self.behavior is not None:
            object.__setattr__(
                self, "behavior", np.atleast_1d(np.asarray(self.behavior, dtype=float))
            )
        m = coeffs.shape[0]
        if sigmas.shape != (m,):
            raise ValueError(f"expected {m} sigmas, got shape {sigmas.shape}")
        if np.any(sigmas <= 0):
            raise ValueError("expert sigmas must be positive")
        if gate.shape[1] != m:
            raise ValueError(f"gate matrix must have {m} columns")
        if np.any(gate[:, -1] != 0.0):
            raise ValueError("last gate column must be identically zero")

    @property
    def n_experts(self) -> int:
        return self.coeffs.shape[0]

    def check_constraint(self, constraint: str, tol: float = 0.0) -> bool:
        if constraint == "ordered_bias":
            return bool(np.all(np.diff(self.coeffs[:, 0]) >= -tol))
        if constraint == "ordered_sigma":
            return bool(np.all(np.diff(self.sigmas) >= -tol))
        return True


def parameter_names(spec: ModelSpec, data: Dataset) -> list[str]:
    """Flat names of the free parameters, matching the packing order."""
    names = []
    for i in range(spec.n_experts):
        for feat in data.expert_names:
            names.append(f"expert{i + 1}.{feat}")
    for i in range(spec.n_experts):
        names.append(f"expert{i + 1}.sigma")
    for feat in data.gate_names:
        for k in range(spec.n_experts - 1):
            names.append(f"gate.{feat}.expert{k + 1}")
    if spec.has_behavior:
        for feat in data.behavior_names:
            names.append(f"behavior.{feat}")
    return names


def flatten_params(pv: ParameterVector, spec: ModelSpec) -> np.ndarray:
    """Free parameters as one flat vector (pinned gate column excluded)."""
    parts = [pv.coeffs.ravel(), pv.sigmas, pv.gate[:, :-1].ravel()]
    if spec.has_behavior:
        parts.append(pv.behavior)
    return np.concatenate(parts)


def unflatten_params(
    flat: np.ndarray, spec: ModelSpec, dims: ModelDims
) -> ParameterVector:
    m, p, qg, qb = dims.n_experts, dims.p_expert, dims.q_gate, dims.q_behavior
    i = 0
    coeffs = flat[i : i + m * p].reshape(m, p)
    i += m * p
    sigmas = flat[i : i + m]
    i += m
    gate_free = flat[i : i + qg * (m - 1)].reshape(qg, m - 1)
    i += qg * (m - 1)
    gate = np.concatenate([gate_free, np.zeros((qg, 1))], axis=1)
    behavior = None
    if spec.has_behavior:
        behavior = flat[i : i + qb]
        i += qb
    return ParameterVector(coeffs=coeffs, sigmas=sigmas, gate=gate, behavior=behavior)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorBlock:
    """Independent priors for one parameter block: a family plus
    per-entry location and scale arrays."""

    family: str  # "laplace" | "lognormal"
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.family not in ("laplace", "lognormal"):
            raise ConfigError(f"unknown prior family {self.family!r}")
        loc = np.asarray(self.loc, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)
        if loc.shape != scale.shape:
            raise ConfigError("prior location/scale shapes differ")
        if np.any(scale <= 0):
            raise ConfigError("prior scales must be positive")

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "location": self.loc.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PriorBlock":
        return cls(
            family=obj["family"],
            loc=np.asarray(obj["location"], dtype=float),
            scale=np.asarray(obj["scale"], dtype=float),
        )


@dataclass(frozen=True)
class PriorConfig:
    """Per-block prior hyperparameters.

    Coefficient, gate, and behavior entries carry Laplace priors; the
    expert scales carry lognormal priors. The pinned gate column has no
    prior (the ``gate`` block covers the free columns only).
    """

    expert_coeffs: PriorBlock  # (M, p_expert)
    expert_sigmas: PriorBlock  # (M,)
    gate: PriorBlock  # (q_gate, M - 1)
    behavior: PriorBlock | None = None  # (q_behavior,)

    def __post_init__(self):
        if self.expert_coeffs.family != "laplace":
            raise ConfigError("expert coefficients use laplace priors")
        if self.expert_sigmas.family != "lognormal":
            raise ConfigError("expert sigmas use lognormal priors")
        if self.gate.family != "laplace":
            raise ConfigError("gate entries use laplace priors")
        if self.behavior is not None and self.behavior.family != "laplace":
            raise ConfigError("behavior entries use laplace priors")

    @classmethod
    def default(cls, spec: ModelSpec, dims: ModelDims) -> "PriorConfig":
        """Laplace(0, 1) on all coefficient-like blocks, lognormal(0, 1)
        on the expert scales."""
        m, p, qg, qb = dims.n_experts, dims.p_expert, dims.q_gate, dims.q_behavior

        def block(family, shape):
            return PriorBlock(family=family, loc=np.zeros(shape), scale=np.ones(shape))

        return cls(
            expert_coeffs=block("laplace", (m, p)),
            expert_sigmas=block("lognormal", (m,)),
            gate=block("laplace", (qg, m - 1)),
            behavior=block("laplace", (qb,)) if spec.has_behavior else None,
        )

    def to_json(self) -> dict:
        out = {
            "expert_coeffs": self.expert_coeffs.to_json(),
            "expert_sigmas": self.expert_sigmas.to_json(),
            "gate": self.gate.to_json(),
        }
        if self.behavior is not None:
            out["behavior"] = self.behavior.to_json()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PriorConfig":
        return cls(
            expert_coeffs=PriorBlock.from_json(obj["expert_coeffs"]),
            expert_sigmas=PriorBlock.from_json(obj["expert_sigmas"]),
            gate=PriorBlock.from_json(obj["gate"]),
            behavior=(
                PriorBlock.from_json(obj["behavior"]) if "behavior" in obj else None
            ),
        )

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PriorConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _laplace_logpdf_sum(x, loc, scale):
    return float(np.sum(-np.log(2.0 * scale) - np.abs(x - loc) / scale))


def _lognormal_logpdf_sum(x, loc, scale):
    lx = np.log(x)
    z = (lx - loc) / scale
    return float(np.sum(-lx - np.log(scale) - 0.5 * _LOG_2PI - 0.5 * z * z))


def log_prior(pv: ParameterVector, priors: PriorConfig) -> float:
    """Sum of the independent block log-densities at ``pv``."""
    out = _laplace_logpdf_sum(pv.coeffs, priors.expert_coeffs.loc, priors.expert_coeffs.scale)
    out += _lognormal_logpdf_sum(
        pv.sigmas, priors.expert_sigmas.loc, priors.expert_sigmas.scale
    )
    out += _laplace_logpdf_sum(pv.gate[:, :-1], priors.gate.loc, priors.gate.scale)
    if pv.behavior is not None:
        if priors.behavior is None:
            raise ConfigError("model has a behavior block but priors do not")
        out += _laplace_logpdf_sum(pv.behavior, priors.behavior.loc, priors.behavior.scale)
    return out


def _grad_log_prior(pv: ParameterVector, priors: PriorConfig):
    """Gradients of the log prior with respect to each parameter block."""
    g_coeffs = -np.sign(pv.coeffs - priors.expert_coeffs.loc) / priors.expert_coeffs.scale
    ls = np.log(pv.sigmas)
    g_sigmas = (
        -1.0 / pv.sigmas
        - (ls - priors.expert_sigmas.loc)
        / (priors.expert_sigmas.scale**2 * pv.sigmas)
    )
    g_gate = -np.sign(pv.gate[:, :-1] - priors.gate.loc) / priors.gate.scale
    g_behavior = None
    if pv.behavior is not None:
        g_behavior = -np.sign(pv.behavior - priors.behavior.loc) / priors.behavior.scale
    return g_coeffs, g_sigmas, g_gate, g_behavior


def grad_log_prior_hyper(pv: ParameterVector, priors: PriorConfig) -> dict:
    """Gradient of log p(theta | lambda) with respect to the prior
    hyperparameters, as {block: {"loc": array, "scale": array}}.

    Laplace blocks: d/dloc = sign(x - loc)/b, d/db = -1/b + |x - loc|/b^2.
    Lognormal blocks: d/dloc = (ln x - loc)/s^2,
    d/ds = -1/s + (ln x - loc)^2 / s^3.
    """
    out = {}

    def laplace(x, block):
        r = x - block.loc
        return {
            "loc": np.sign(r) / block.scale,
            "scale": -1.0 / block.scale + np.abs(r) / block.scale**2,
        }

    out["expert_coeffs"] = laplace(pv.coeffs, priors.expert_coeffs)
    ls = np.log(pv.sigmas)
    r = ls - priors.expert_sigmas.loc
    s = priors.expert_sigmas.scale
    out["expert_sigmas"] = {"loc": r / s**2, "scale": -1.0 / s + r * r / s**3}
    out["gate"] = laplace(pv.gate[:, :-1], priors.gate)
    if pv.behavior is not None:
        out["behavior"] = laplace(pv.behavior, priors.behavior)
    return out


# ---------------------------------------------------------------------------
# Gate, behavior gate, and the conditional likelihood
# ---------------------------------------------------------------------------


def gate_probs(x_gate: np.ndarray, gate_matrix: np.ndarray) -> Weights:
    """Softmax expert weights for one gate feature vector.

    Computed in log-space so extreme logits cannot overflow.
    """
    x_gate = np.asarray(x_gate, dtype=float)
    gate_matrix = np.asarray(gate_matrix, dtype=float)
    if x_gate.shape != (gate_matrix.shape[0],):
        raise ValueError(
            f"gate features have length {x_gate.shape}, matrix rows {gate_matrix.shape[0]}"
        )
    logits = x_gate @ gate_matrix
    log_p = logits - log_sum_exp(logits)
    return Weights(pi=np.exp(log_p))


def behavior_beta(x_behavior: np.ndarray, behavior_vector: np.ndarray) -> FusionCoefficient:
    """Fusion coefficient for one behavior feature vector."""
    x_behavior = np.asarray(x_behavior, dtype=float)
    behavior_vector = np.asarray(behavior_vector, dtype=float)
    if x_behavior.shape != behavior_vector.shape:
        raise ValueError(
            f"behavior features {x_behavior.shape} vs vector {behavior_vector.shape}"
        )
    return FusionCoefficient(logit=float(x_behavior @ behavior_vector))


def _log_gate_matrix(G: np.ndarray, pv: ParameterVector):
    """Row-wise log softmax weights, shape (N, M)."""
    n = G.shape[0]
    m = pv.n_experts
    if m == 1:
        return np.zeros((n, 1))
    logits = np.concatenate([G @ pv.gate[:, :-1], np.zeros((n, 1))], axis=1)
    norm = log_sum_exp(logits, axis=1)
    return logits - norm[:, None]


def _loglik_terms(
    y: np.ndarray,
    U: np.ndarray,
    G: np.ndarray,
    B: np.ndarray | None,
    pv: ParameterVector,
    mode: str,
    want_grad: bool,
):
    """Per-row conditional log-likelihood and (optionally) its gradients.

    Returns ``(ll, grads)`` where ``ll`` has shape (N,) and ``grads`` is
    ``(d_coeffs, d_sigmas, d_gate_free, d_behavior)`` summed over rows,
    or None when ``want_grad`` is false.
    """
    n = U.shape[0]
    m = pv.n_experts
    E = U @ pv.coeffs.T  # (N, M) expert location predictions
    w = pv.sigmas**2  # (M,)
    log_alpha = _log_gate_matrix(G, pv)
    alpha = np.exp(log_alpha)
    yc = y[:, None]

    if mode == "mixture":
        res = yc - E
        lp = log_alpha - 0.5 * (np.log(w) + _LOG_2PI) - 0.5 * res * res / w
        ll = log_sum_exp(lp, axis=1)
        if not want_grad:
            return ll, None
        r = np.exp(lp - ll[:, None])
        d1 = res / w
        d2 = 0.5 * (res * res / w - 1.0) / w
        rd1 = r * d1
        rd2 = r * d2
        d_coeffs = rd1.T @ U
        d_sigmas = rd2.sum(axis=0) * 2.0 * pv.sigmas
        d_gate = G.T @ (r - alpha)[:, : m - 1]
        return ll, (d_coeffs, d_sigmas, d_gate, None)

    mu_b = np.sum(alpha * E, axis=1)  # (N,)
    w_b = alpha @ w  # (N,)

    if mode == "blend":
        res = y - mu_b
        ll = -0.5 * (np.log(w_b) + _LOG_2PI) - 0.5 * res * res / w_b
        if not want_grad:
            return ll, None
        d1 = res / w_b
        d2 = 0.5 * (res * res / w_b - 1.0) / w_b
        d_coeffs = (alpha * d1[:, None]).T @ U
        d_sigmas = (alpha * d2[:, None]).sum(axis=0) * 2.0 * pv.sigmas
        d_logits = alpha * (
            (E - mu_b[:, None]) * d1[:, None] + (w[None, :] - w_b[:, None]) * d2[:, None]
        )
        d_gate = G.T @ d_logits[:, : m - 1]
        return ll, (d_coeffs, d_sigmas, d_gate, None)

    if mode != "fusion":
        raise ConfigError(f"unknown mode {mode!r}")
    if pv.behavior is None or B is None:
        raise ConfigError("fusion mode needs a behavior block")
    t = B @ pv.behavior
    beta = expit(t)  # (N,)
    bc = beta[:, None]
    E_f = bc * E + (1.0 - bc) * mu_b[:, None]
    w_f = bc * w[None, :] + (1.0 - bc) * w_b[:, None]
    res = yc - E_f
    lp = log_alpha - 0.5 * (np.log(w_f) + _LOG_2PI) - 0.5 * res * res / w_f
    ll = log_sum_exp(lp, axis=1)
    if not want_grad:
        return ll, None
    r = np.exp(lp - ll[:, None])
    d1 = res / w_f
    d2 = 0.5 * (res * res / w_f - 1.0) / w_f
    rd1 = r * d1
    rd2 = r * d2
    s1 = rd1.sum(axis=1)  # (N,)
    s2 = rd2.sum(axis=1)
    d_E = bc * rd1 + (1.0 - bc) * alpha * s1[:, None]
    d_w = bc * rd2 + (1.0 - bc) * alpha * s2[:, None]
    d_coeffs = d_E.T @ U
    d_sigmas = d_w.sum(axis=0) * 2.0 * pv.sigmas
    d_logits = (r - alpha) + (1.0 - bc) * alpha * (
        (E - mu_b[:, None]) * s1[:, None] + (w[None, :] - w_b[:, None]) * s2[:, None]
    )
    d_gate = G.T @ d_logits[:, : m - 1]
    d_beta = np.sum(rd1 * (E - mu_b[:, None]), axis=1) + np.sum(
        rd2 * (w[None, :] - w_b[:, None]), axis=1
    )
    d_behavior = B.T @ (d_beta * beta * (1.0 - beta))
    return ll, (d_coeffs, d_sigmas, d_gate, d_behavior)


def pointwise_loglik(pv: ParameterVector, data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Conditional log-likelihood of every row under ``pv``, shape (N,)."""
    ll, _ = _loglik_terms(
        data.y,
        data.expert_design,
        data.gate_design,
        data.behavior_design,
        pv,
        spec.mode,
        want_grad=False,
    )
    return ll


def conditional_logpdf(
    y,
    x: dict,
    pv: ParameterVector,
    spec: ModelSpec,
    feature_records: dict,
):
    """Conditional log density of responses ``y`` at raw covariates ``x``.

    ``x`` maps column names to scalars or arrays; the fitted feature
    records turn them into the expert/gate/behavior design rows.
    """
    cols = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in x.items()}
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    if not all(np.all(np.isfinite(v)) for v in cols.values()):
        raise DataError("non-finite covariate values")
    U, _ = _build_design(feature_records["expert"], cols, leading_intercept=True)
    G, _ = _build_design(feature_records["gate"], cols, leading_intercept=False)
    B, _ = _build_design(feature_records["behavior"], cols, leading_intercept=False)
    ll, _ = _loglik_terms(y_arr, U, G, B, pv, spec.mode, want_grad=False)
    return float(ll[0]) if np.isscalar(y) or np.ndim(y) == 0 else ll


def component_params(
    pv: ParameterVector, U: np.ndarray, G: np.ndarray, B: np.ndarray | None, mode: str
):
    """Conditional density parameters per row: (means, sigmas, weights).

    Mixture mode returns the raw expert parameters, fusion mode the
    interpolated ones, and blend mode the single collapsed Gaussian
    (arrays of width 1).
    """
    E = U @ pv.coeffs.T
    w = pv.sigmas**2
    alpha = np.exp(_log_gate_matrix(G, pv))
    if mode == "mixture":
        sig = np.broadcast_to(pv.sigmas[None, :], E.shape)
        return E, np.array(sig), alpha
    mu_b = np.sum(alpha * E, axis=1)
    w_b = alpha @ w
    if mode == "blend":
        return mu_b[:, None], np.sqrt(w_b)[:, None], np.ones((E.shape[0], 1))
    beta = expit(B @ pv.behavior)[:, None]
    E_f = beta * E + (1.0 - beta) * mu_b[:, None]
    w_f = beta * w[None, :] + (1.0 - beta) * w_b[:, None]
    return E_f, np.sqrt(w_f), alpha


# ---------------------------------------------------------------------------
# Constraining transform
# ---------------------------------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_inv(x):
    # inverse of log(1 + exp(z)); x must be positive
    return x + np.log1p(-np.exp(-x))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _chain_forward(z: np.ndarray, head_exp: bool):
    """First element free (or exp'd), then cumulative softplus increments.

    Returns the constrained vector and the transform's log-Jacobian.
    """
    out = np.empty_like(z)
    out[0] = np.exp(z[0]) if head_exp else z[0]
    log_jac = z[0] if head_exp else 0.0
    if z.size > 1:
        incr = _softplus(z[1:])
        out[1:] = out[0] + np.cumsum(incr)
        log_jac += float(np.sum(_log_sigmoid(z[1:])))
    return out, log_jac


def _chain_inverse(x: np.ndarray, head_exp: bool) -> np.ndarray:
    z = np.empty_like(x)
    z[0] = math.log(x[0]) if head_exp else x[0]
    if x.size > 1:
        diffs = np.diff(x)
        if np.any(diffs <= 0):
            raise ValueError("ordered block must be strictly increasing to invert")
        z[1:] = _softplus_inv(diffs)
    return z


def _chain_backward(z: np.ndarray, g: np.ndarray, head_exp: bool) -> np.ndarray:
    """Pull block gradients (w.r.t. the constrained values) back through
    the chain, adding the log-Jacobian gradient."""
    suffix = np.cumsum(g[::-1])[::-1]
    gz = np.empty_like(g)
    if head_exp:
        gz[0] = suffix[0] * np.exp(z[0]) + 1.0
    else:
        gz[0] = suffix[0]
    if z.size > 1:
        sig = expit(z[1:])
        gz[1:] = suffix[1:] * sig + (1.0 - sig)
    return gz


def constrain(
    z: np.ndarray, spec: ModelSpec, dims: ModelDims
) -> tuple[ParameterVector, float]:
    """Map an unconstrained vector to parameters; returns the log-Jacobian.

    Scales go through exp; under an ordering constraint the ordered
    block becomes head + cumulative softplus increments; everything
    else is identity.
    """
    m, p, qg, qb = dims.n_experts, dims.p_expert, dims.q_gate, dims.q_behavior
    z = np.asarray(z, dtype=float)
    if z.shape != (dims.n_free(spec),):
        raise ValueError(f"expected {dims.n_free(spec)} free parameters, got {z.shape}")
    i = 0
    coeffs = z[i : i + m * p].reshape(m, p).copy()
    i += m * p
    z_sig = z[i : i + m]
    i += m
    gate_free = z[i : i + qg * (m - 1)].reshape(qg, m - 1)
    i += qg * (m - 1)
    behavior = None
    if spec.has_behavior:
        behavior = z[i : i + qb].copy()

    log_jac = 0.0
    if spec.constraint == "ordered_bias" and m > 1:
        coeffs[:, 0], lj = _chain_forward(coeffs[:, 0].copy(), head_exp=False)
        log_jac += lj
    if spec.constraint == "ordered_sigma" and m > 1:
        sigmas, lj = _chain_forward(z_sig.copy(), head_exp=True)
        log_jac += lj
    else:
        sigmas = np.exp(z_sig)
        log_jac += float(np.sum(z_sig))
    gate = np.concatenate([gate_free, np.zeros((qg, 1))], axis=1)
    pv = ParameterVector(coeffs=coeffs, sigmas=sigmas, gate=gate, behavior=behavior)
    return pv, log_jac


def unconstrain(pv: ParameterVector, spec: ModelSpec) -> np.ndarray:
    """Inverse of :func:`constrain` (round-trips to ~1e-12)."""
    coeffs = pv.coeffs.copy()
    m = pv.n_experts
    if spec.constraint == "ordered_bias" and m > 1:
        coeffs[:, 0] = _chain_inverse(pv.coeffs[:, 0], head_exp=False)
    if spec.constraint == "ordered_sigma" and m > 1:
        z_sig = _chain_inverse(pv.sigmas, head_exp=True)
    else:
        z_sig = np.log(pv.sigmas)
    parts = [coeffs.ravel(), z_sig, pv.gate[:, :-1].ravel()]
    if spec.has_behavior:
        if pv.behavior is None:
            raise ValueError("fusion-mode parameters need a behavior block")
        parts.append(pv.behavior)
    return np.concatenate(parts)


def _grad_to_unconstrained(
    z: np.ndarray,
    g_coeffs: np.ndarray,
    g_sigmas: np.ndarray,
    g_gate: np.ndarray,
    g_behavior: np.ndarray | None,
    spec: ModelSpec,
    dims: ModelDims,
) -> np.ndarray:
    """Chain rule through :func:`constrain`, log-Jacobian terms included."""
    m, p, qg, qb = dims.n_experts, dims.p_expert, dims.q_gate, dims.q_behavior
    i = 0
    z_coeffs = z[i : i + m * p].reshape(m, p)
    i += m * p
    z_sig = z[i : i + m]

    gz_coeffs = g_coeffs.copy()
    if spec.constraint == "ordered_bias" and m > 1:
        gz_coeffs[:, 0] = _chain_backward(z_coeffs[:, 0], g_coeffs[:, 0], head_exp=False)
    if spec.constraint == "ordered_sigma" and m > 1:
        gz_sig = _chain_backward(z_sig, g_sigmas, head_exp=True)
    else:
        gz_sig = g_sigmas * np.exp(z_sig) + 1.0
    parts = [gz_coeffs.ravel(), gz_sig, g_gate.ravel()]
    if spec.has_behavior:
        parts.append(g_behavior)
    return np.concatenate(parts)


def log_posterior_unconstrained(
    z: np.ndarray,
    data: Dataset,
    priors: PriorConfig,
    spec: ModelSpec,
    dims: ModelDims | None = None,
) -> tuple[float, np.ndarray]:
    """Unnormalized log posterior and its gradient in unconstrained space.

    The value is the data log-likelihood plus log prior plus the
    transform's log-Jacobian. A non-finite intermediate yields
    ``(-inf, zeros)`` so the caller can treat the point as divergent
    instead of crashing.
    """
    if dims is None:
        dims = ModelDims.from_dataset(spec, data)
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            pv, log_jac = constrain(z, spec, dims)
        except (ValueError, FloatingPointError, OverflowError):
            return -np.inf, np.zeros_like(z)
        if not np.all(np.isfinite(pv.sigmas)) or np.any(pv.sigmas <= 0):
            return -np.inf, np.zeros_like(z)
        ll, grads = _loglik_terms(
            data.y,
            data.expert_design,
            data.gate_design,
            data.behavior_design,
            pv,
            spec.mode,
            want_grad=True,
        )
        value = float(np.sum(ll)) + log_prior(pv, priors) + log_jac
        if not math.isfinite(value):
            return -np.inf, np.zeros_like(z)
        d_coeffs, d_sigmas, d_gate, d_behavior = grads
        p_coeffs, p_sigmas, p_gate, p_behavior = _grad_log_prior(pv, priors)
        g_behavior = None
        if spec.has_behavior:
            g_behavior = d_behavior + p_behavior
        grad = _grad_to_unconstrained(
            z,
            d_coeffs + p_coeffs,
            d_sigmas + p_sigmas,
            d_gate + p_gate,
            g_behavior,
            spec,
            dims,
        )
        if not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros_like(z)
    return value, grad


def draw_from_prior(
    priors: PriorConfig, spec: ModelSpec, dims: ModelDims, rng: np.random.Generator
) -> ParameterVector:
    """One draw from the prior, sorted where an ordering constraint applies."""
    m, p, qg, qb = dims.n_experts, dims.p_expert, dims.q_gate, dims.q_behavior
    coeffs = rng.laplace(priors.expert_coeffs.loc, priors.expert_coeffs.scale, size=(m, p))
    sigmas = rng.lognormal(priors.expert_sigmas.loc, priors.expert_sigmas.scale, size=m)
    if spec.constraint == "ordered_bias":
        coeffs[:, 0] = np.sort(coeffs[:, 0])
    if spec.constraint == "ordered_sigma":
        sigmas = np.sort(sigmas)
    gate_free = rng.laplace(priors.gate.loc, priors.gate.scale, size=(qg, m - 1))
    gate = np.concatenate([gate_free, np.zeros((qg, 1))], axis=1)
    behavior = None
    if spec.has_behavior:
        behavior = rng.laplace(priors.behavior.loc, priors.behavior.scale, size=qb)
    return ParameterVector(coeffs=coeffs, sigmas=sigmas, gate=gate, behavior=behavior)
