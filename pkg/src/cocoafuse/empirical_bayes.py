"""Prior-hyperparameter tuning by stochastic gradient ascent.

The marginal likelihood of the prior hyperparameters is intractable, so
the ascent uses two Monte Carlo surrogates computed from posterior
draws: the expected log-likelihood plus expected log-prior, whose
hyperparameter gradient is the draw-averaged score of the prior, and an
entropy bonus on the averaged gate activations that penalizes expert
collapse. Evaluations are stochastic, so the tuner keeps every iterate
and returns the best recorded one.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .errors import ConvergenceError, NumericalError
from .model import (
    ModelSpec,
    PriorConfig,
    PriorBlock,
    _log_gate_matrix,
    grad_log_prior_hyper,
    log_prior,
)
from .sampler import PosteriorSample, SamplerConfig, sample_posterior

__all__ = [
    "EBConfig",
    "EBTrace",
    "ell_estimate",
    "entropy_penalty",
    "normalized_entropy",
    "marginal_grad_estimate",
    "entropy_grad_estimate",
    "tune",
]

HyperGrad = dict  # {block: {"loc": ndarray, "scale": ndarray}}


@dataclass(frozen=True)
class EBConfig:
    gamma: float = 1.0
    step_size: float = 0.05
    decay: str = "inv_sqrt"  # or "constant"
    horizon: int = 20
    inner: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(chains=2, warmup=300, samples=300)
    )
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("entropy weight must be nonnegative")
        if self.horizon < 1:
            raise ValueError("need at least one iterate")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.decay not in ("inv_sqrt", "constant"):
            raise ValueError(f"unknown step decay {self.decay!r}")

    def step_at(self, k: int) -> float:
        if self.decay == "constant":
            return self.step_size
        return self.step_size / math.sqrt(k)


@dataclass
class EBIterate:
    index: int
    priors: PriorConfig
    objective: float
    grad_norm: float
    flagged: bool


@dataclass
class EBTrace:
    iterates: list[EBIterate]
    best_index: int

    def save_csv(self, path: str | Path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iterate", "objective", "grad_norm", "flagged", "best"])
            for it in self.iterates:
                writer.writerow(
                    [
                        it.index,
                        repr(it.objective),
                        repr(it.grad_norm),
                        int(it.flagged),
                        int(it.index == self.best_index),
                    ]
                )


# ---------------------------------------------------------------------------
# Surrogate objective pieces
# ---------------------------------------------------------------------------


def ell_estimate(post: PosteriorSample, priors: PriorConfig) -> float:
    """Draw-averaged total log-likelihood plus log-prior."""
    ll = post.loglik_matrix()
    s = post.n_draws
    data_term = float(ll.sum()) / s
    prior_term = sum(log_prior(pv, priors) for pv in post.iter_parameters()) / s
    return data_term + prior_term


def normalized_entropy(avg_activations: np.ndarray) -> float:
    """Shannon entropy of the averaged activations, normalized to [0, 1].

    Zero activations contribute nothing (0 log 0 = 0); the value is 1
    only for perfectly uniform activations.
    """
    a = np.asarray(avg_activations, dtype=float)
    m = a.size
    if m == 1:
        return 1.0
    nz = a[a > 0.0]
    return float(-np.sum(nz * np.log2(nz)) / math.log2(m))


def _log_entropy_per_draw(post: PosteriorSample, data: Dataset) -> np.ndarray:
    """ln H of the row-averaged gate activations, one entry per draw.

    Collapse (an expert with zero average activation driving H to 0)
    yields -inf entries.
    """
    out = np.empty(post.n_draws)
    g = data.gate_design
    for s, pv in enumerate(post.iter_parameters()):
        avg = np.exp(_log_gate_matrix(g, pv)).mean(axis=0)
        h = normalized_entropy(avg)
        out[s] = math.log(h) if h > 0.0 else -np.inf
    return out


def entropy_penalty(post: PosteriorSample, data: Dataset) -> float:
    """Mean over draws of ln H(average activations); always <= 0.

    A fully collapsed gate gives -inf, which propagates as a flagged
    surrogate value.
    """
    return float(np.mean(_log_entropy_per_draw(post, data)))


# ---------------------------------------------------------------------------
# Hyperparameter gradients
# ---------------------------------------------------------------------------


def _zero_grad_like(priors: PriorConfig) -> HyperGrad:
    out = {}
    for name, block in _iter_blocks(priors):
        out[name] = {"loc": np.zeros_like(block.loc), "scale": np.zeros_like(block.scale)}
    return out


def _iter_blocks(priors: PriorConfig):
    yield "expert_coeffs", priors.expert_coeffs
    yield "expert_sigmas", priors.expert_sigmas
    yield "gate", priors.gate
    if priors.behavior is not None:
        yield "behavior", priors.behavior


def _accumulate(total: HyperGrad, term: HyperGrad, weight: float):
    for name, parts in term.items():
        total[name]["loc"] += weight * parts["loc"]
        total[name]["scale"] += weight * parts["scale"]


def grad_norm(grad: HyperGrad) -> float:
    sq = 0.0
    for parts in grad.values():
        sq += float(np.sum(parts["loc"] ** 2)) + float(np.sum(parts["scale"] ** 2))
    return math.sqrt(sq)


def combine_grads(a: HyperGrad, b: HyperGrad, weight_b: float) -> HyperGrad:
    out = {
        name: {"loc": parts["loc"].copy(), "scale": parts["scale"].copy()}
        for name, parts in a.items()
    }
    _accumulate(out, b, weight_b)
    return out


def marginal_grad_estimate(post: PosteriorSample, priors: PriorConfig) -> HyperGrad:
    """Draw-averaged score of the prior: the ascent direction for the
    log marginal likelihood."""
    total = _zero_grad_like(priors)
    s = post.n_draws
    for pv in post.iter_parameters():
        _accumulate(total, grad_log_prior_hyper(pv, priors), 1.0 / s)
    return total


def entropy_grad_estimate(
    post: PosteriorSample, priors: PriorConfig, data: Dataset
) -> HyperGrad:
    """Score-function gradient of the entropy bonus, with the sample
    mean of the ln H terms as a control variate.

    Draws whose ln H is -inf (collapsed activations) are excluded from
    the average and flagged with a warning.
    """
    log_h = _log_entropy_per_draw(post, data)
    finite = np.isfinite(log_h)
    if not np.all(finite):
        warnings.warn(
            f"excluding {int(np.sum(~finite))} collapsed draws from the "
            "entropy gradient",
            RuntimeWarning,
        )
    total = _zero_grad_like(priors)
    if not np.any(finite):
        return total
    center = float(log_h[finite].mean())
    n_used = int(np.sum(finite))
    for s, pv in enumerate(post.iter_parameters()):
        if not finite[s]:
            continue
        weight = (log_h[s] - center) / n_used
        _accumulate(total, grad_log_prior_hyper(pv, priors), weight)
    return total


def ascend(priors: PriorConfig, grad: HyperGrad, step: float) -> PriorConfig:
    """One ascent step; scales move in log-space to stay positive."""

    def bump(name: str, block: PriorBlock) -> PriorBlock:
        g = grad[name]
        new_loc = block.loc + step * g["loc"]
        # d/d(log s) = s * d/ds
        new_scale = block.scale * np.exp(step * g["scale"] * block.scale)
        return PriorBlock(family=block.family, loc=new_loc, scale=new_scale)

    return PriorConfig(
        expert_coeffs=bump("expert_coeffs", priors.expert_coeffs),
        expert_sigmas=bump("expert_sigmas", priors.expert_sigmas),
        gate=bump("gate", priors.gate),
        behavior=(
            bump("behavior", priors.behavior) if priors.behavior is not None else None
        ),
    )


# ---------------------------------------------------------------------------
# The ascent loop
# ---------------------------------------------------------------------------


def tune(
    data: Dataset,
    spec: ModelSpec,
    priors0: PriorConfig,
    cfg: EBConfig,
    sample_fn=sample_posterior,
) -> tuple[PriorConfig, EBTrace]:
    """Gradient-ascend the surrogate objective over the prior
    hyperparameters and return the best recorded iterate.

    Each iterate re-samples the posterior under its own priors with the
    reduced inner budget, evaluates the surrogate on those draws (no
    re-sampling for evaluation), then takes one ascent step. Sampler
    failures skip the iterate with a flag; if every iterate fails the
    tuning itself fails.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.horizon)
    priors = priors0
    iterates: list[EBIterate] = []
    best_index = -1
    best_value = -np.inf
    for k in range(1, cfg.horizon + 1):
        inner_seed = int(seeds[k - 1].generate_state(1, dtype=np.uint64)[0] % 2**63)
        inner_cfg = replace(cfg.inner, seed=inner_seed)
        try:
            post = sample_fn(data, spec, priors, inner_cfg)
        except (ConvergenceError, FloatingPointError) as exc:
            warnings.warn(f"iterate {k}: sampler failed ({exc})", RuntimeWarning)
            iterates.append(EBIterate(k, priors, -np.inf, np.nan, True))
            continue
        value = ell_estimate(post, priors) + cfg.gamma * entropy_penalty(post, data)
        flagged = not math.isfinite(value)
        grad = marginal_grad_estimate(post, priors)
        if cfg.gamma != 0.0:
            grad = combine_grads(
                grad, entropy_grad_estimate(post, priors, data), cfg.gamma
            )
        iterates.append(EBIterate(k, priors, value, grad_norm(grad), flagged))
        if not flagged and value > best_value:
            best_value = value
            best_index = k
        if k < cfg.horizon:
            priors = ascend(priors, grad, cfg.step_at(k))
    if best_index < 0:
        raise NumericalError("every tuning iterate failed or was flagged")
    trace = EBTrace(iterates=iterates, best_index=best_index)
    return iterates[best_index - 1].priors, trace
