"""Posterior sampling via adaptive Hamiltonian Monte Carlo.

Chains run independently on the unconstrained parameterization with a
leapfrog integrator, jittered trajectory lengths, dual-averaging step
size adaptation toward a target acceptance rate, and a diagonal mass
matrix estimated from the second half of warmup (a short tail window
re-tunes the step size under the new metric). Everything is driven by
per-chain RNG streams derived from the seed and chain index, so results
are bit-identical regardless of how many threads execute the chains.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .dataio import Dataset
from .density_core import log_sum_exp
from .errors import ConfigError, ConvergenceError
from .model import (
    ModelDims,
    ModelSpec,
    ParameterVector,
    PriorConfig,
    component_params,
    constrain,
    draw_from_prior,
    flatten_params,
    log_posterior_unconstrained,
    parameter_names,
    pointwise_loglik,
    unconstrain,
    unflatten_params,
)

__all__ = [
    "SamplerConfig",
    "PosteriorSample",
    "PredictiveDraws",
    "RawChains",
    "hmc_chains",
    "sample_posterior",
    "split_rhat",
    "posterior_predict",
    "credible_interval",
    "pointwise_loglik_matrix",
    "predictive_logpdf_grid",
    "save_posterior",
    "load_posterior",
]

DIVERGENCE_ENERGY = 1000.0
HARD_WARNING_DIVERGENCE_FRACTION = 0.10

Target = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ConfigError("need at least one chain")
        if self.warmup < 100:
            raise ConfigError("warmup must be at least 100 iterations")
        if self.samples < 100:
            raise ConfigError("need at least 100 kept iterations per chain")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target acceptance must lie in (0, 1)")
        if self.max_leapfrog < 1:
            raise ConfigError("max leapfrog steps must be positive")

    def to_json(self) -> dict:
        return {
            "chains": self.chains,
            "warmup": self.warmup,
            "samples": self.samples,
            "target_accept": self.target_accept,
            "max_leapfrog": self.max_leapfrog,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SamplerConfig":
        return cls(**obj)


# ---------------------------------------------------------------------------
# Core HMC on a generic log-density target
# ---------------------------------------------------------------------------


def _leapfrog(target: Target, z, p, grad, step, n_steps, inv_mass):
    """Leapfrog integration; returns (z, p, logp, grad) at the endpoint."""
    p = p + 0.5 * step * grad
    for i in range(n_steps):
        z = z + step * inv_mass * p
        logp, grad = target(z)
        if i < n_steps - 1:
            p = p + step * grad
    p = p + 0.5 * step * grad
    return z, p, logp, grad


def _kinetic(p, inv_mass) -> float:
    return 0.5 * float(np.dot(p * p, inv_mass))


@np.errstate(over="ignore", invalid="ignore")
def _initial_step_size(target: Target, z, logp, grad, inv_mass, rng) -> float:
    """Double/halve until single-step acceptance crosses one half."""
    step = 1.0
    p = rng.standard_normal(z.size) / np.sqrt(inv_mass)
    h0 = -logp + _kinetic(p, inv_mass)
    z1, p1, logp1, _ = _leapfrog(target, z, p, grad, step, 1, inv_mass)
    h1 = -logp1 + _kinetic(p1, inv_mass)
    log_accept = h0 - h1 if math.isfinite(h1) else -np.inf
    direction = 1.0 if log_accept > math.log(0.5) else -1.0
    for _ in range(50):
        step_next = step * 2.0**direction
        if not 1e-10 < step_next < 1e10:
            break
        z1, p1, logp1, _ = _leapfrog(target, z, p, grad, step_next, 1, inv_mass)
        h1 = -logp1 + _kinetic(p1, inv_mass)
        log_accept = h0 - h1 if math.isfinite(h1) else -np.inf
        if direction * log_accept <= direction * math.log(0.5):
            break
        step = step_next
    return step


class _DualAveraging:
    """Nesterov-style step size averaging toward the target acceptance."""

    def __init__(self, step0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.h_bar = 0.0
        self.log_step = math.log(step0)
        self.log_step_bar = math.log(step0)
        self.count = 0

    def update(self, accept_prob: float) -> float:
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        eta = self.count**-self.kappa
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def smoothed_step(self) -> float:
        return math.exp(self.log_step_bar)


@dataclass
class RawChains:
    """Unconstrained draws plus per-chain adaptation diagnostics."""

    draws: np.ndarray  # (C, S, D)
    accept_rate: np.ndarray  # (C,) mean accept probability, kept phase
    divergences: np.ndarray  # (C,) divergent transitions, kept phase
    step_sizes: np.ndarray  # (C,)
    inv_mass: np.ndarray  # (C, D)
    delta_h: np.ndarray  # (C, S) energy error per kept trajectory


@np.errstate(over="ignore", invalid="ignore")
def _run_chain(target: Target, z0: np.ndarray, cfg: SamplerConfig, rng) -> dict:
    dim = z0.size
    inv_mass = np.ones(dim)
    z = np.asarray(z0, dtype=float).copy()
    logp, grad = target(z)
    if not math.isfinite(logp):
        raise ConvergenceError("chain initialized at a point of zero density")

    step = _initial_step_size(target, z, logp, grad, inv_mass, rng)
    adapt = _DualAveraging(step, cfg.target_accept)

    # mass window: starts at half warmup; the tail after it re-tunes the
    # step size under the new metric (coarse doubling search, then dual
    # averaging again)
    half = cfg.warmup // 2
    tail = max(10, min(cfg.warmup // 3, cfg.warmup - half - 30))
    collect_end = cfg.warmup - tail
    collected: list[np.ndarray] = []

    def transition(step_size):
        nonlocal z, logp, grad
        n_steps = int(rng.integers(1, cfg.max_leapfrog + 1))
        p = rng.standard_normal(dim) / np.sqrt(inv_mass)
        h0 = -logp + _kinetic(p, inv_mass)
        z1, p1, logp1, grad1 = _leapfrog(target, z, p, grad, step_size, n_steps, inv_mass)
        h1 = -logp1 + _kinetic(p1, inv_mass)
        delta = h1 - h0
        divergent = not math.isfinite(delta) or abs(delta) > DIVERGENCE_ENERGY
        if divergent:
            return 0.0, True, np.inf
        accept_prob = min(1.0, math.exp(-delta))
        if rng.random() < accept_prob:
            z, logp, grad = z1, logp1, grad1
        return accept_prob, False, delta

    for it in range(cfg.warmup):
        accept_prob, _, _ = transition(step)
        step = adapt.update(accept_prob)
        if half <= it < collect_end:
            collected.append(z.copy())
        if it == collect_end - 1:
            draws = np.asarray(collected)
            n = draws.shape[0]
            var = draws.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
            # shrink toward a small constant so sticky dimensions stay usable
            inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            inv_mass = np.where(inv_mass > 0, inv_mass, 1.0)
            step0 = _initial_step_size(target, z, logp, grad, inv_mass, rng)
            adapt = _DualAveraging(step0, cfg.target_accept)
            step = step0

    step = adapt.smoothed_step
    draws = np.empty((cfg.samples, dim))
    delta_hs = np.empty(cfg.samples)
    accept_sum = 0.0
    divergences = 0
    for s in range(cfg.samples):
        accept_prob, divergent, delta = transition(step)
        divergences += int(divergent)
        accept_sum += accept_prob
        draws[s] = z
        delta_hs[s] = delta
    if divergences == cfg.samples:
        raise ConvergenceError("every kept transition diverged")
    return {
        "draws": draws,
        "accept_rate": accept_sum / cfg.samples,
        "divergences": divergences,
        "step_size": step,
        "inv_mass": inv_mass,
        "delta_h": delta_hs,
    }


def _n_workers(chains: int) -> int:
    cap = os.environ.get("COCOAFUSE_THREADS")
    if cap is not None:
        return max(1, min(chains, int(cap)))
    return max(1, min(chains, os.cpu_count() or 1))


def hmc_chains(
    target: Target, inits: list[np.ndarray], cfg: SamplerConfig
) -> RawChains:
    """Run one HMC chain per initial point and merge in chain order.

    ``target`` must return ``(log_density, gradient)`` and be safe to
    call concurrently. Chain c uses the RNG stream spawned from
    ``(cfg.seed, c)``, so the result does not depend on thread count.
    """
    if len(inits) != cfg.chains:
        raise ValueError(f"need {cfg.chains} initial points, got {len(inits)}")
    root = np.random.SeedSequence(cfg.seed)
    streams = root.spawn(cfg.chains)

    def run(c: int) -> dict:
        return _run_chain(target, inits[c], cfg, np.random.default_rng(streams[c]))

    workers = _n_workers(cfg.chains)
    if workers == 1:
        results = [run(c) for c in range(cfg.chains)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(cfg.chains)))
    return RawChains(
        draws=np.stack([r["draws"] for r in results]),
        accept_rate=np.array([r["accept_rate"] for r in results]),
        divergences=np.array([r["divergences"] for r in results]),
        step_sizes=np.array([r["step_size"] for r in results]),
        inv_mass=np.stack([r["inv_mass"] for r in results]),
        delta_h=np.stack([r["delta_h"] for r in results]),
    )


# ---------------------------------------------------------------------------
# Posterior sampling for the expert model
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSample:
    """Kept draws (constrained space) with pointwise log-likelihoods.

    ``draws`` is (chains, samples, n_free) in the flat parameter order
    of :func:`cocoafuse.model.flatten_params`; ``pointwise`` is
    (chains, samples, n_rows) with log p(y_n | x_n, theta).
    """

    draws: np.ndarray
    pointwise: np.ndarray
    spec: ModelSpec
    dims: ModelDims
    config: SamplerConfig
    divergences: np.ndarray
    accept_rate: np.ndarray
    step_sizes: np.ndarray
    inv_mass: np.ndarray
    parameter_names: list[str]
    hard_warning: bool = False

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    def stacked(self) -> np.ndarray:
        """All draws merged chain-major, shape (chains * samples, n_free)."""
        return self.draws.reshape(-1, self.draws.shape[-1])

    def loglik_matrix(self) -> np.ndarray:
        """Pointwise log-likelihoods merged chain-major, (S_total, N)."""
        return self.pointwise.reshape(-1, self.pointwise.shape[-1])

    def parameter(self, index: int) -> ParameterVector:
        return unflatten_params(self.stacked()[index], self.spec, self.dims)

    def iter_parameters(self):
        for row in self.stacked():
            yield unflatten_params(row, self.spec, self.dims)

    def rhat_table(self) -> dict[str, float]:
        """Rank-normalized split R-hat per free parameter (NaN for a
        single chain, where the diagnostic is undefined)."""
        out = {}
        for j, name in enumerate(self.parameter_names):
            if self.n_chains < 2:
                out[name] = float("nan")
            else:
                out[name] = split_rhat(self.draws[:, :, j])
        return out


def sample_posterior(
    data: Dataset, spec: ModelSpec, priors: PriorConfig, cfg: SamplerConfig
) -> PosteriorSample:
    """Posterior draws for the expert model on ``data``.

    Chains start from independent prior draws (mapped to unconstrained
    space and jittered), warm up with step-size and mass adaptation,
    and keep ``cfg.samples`` draws each. A chain with more than 10%
    divergent kept transitions raises the hard warning flag; a fully
    divergent chain is an error.
    """
    dims = ModelDims.from_dataset(spec, data)

    def target(z: np.ndarray):
        return log_posterior_unconstrained(z, data, priors, spec, dims)

    root = np.random.SeedSequence(cfg.seed)
    init_streams = root.spawn(2 * cfg.chains)[cfg.chains :]  # distinct from chain streams
    inits = []
    for c in range(cfg.chains):
        rng = np.random.default_rng(init_streams[c])
        pv = draw_from_prior(priors, spec, dims, rng)
        z0 = unconstrain(pv, spec) + rng.normal(0.0, 0.1, size=dims.n_free(spec))
        inits.append(z0)

    raw = hmc_chains(target, inits, cfg)

    n_free = dims.n_free(spec)
    constrained = np.empty((cfg.chains, cfg.samples, n_free))
    pointwise = np.empty((cfg.chains, cfg.samples, data.n_rows))
    for c in range(cfg.chains):
        for s in range(cfg.samples):
            pv, _ = constrain(raw.draws[c, s], spec, dims)
            constrained[c, s] = flatten_params(pv, spec)
            pointwise[c, s] = pointwise_loglik(pv, data, spec)

    hard = bool(
        np.any(raw.divergences > HARD_WARNING_DIVERGENCE_FRACTION * cfg.samples)
    )
    if hard:
        warnings.warn(
            "more than 10% divergent transitions in at least one chain; "
            "treat this posterior as unreliable",
            RuntimeWarning,
        )
    return PosteriorSample(
        draws=constrained,
        pointwise=pointwise,
        spec=spec,
        dims=dims,
        config=cfg,
        divergences=raw.divergences,
        accept_rate=raw.accept_rate,
        step_sizes=raw.step_sizes,
        inv_mass=raw.inv_mass,
        parameter_names=parameter_names(spec, data),
        hard_warning=hard,
    )


# ---------------------------------------------------------------------------
# Convergence diagnostic
# ---------------------------------------------------------------------------


def split_rhat(chains: np.ndarray) -> float:
    """Rank-normalized split R-hat of one scalar quantity.

    Each chain is split in half (so at least four segments), the pooled
    draws are rank-normalized (average ranks mapped through the normal
    quantile function), and the classical between/within variance ratio
    is computed on the normalized segments. A constant input returns
    1.0 by convention with a warning.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a (chains, draws) array with at least two chains")
    half = x.shape[1] // 2
    if half < 2:
        raise ValueError("chains too short to split")
    segments = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    if np.all(segments == segments.flat[0]):
        warnings.warn("split_rhat of a constant series", RuntimeWarning)
        return 1.0
    k, length = segments.shape
    ranks = rankdata(segments, method="average").reshape(k, length)
    z = ndtri((ranks - 0.375) / (segments.size + 0.25))
    seg_means = z.mean(axis=1)
    between = length * seg_means.var(ddof=1)
    within = z.var(axis=1, ddof=1).mean()
    if within == 0.0:
        return np.inf
    var_plus = (length - 1) / length * within + between / length
    return max(1.0, math.sqrt(var_plus / within))


# ---------------------------------------------------------------------------
# Posterior prediction
# ---------------------------------------------------------------------------


@dataclass
class PredictiveDraws:
    """Per-row response draws, one per posterior draw used.

    ``y`` has shape (rows, draws); the conditional-density parameter
    sets per draw are kept alongside when requested.
    """

    y: np.ndarray
    comp_means: np.ndarray | None = None  # (rows, draws, M)
    comp_sigmas: np.ndarray | None = None
    comp_weights: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.y.shape[1]

    def means(self) -> np.ndarray:
        return self.y.mean(axis=1)

    def intervals(self, level: float = 0.95) -> np.ndarray:
        """Equal-tailed credible interval per row, shape (rows, 2)."""
        lo = (1.0 - level) / 2.0
        return np.quantile(self.y, [lo, 1.0 - lo], axis=1).T


def posterior_predict(
    post: PosteriorSample,
    data: Dataset,
    seed: int,
    store_components: bool = True,
) -> PredictiveDraws:
    """One response draw per (query row, posterior draw).

    Mixture and fusion modes first draw the latent expert from the gate
    weights, then the response from that (possibly fused) expert; blend
    mode draws from the collapsed Gaussian directly.
    """
    if post.n_draws == 0:
        raise ValueError("empty posterior")
    U, G, B = data.expert_design, data.gate_design, data.behavior_design
    n = U.shape[0]
    s_total = post.n_draws
    mode = post.spec.mode
    m = 1 if mode == "blend" else post.dims.n_experts
    rng = np.random.default_rng(seed)

    y = np.empty((n, s_total))
    means = sigmas = weights = None
    if store_components:
        means = np.empty((n, s_total, m))
        sigmas = np.empty((n, s_total, m))
        weights = np.empty((n, s_total, m))

    for s, pv in enumerate(post.iter_parameters()):
        mu, sig, w = component_params(pv, U, G, B, mode)
        if m == 1:
            picked_mu, picked_sig = mu[:, 0], sig[:, 0]
        else:
            u = rng.random(n)
            idx = (u[:, None] > np.cumsum(w, axis=1)).sum(axis=1)
            idx = np.minimum(idx, m - 1)
            rows = np.arange(n)
            picked_mu, picked_sig = mu[rows, idx], sig[rows, idx]
        y[:, s] = rng.normal(picked_mu, picked_sig)
        if store_components:
            means[:, s, :] = mu
            sigmas[:, s, :] = sig
            weights[:, s, :] = w
    return PredictiveDraws(y=y, comp_means=means, comp_sigmas=sigmas, comp_weights=weights)


def credible_interval(draws: np.ndarray, level: float) -> tuple[float, float]:
    """Equal-tailed empirical interval from at least 100 draws."""
    draws = np.asarray(draws, dtype=float)
    if draws.size < 100:
        raise ValueError(f"need at least 100 draws, got {draws.size}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    lo = (1.0 - level) / 2.0
    qs = np.quantile(draws, [lo, 1.0 - lo])
    return float(qs[0]), float(qs[1])


def pointwise_loglik_matrix(post: PosteriorSample, data: Dataset) -> np.ndarray:
    """log p(y_n | x_n, theta_s) on new data, shape (S_total, N)."""
    out = np.empty((post.n_draws, data.n_rows))
    for s, pv in enumerate(post.iter_parameters()):
        out[s] = pointwise_loglik(pv, data, post.spec)
    return out


def predictive_logpdf_grid(
    post: PosteriorSample, data: Dataset, y_grid: np.ndarray
) -> np.ndarray:
    """Posterior predictive log density on a response grid.

    Returns (n_rows, len(y_grid)); entry (i, j) is
    log mean_s p(y_grid[j] | x_i, theta_s).
    """
    y_grid = np.asarray(y_grid, dtype=float)
    accum = np.full((post.n_draws, data.n_rows, y_grid.size), np.nan)
    for s, pv in enumerate(post.iter_parameters()):
        mu, sig, w = component_params(
            pv, data.expert_design, data.gate_design, data.behavior_design, post.spec.mode
        )
        # (rows, grid, M) component log densities
        z = (y_grid[None, :, None] - mu[:, None, :]) / sig[:, None, :]
        comp = -0.5 * z * z - np.log(sig[:, None, :]) - 0.5 * math.log(2.0 * math.pi)
        with np.errstate(divide="ignore"):
            lw = np.log(w[:, None, :])
        accum[s] = log_sum_exp(comp + lw, axis=2)
    return log_sum_exp(accum, axis=0) - math.log(post.n_draws)


# ---------------------------------------------------------------------------
# Serialization: JSON header plus CSV matrices
# ---------------------------------------------------------------------------


def save_posterior(post: PosteriorSample, out_dir: str | Path):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "spec": post.spec.to_json(),
        "dims": {
            "n_experts": post.dims.n_experts,
            "p_expert": post.dims.p_expert,
            "q_gate": post.dims.q_gate,
            "q_behavior": post.dims.q_behavior,
        },
        "config": post.config.to_json(),
        "parameter_names": post.parameter_names,
        "diagnostics": {
            "divergences": post.divergences.tolist(),
            "accept_rate": post.accept_rate.tolist(),
            "step_sizes": post.step_sizes.tolist(),
            "inv_mass": post.inv_mass.tolist(),
            "hard_warning": post.hard_warning,
        },
    }
    (out_dir / "header.json").write_text(json.dumps(header, indent=2), encoding="utf-8")
    _write_matrix_csv(
        out_dir / "draws.csv", post.draws, ["chain", "draw"] + post.parameter_names
    )
    n = post.pointwise.shape[-1]
    _write_matrix_csv(
        out_dir / "pointwise_loglik.csv",
        post.pointwise,
        ["chain", "draw"] + [f"ll_{i}" for i in range(n)],
    )


def load_posterior(in_dir: str | Path) -> PosteriorSample:
    in_dir = Path(in_dir)
    header = json.loads((in_dir / "header.json").read_text(encoding="utf-8"))
    spec = ModelSpec.from_json(header["spec"])
    dims = ModelDims(**header["dims"])
    cfg = SamplerConfig.from_json(header["config"])
    diag = header["diagnostics"]
    draws = _read_matrix_csv(in_dir / "draws.csv", cfg.chains, cfg.samples)
    pointwise = _read_matrix_csv(in_dir / "pointwise_loglik.csv", cfg.chains, cfg.samples)
    return PosteriorSample(
        draws=draws,
        pointwise=pointwise,
        spec=spec,
        dims=dims,
        config=cfg,
        divergences=np.asarray(diag["divergences"]),
        accept_rate=np.asarray(diag["accept_rate"]),
        step_sizes=np.asarray(diag["step_sizes"]),
        inv_mass=np.asarray(diag["inv_mass"]),
        parameter_names=header["parameter_names"],
        hard_warning=diag["hard_warning"],
    )


def _write_matrix_csv(path: Path, tensor: np.ndarray, header: list[str]):
    c, s, _ = tensor.shape
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ci in range(c):
            for si in range(s):
                writer.writerow([ci, si] + [repr(float(v)) for v in tensor[ci, si]])


def _read_matrix_csv(path: Path, chains: int, samples: int) -> np.ndarray:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        width = len(header) - 2
        out = np.empty((chains, samples, width))
        for row in reader:
            ci, si = int(row[0]), int(row[1])
            out[ci, si] = [float(v) for v in row[2:]]
    return out
