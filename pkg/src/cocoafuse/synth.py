"""Synthetic regime-switching and smooth-transition data generators.

Both processes share the same conditional mean, a logistic interpolation
between two component means, but differ in how the regimes combine: the
switch draws each response from exactly one component, while the
transition mixes the component means through a Beta-distributed
coefficient whose concentration ``k`` spans the two behaviors (small k
approaches the switch, large k collapses onto the mean curve).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataio import Dataset

__all__ = [
    "XSpec",
    "SwitchConfig",
    "TransitionConfig",
    "gen_switch",
    "gen_transition",
    "conditional_mean_oracle",
    "train_test",
]


@dataclass(frozen=True)
class XSpec:
    """Covariate sampling distribution: uniform(low, high) or normal(mean, sd)."""

    kind: str = "uniform"
    a: float = -3.0
    b: float = 3.0

    def __post_init__(self):
        if self.kind not in ("uniform", "normal"):
            raise ValueError(f"unknown covariate distribution {self.kind!r}")
        if self.kind == "uniform" and not self.b > self.a:
            raise ValueError("uniform needs b > a")
        if self.kind == "normal" and not self.b > 0:
            raise ValueError("normal needs a positive sd")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=n)
        return rng.normal(self.a, self.b, size=n)

    def to_json(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class SwitchConfig:
    mu1: float = 3.0
    mu2: float = -3.0
    sigma: float = 0.25
    tau: float = 2.0
    n_train: int = 500
    n_test: int = 500
    x: XSpec = field(default_factory=XSpec)
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("need at least one train and one test row")

    def to_json(self) -> dict:
        return {
            "mu1": self.mu1,
            "mu2": self.mu2,
            "sigma": self.sigma,
            "tau": self.tau,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "x": self.x.to_json(),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SwitchConfig":
        obj = dict(obj)
        if "x" in obj:
            obj["x"] = XSpec(**obj["x"])
        return cls(**obj)


@dataclass(frozen=True)
class TransitionConfig(SwitchConfig):
    k: float = 5.0

    def __post_init__(self):
        super().__post_init__()
        if not self.k > 0:
            raise ValueError("Beta total count k must be positive")

    def to_json(self) -> dict:
        out = super().to_json()
        out["k"] = self.k
        return out


def selection_probability(x, cfg: SwitchConfig) -> np.ndarray:
    """Probability of the first component: logistic(tau * x)."""
    return expit(cfg.tau * np.asarray(x, dtype=float))


def conditional_mean_oracle(x, cfg: SwitchConfig):
    """Analytic E[Y | X = x], shared by both generators for every k."""
    p = selection_probability(x, cfg)
    return p * cfg.mu1 + (1.0 - p) * cfg.mu2


def gen_switch(cfg: SwitchConfig) -> Dataset:
    """Bernoulli-selected Gaussian draws.

    The first ``n_train`` rows are the training block; ``train_test``
    recovers the two halves. The latent selector is kept as the
    ``component`` column.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_train + cfg.n_test
    x = cfg.x.sample(rng, n)
    p = selection_probability(x, cfg)
    z = rng.random(n) < p
    y = rng.normal(np.where(z, cfg.mu1, cfg.mu2), cfg.sigma)
    return Dataset(
        columns={"x": x, "y": y, "component": z.astype(float)}, response="y"
    )


def gen_transition(cfg: TransitionConfig) -> Dataset:
    """Beta-weighted combination of the component means plus noise.

    alpha | x ~ Beta(k p(x), k (1 - p(x))) sampled via two Gamma draws,
    which stays well-behaved at the extreme shapes small k produces.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_train + cfg.n_test
    x = cfg.x.sample(rng, n)
    p = selection_probability(x, cfg)
    g1 = rng.gamma(shape=cfg.k * p)
    g2 = rng.gamma(shape=cfg.k * (1.0 - p))
    total = g1 + g2
    degenerate = total == 0.0  # both shapes underflowed; fall back to Bernoulli
    safe_total = np.where(degenerate, 1.0, total)
    alpha = np.where(degenerate, (rng.random(n) < p).astype(float), g1 / safe_total)
    y = rng.normal(cfg.mu1 * alpha + cfg.mu2 * (1.0 - alpha), cfg.sigma)
    return Dataset(columns={"x": x, "y": y, "alpha": alpha}, response="y")


def train_test(ds: Dataset, cfg: SwitchConfig) -> tuple[Dataset, Dataset]:
    """Split a generated dataset back into its train and test blocks."""
    idx = np.arange(ds.n_rows)
    return ds.subset(idx[: cfg.n_train]), ds.subset(idx[cfg.n_train :])


def save_config(cfg: SwitchConfig, path: str | Path):
    kind = "transition" if isinstance(cfg, TransitionConfig) else "switch"
    payload = {"kind": kind, "response": "y", **cfg.to_json()}
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
