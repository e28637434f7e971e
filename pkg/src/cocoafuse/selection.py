"""Complexity-aware model selection over fitted trials.

Trials carry a performance metric (PSIS-LOO by convention) with its
standard error plus two complexity counts. Selection walks the Pareto
front from simplest to most complex and only replaces the incumbent
when a pessimistic (one-sided Chebyshev) lower bound on the probability
of improvement clears a threshold, trading expected performance against
complexity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import ConfigError

__all__ = [
    "Trial",
    "pareto_front",
    "improvement_lower_bound",
    "select",
    "select_with_log",
    "trials_from_manifest",
]


@dataclass(frozen=True)
class Trial:
    id: str
    metric: float
    metric_se: float
    n_experts: int
    n_params: int

    def __post_init__(self):
        if self.metric_se < 0:
            raise ValueError("metric standard error must be nonnegative")
        if self.n_experts < 1 or self.n_params < 1:
            raise ValueError("complexity counts must be at least 1")


def _dominates(a: Trial, b: Trial) -> bool:
    """a is at least as good everywhere (higher metric, lower counts)
    and strictly better somewhere."""
    at_least = (
        a.metric >= b.metric
        and a.n_experts <= b.n_experts
        and a.n_params <= b.n_params
    )
    strict = (
        a.metric > b.metric or a.n_experts < b.n_experts or a.n_params < b.n_params
    )
    return at_least and strict


def pareto_front(trials: Sequence[Trial]) -> list[Trial]:
    """Trials not dominated under (max metric, min experts, min params)."""
    if not trials:
        raise ValueError("no trials")
    return [t for t in trials if not any(_dominates(o, t) for o in trials if o is not t)]


def improvement_lower_bound(candidate: Trial, incumbent: Trial) -> float:
    """Pessimistic probability that the candidate truly beats the incumbent.

    One-sided Chebyshev (Cantelli) bound under independence, with means
    and standard deviations taken from the trial metrics: for a mean
    gap mu > 0 and combined variance s2 the bound is mu^2 / (mu^2 + s2).
    Returns 0 when the candidate's mean is no better.
    """
    mu = candidate.metric - incumbent.metric
    if mu <= 0.0:
        return 0.0
    s2 = candidate.metric_se**2 + incumbent.metric_se**2
    if s2 == 0.0:
        return 1.0 - 1e-12
    return mu * mu / (mu * mu + s2)


def select_with_log(
    trials: Sequence[Trial], tau: float = 0.5
) -> tuple[Trial, list[dict]]:
    """Walk the Pareto front in complexity order; keep the visit log.

    The first (simplest) front member is the initial incumbent; each
    later member replaces it only when ``improvement_lower_bound``
    exceeds ``tau``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    front = sorted(pareto_front(trials), key=lambda t: (t.n_experts, t.n_params, t.id))
    incumbent = front[0]
    log = [
        {
            "id": incumbent.id,
            "bound": None,
            "accepted": True,
            "incumbent": incumbent.id,
        }
    ]
    for trial in front[1:]:
        bound = improvement_lower_bound(trial, incumbent)
        accepted = bound > tau
        if accepted:
            incumbent = trial
        log.append(
            {
                "id": trial.id,
                "bound": bound,
                "accepted": accepted,
                "incumbent": incumbent.id,
            }
        )
    return incumbent, log


def select(trials: Sequence[Trial], tau: float = 0.5) -> Trial:
    best, _ = select_with_log(trials, tau)
    return best


def trials_from_manifest(path: str | Path) -> list[Trial]:
    """Read trials from a JSON list or a CSV with the trial fields."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text(encoding="utf-8"))
    else:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    trials = []
    for row in rows:
        try:
            trials.append(
                Trial(
                    id=str(row["id"]),
                    metric=float(row["metric"]),
                    metric_se=float(row["metric_se"]),
                    n_experts=int(row["n_experts"]),
                    n_params=int(row["n_params"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad trial row {row!r}: {exc}") from None
    if not trials:
        raise ConfigError(f"{path}: no trials in manifest")
    return trials
