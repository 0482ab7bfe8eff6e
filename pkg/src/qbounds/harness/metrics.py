"""Policy divergence, summary statistics and metric rows of the sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qbounds.errors import DomainError
from qbounds.mdp import Policy

CI_Z = 1.96


def _probs(pi) -> np.ndarray:
    return pi.probs if isinstance(pi, Policy) else np.asarray(pi, dtype=float)


def kl_per_state(pi, pi_f) -> np.ndarray:
    """``sum_a pi(a|s) log(pi(a|s) / pi_f(a|s))`` for every state."""
    p, q = _probs(pi), _probs(pi_f)
    if p.shape != q.shape:
        raise DomainError(f"policy shapes differ: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise DomainError("pi_f assigns zero probability to an action pi uses; the divergence is infinite")
    ratio = np.where(support, p / np.where(q > 0, q, 1.0), 1.0)
    return (p * np.log(ratio)).sum(axis=-1)


def kl_policy_divergence(pi, pi_f) -> float | np.ndarray:
    """Mean over states of ``KL(pi(.|s) || pi_f(.|s))`` (one value per batch member)."""
    out = kl_per_state(pi, pi_f).mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mean_ci(values, z: float = CI_Z) -> tuple[float, float, float]:
    """Mean with the normal-approximation interval ``mean -/+ z * std / sqrt(n)``."""
    v = np.asarray(values, dtype=float)
    m = float(np.mean(v))
    half = z * float(np.std(v)) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return m, m - half, m + half


@dataclass(frozen=True)
class MetricRow:
    """Bound quality at one sweep point.

    ``mean_gap`` averages ``Q~ - f(Q)`` (convex side) or ``f(Q) - Q~``
    (concave side). ``mean_kl`` is ``None`` for standard RL, where the
    optimal policy is greedy and the divergence is undefined.
    """

    sweep_value: float
    beta: float | None
    mean_kl: float | None
    kl_std: float | None
    mean_gap: float
    gap_std: float
    trials: int
    min_gap: float

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.gap_std < 0 or (self.kl_std is not None and self.kl_std < 0):
            raise ValueError("standard deviations must be non-negative")

    HEADER = ("sweep_value", "beta", "mean_kl", "kl_std", "mean_gap", "gap_std", "min_gap", "trials")

    def as_row(self) -> tuple:
        beta = "inf" if self.beta is None else self.beta
        return (self.sweep_value, beta, self.mean_kl, self.kl_std, self.mean_gap, self.gap_std,
                self.min_gap, self.trials)
