"""Exact tabular MDPs: Bellman backups, value iteration and policy evaluation.

Every array may carry leading batch dimensions. A ``TabularMdp`` whose reward
has shape ``(B, S, A)`` and whose transition is either ``(S, A, S)`` or
``(B, S, A, S)`` describes ``B`` tasks that are solved together; all
operations broadcast over those dimensions. Q-tables are plain ``ndarray``
objects of shape ``(..., S, A)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np

from qbounds.errors import ConvergenceError, DomainError, NumericalError, StructuralError

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 1_000_000
ROW_SUM_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted ``log(sum(exp(z)))`` along ``axis``."""
    m = z.max(axis=axis, keepdims=True)
    out = np.log(np.exp(z - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP ``(P, r, gamma, terminal, mu)``.

    Terminal states contribute zero continuation value to every backup,
    whatever their stored transition rows hold.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float | np.ndarray
    terminal: np.ndarray | None = None
    initial_dist: np.ndarray | None = None

    def __post_init__(self) -> None:
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        if P.ndim < 3 or P.shape[-1] != P.shape[-3]:
            raise StructuralError(f"transition must have shape (..., S, A, S), got {P.shape}")
        S, A = P.shape[-3], P.shape[-2]
        if r.ndim < 2 or r.shape[-2:] != (S, A):
            raise StructuralError(f"reward must have shape (..., {S}, {A}), got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise StructuralError("rewards must be finite")
        if np.any(P < 0):
            raise StructuralError("transition probabilities must be non-negative")

        term = np.zeros(P.shape[:-3] + (S,), dtype=bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        if term.shape[-1:] != (S,):
            raise StructuralError(f"terminal mask must have shape (..., {S}), got {term.shape}")
        row_err, live = np.broadcast_arrays(np.abs(P.sum(axis=-1) - 1.0), ~term[..., :, None])
        if np.any(row_err[live] > ROW_SUM_TOL):
            raise StructuralError("transition rows of non-terminal states must sum to 1")

        g = np.asarray(self.gamma, dtype=float)
        if not np.all(np.isfinite(g)) or np.any(g <= 0) or np.any(g >= 1):
            raise StructuralError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")

        mu = np.full(S, 1.0 / S) if self.initial_dist is None else np.asarray(self.initial_dist, dtype=float)
        if mu.shape[-1:] != (S,) or np.any(mu < 0) or np.any(np.abs(mu.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
            raise StructuralError("initial_dist must be a probability vector over states")

        object.__setattr__(self, "transition", _frozen(P))
        object.__setattr__(self, "reward", _frozen(r))
        object.__setattr__(self, "gamma", float(g) if g.ndim == 0 else _frozen(g))
        t = term.copy()
        t.setflags(write=False)
        object.__setattr__(self, "terminal", t)
        object.__setattr__(self, "initial_dist", _frozen(mu))

    @property
    def n_states(self) -> int:
        return self.transition.shape[-3]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[-2]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(self.transition.shape[:-3], self.reward.shape[:-2], np.shape(self.gamma))

    @property
    def deterministic(self) -> bool:
        top, live = np.broadcast_arrays(self.transition.max(axis=-1), ~self.terminal[..., :, None])
        return bool(np.all(np.isclose(top[live], 1.0)))

    @cached_property
    def continuation(self) -> np.ndarray:
        """Transition tensor with terminal rows zeroed."""
        c = self.transition * (~self.terminal)[..., :, None, None]
        c.setflags(write=False)
        return c

    @cached_property
    def discount(self) -> np.ndarray | float:
        """``gamma`` shaped to broadcast against ``(..., S, A)`` tables."""
        if isinstance(self.gamma, float):
            return self.gamma
        return self.gamma[..., None, None]

    @property
    def gamma_max(self) -> float:
        return float(np.max(self.gamma))

    def expect_next(self, v: np.ndarray) -> np.ndarray:
        """``sum_{s'} P(s'|s,a) v(s')`` with zero continuation out of terminal states."""
        S, A = self.n_states, self.n_actions
        c = self.continuation
        flat = c.reshape(c.shape[:-3] + (S * A, S))
        out = flat @ np.asarray(v)[..., :, None]
        return out[..., 0].reshape(out.shape[:-2] + (S, A))

    def with_reward(self, reward: np.ndarray) -> "TabularMdp":
        return replace(self, reward=reward)

    def select(self, index) -> "TabularMdp":
        """Pick one member (or a sub-batch) out of a batched MDP."""
        batch = self.batch_shape
        P = np.broadcast_to(self.transition, batch + self.transition.shape[-3:])
        r = np.broadcast_to(self.reward, batch + self.reward.shape[-2:])
        g = np.broadcast_to(self.gamma, batch)
        t = np.broadcast_to(self.terminal, batch + self.terminal.shape[-1:])
        mu = np.broadcast_to(self.initial_dist, batch + self.initial_dist.shape[-1:])
        return TabularMdp(P[index], r[index], g[index], t[index], mu[index])

    def check_table(self, q: np.ndarray, name: str = "q") -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape[-2:] != (self.n_states, self.n_actions):
            raise StructuralError(
                f"{name} must have shape (..., {self.n_states}, {self.n_actions}), got {q.shape}"
            )
        return q


def stack_mdps(mdps: list[TabularMdp]) -> TabularMdp:
    """Batch same-sized MDPs along a new leading axis."""
    shapes = {(m.n_states, m.n_actions) for m in mdps}
    if len(shapes) != 1:
        raise StructuralError(f"cannot stack MDPs of different sizes: {sorted(shapes)}")
    return TabularMdp(
        np.stack([m.transition for m in mdps]),
        np.stack([m.reward for m in mdps]),
        np.array([m.gamma for m in mdps], dtype=float),
        np.stack([m.terminal for m in mdps]),
        np.stack([m.initial_dist for m in mdps]),
    )


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic action distribution of shape ``(..., S, A)``."""

    probs: np.ndarray
    kind: str = "custom"

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.ndim < 2:
            raise StructuralError(f"policy must have shape (..., S, A), got {p.shape}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
            raise StructuralError("policy rows must be probability distributions")
        if self.kind == "greedy" and not np.all((p == 0) | (p == 1)):
            raise StructuralError("greedy policy rows must be one-hot")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def n_actions(self) -> int:
        return self.probs.shape[-1]

    def actions(self) -> np.ndarray:
        """Most likely action per state (lowest index on ties)."""
        return self.probs.argmax(axis=-1)


@dataclass(frozen=True, eq=False)
class SoftConfig:
    """Inverse temperature and prior policy of entropy-regularized RL.

    ``prior=None`` means the uniform prior over actions.
    """

    beta: float = 1.0
    prior: np.ndarray | None = field(default=None)

    def __post_init__(self) -> None:
        b = float(self.beta)
        if not np.isfinite(b) or b <= 0:
            raise StructuralError(f"beta must be finite and positive, got {self.beta}")
        object.__setattr__(self, "beta", b)
        if self.prior is not None:
            p = self.prior.probs if isinstance(self.prior, Policy) else np.asarray(self.prior, dtype=float)
            if np.any(p <= 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
                raise StructuralError("prior rows must be strictly positive distributions")
            object.__setattr__(self, "prior", _frozen(p))

    def prior_probs(self, n_actions: int) -> np.ndarray:
        if self.prior is None:
            return np.full(n_actions, 1.0 / n_actions)
        if self.prior.shape[-1] != n_actions:
            raise StructuralError(f"prior has {self.prior.shape[-1]} actions, expected {n_actions}")
        return self.prior

    def log_prior(self, n_actions: int) -> np.ndarray:
        return np.log(self.prior_probs(n_actions))


def soft_value(q: np.ndarray, cfg: SoftConfig) -> np.ndarray:
    """``(1/beta) log E_{a ~ prior} exp(beta q(s, a))`` for every state."""
    q = np.asarray(q, dtype=float)
    return logsumexp(cfg.beta * q + cfg.log_prior(q.shape[-1]), axis=-1) / cfg.beta


def _raise_nonfinite(out: np.ndarray, what: str) -> None:
    bad = np.argwhere(~np.isfinite(out))
    idx = tuple(int(i) for i in bad[0])
    raise NumericalError(f"non-finite {what} at index {idx}")


def bellman_backup_standard(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    q = mdp.check_table(q)
    return mdp.reward + mdp.discount * mdp.expect_next(q.max(axis=-1))


def bellman_backup_soft(mdp: TabularMdp, q: np.ndarray, cfg: SoftConfig) -> np.ndarray:
    q = mdp.check_table(q)
    out = mdp.reward + mdp.discount * mdp.expect_next(soft_value(q, cfg))
    if not np.all(np.isfinite(out)):
        _raise_nonfinite(out, "soft backup")
    return out


class Solution(NamedTuple):
    q: np.ndarray
    iterations: int
    delta: float


def fixed_point(
    backup: Callable[[np.ndarray], np.ndarray],
    q0: np.ndarray,
    gamma: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> Solution:
    """Iterate a ``gamma``-contraction until successive iterates differ by less than ``tol``.

    The sup-norm step is checked to shrink by at least ``gamma`` every
    iteration (up to rounding); a larger step means the backup is not a
    contraction and raises ``NumericalError``.
    """
    if not tol > 0:
        raise StructuralError(f"tol must be positive, got {tol}")
    q = q0
    prev = np.inf
    for it in range(1, max_iter + 1):
        q_new = backup(q)
        delta = float(np.max(np.abs(q_new - q))) if q_new.size else 0.0
        if not np.isfinite(delta):
            _raise_nonfinite(q_new, "iterate")
        if delta > gamma * prev and delta > gamma * prev + 1e-12 * (1.0 + float(np.max(np.abs(q_new)))):
            raise NumericalError(f"iterate step {delta:.3e} grew past gamma * {prev:.3e} at iteration {it}")
        q = q_new
        if delta < tol:
            return Solution(q, it, delta)
        prev = delta
    raise ConvergenceError(f"no convergence to tol={tol} within {max_iter} iterations (last step {delta:.3e})")


def _zeros(mdp: TabularMdp) -> np.ndarray:
    return np.zeros(mdp.batch_shape + (mdp.n_states, mdp.n_actions))


def value_iteration_standard(mdp: TabularMdp, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> Solution:
    return fixed_point(lambda q: bellman_backup_standard(mdp, q), _zeros(mdp), mdp.gamma_max, tol, max_iter)


def value_iteration_soft(
    mdp: TabularMdp, cfg: SoftConfig, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> Solution:
    return fixed_point(lambda q: bellman_backup_soft(mdp, q, cfg), _zeros(mdp), mdp.gamma_max, tol, max_iter)


def solve_standard(mdp: TabularMdp, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Optimal Q of standard RL by value iteration from the zero table."""
    return value_iteration_standard(mdp, tol, max_iter).q


def solve_soft(
    mdp: TabularMdp, cfg: SoftConfig, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> np.ndarray:
    """Optimal soft Q of entropy-regularized RL by soft value iteration from the zero table."""
    return value_iteration_soft(mdp, cfg, tol, max_iter).q


def greedy_policy(q: np.ndarray) -> Policy:
    q = np.asarray(q, dtype=float)
    probs = np.zeros_like(q)
    np.put_along_axis(probs, q.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return Policy(probs, "greedy")


def boltzmann_policy(q: np.ndarray, cfg: SoftConfig) -> Policy:
    """``prior(a|s) exp(beta (q(s,a) - v(s)))`` with ``v`` the soft value of ``q``."""
    z = cfg.beta * np.asarray(q, dtype=float) + cfg.log_prior(np.shape(q)[-1])
    probs = np.exp(z - logsumexp(z, axis=-1)[..., None])
    probs /= probs.sum(axis=-1, keepdims=True)
    return Policy(probs, "boltzmann")


def _check_policy(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    p = pi.probs
    if p.shape[-2:] != (mdp.n_states, mdp.n_actions):
        raise StructuralError(f"policy shape {p.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")
    return p


def entropic_cost(pi: Policy, cfg: SoftConfig) -> np.ndarray:
    """Per-state ``(1/beta) KL(pi(.|s) || prior(.|s))``."""
    p = pi.probs
    prior = np.broadcast_to(cfg.prior_probs(p.shape[-1]), p.shape)
    if np.any((p > 0) & (prior == 0)):
        raise DomainError("policy places mass on actions the prior excludes")
    ratio = np.where(p > 0, p / np.where(prior > 0, prior, 1.0), 1.0)
    return (p * np.log(ratio)).sum(axis=-1) / cfg.beta


def evaluate_policy_standard(
    mdp: TabularMdp, pi: Policy, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> np.ndarray:
    """Q of a fixed policy: fixed point of ``r + gamma E_{s'} E_{a'~pi} Q``."""
    p = _check_policy(mdp, pi)

    def backup(q):
        return mdp.reward + mdp.discount * mdp.expect_next((p * q).sum(axis=-1))

    return fixed_point(backup, _zeros(mdp), mdp.gamma_max, tol, max_iter).q


def evaluate_policy_soft(
    mdp: TabularMdp, pi: Policy, cfg: SoftConfig, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> np.ndarray:
    """Soft Q of a fixed policy, charging ``(1/beta) log(pi/prior)`` at every successor state."""
    p = _check_policy(mdp, pi)
    cost = entropic_cost(pi, cfg)

    def backup(q):
        return mdp.reward + mdp.discount * mdp.expect_next((p * q).sum(axis=-1) - cost)

    return fixed_point(backup, _zeros(mdp), mdp.gamma_max, tol, max_iter).q
