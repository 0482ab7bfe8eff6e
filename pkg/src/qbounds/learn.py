"""Tabular Q-learning with bound clipping and bound-violation tracking.

Clipping modes:

* ``none``: plain Q-learning.
* ``hard``: each TD target is clipped into ``[lower, upper]`` before the update.
* ``soft``: the update of a violating entry gains a push of
  ``alpha * soft_weight`` toward the bound, capped at the violation. This is
  the subgradient step of an absolute-value penalty on the violation.
* ``test``: learning is untouched; greedy evaluation acts on the clipped table.
* ``soft_hard``: ``hard`` and ``soft`` together.

Hard modes also project the initial table into the bounds and re-project the
updated entry to absorb floating-point rounding, so the stored table never
leaves the allowed region.

The update is inherently sequential, so the inner loop is compiled with
numba. All randomness comes from numpy generators seeded per run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from qbounds.errors import ConfigError
from qbounds.mdp import TabularMdp

CLIP_MODES = ("none", "hard", "soft", "test", "soft_hard")
BV_ZERO = 1e-6


@dataclass(frozen=True, eq=False)
class ClipSpec:
    """Clipping mode, soft-penalty weight and the bound tables to enforce."""

    mode: str = "none"
    soft_weight: float = 1.0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mode not in CLIP_MODES:
            raise ConfigError(f"clip mode must be one of {CLIP_MODES}, got {self.mode!r}")
        if not (math.isfinite(self.soft_weight) and self.soft_weight >= 0):
            raise ConfigError(f"soft_weight must be finite and non-negative, got {self.soft_weight}")
        if self.mode != "none" and self.lower is None and self.upper is None:
            raise ConfigError(f"clip mode {self.mode!r} needs a lower or upper bound table")
        for name in ("lower", "upper"):
            t = getattr(self, name)
            if t is not None:
                t = np.array(t, dtype=float)
                t.setflags(write=False)
                object.__setattr__(self, name, t)
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise ConfigError("lower bound exceeds upper bound somewhere")

    @property
    def bound_side(self) -> str:
        if self.lower is not None and self.upper is not None:
            return "both"
        return "lower" if self.lower is not None else "upper" if self.upper is not None else "none"

    @property
    def hard(self) -> bool:
        return self.mode in ("hard", "soft_hard")

    @property
    def soft(self) -> bool:
        return self.mode in ("soft", "soft_hard")


@dataclass(frozen=True)
class LearnConfig:
    """Q-learning hyperparameters.

    Exploration is epsilon-greedy with epsilon decaying linearly from
    ``eps_start`` to ``eps_end`` over the first ``eps_decay_frac`` of the
    steps. The initial table is uniform on ``[init_low, init_high]`` except for
    terminal states, whose rows start at their (exact) immediate reward.
    With ``exploring_starts`` training episodes begin in a uniformly drawn
    non-terminal state; evaluation always starts from the MDP's initial
    distribution.
    """

    steps: int = 20_000
    alpha: float = 0.1
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.1
    eval_every: int = 500
    eval_episodes: int = 5
    episode_cap: int = 200
    init_low: float = 0.0
    init_high: float = 0.0
    exploring_starts: bool = False

    def __post_init__(self) -> None:
        checks = [
            (self.steps >= 1, "steps must be >= 1"),
            (0 < self.alpha <= 1, "alpha must lie in (0, 1]"),
            (0 <= self.eps_end <= 1 and 0 <= self.eps_start <= 1, "epsilon values must lie in [0, 1]"),
            (0 <= self.eps_decay_frac <= 1, "eps_decay_frac must lie in [0, 1]"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.eval_episodes >= 1, "eval_episodes must be >= 1"),
            (self.episode_cap >= 1, "episode_cap must be >= 1"),
            (math.isfinite(self.init_low) and math.isfinite(self.init_high) and self.init_low <= self.init_high,
             "init range must be finite with init_low <= init_high"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def epsilon(self, step: int) -> float:
        horizon = self.eps_decay_frac * self.steps
        if horizon <= 0 or step >= horizon:
            return self.eps_end
        return self.eps_start + (self.eps_end - self.eps_start) * step / horizon


@dataclass
class LearnTrace:
    """Evaluation curve, episode returns and final table of one learning run."""

    steps: list[int]
    eval_return_mean: list[float]
    eval_return_std: list[float]
    bv: list[float]
    episode_returns: list[float]
    q: np.ndarray
    seed: int
    mode: str
    hyper: dict = field(default_factory=dict)
    min_lower_margin: float = math.inf
    q_checksum: list[float] = field(default_factory=list)

    def steps_to_zero_bv(self, threshold: float = BV_ZERO) -> float:
        """First logged step from which BV stays at or below ``threshold``; ``inf`` if never."""
        first = math.inf
        for step, v in zip(self.steps, self.bv):
            if v > threshold:
                first = math.inf
            elif first == math.inf:
                first = step
        return first


def bound_violation(q: np.ndarray, lower: np.ndarray) -> float:
    """Mean over all cells of ``max(0, lower - q)``."""
    q, lower = np.asarray(q, dtype=float), np.asarray(lower, dtype=float)
    if q.shape != lower.shape:
        raise ConfigError(f"shape mismatch {q.shape} vs {lower.shape}")
    return float(np.mean(np.maximum(0.0, lower - q)))


@njit(cache=True)
def _train_chunk(Q, R, cum, term, start_cum, lo, hi, hard, soft, w, alpha, gamma, t0, eps_start, eps_end,
                 horizon, cap, u3, u_reset, istate, fstate, ep_out):
    """Run ``len(u3)`` learning steps in place; returns the number of finished episodes.

    ``istate = [state, episode_length]`` and ``fstate = [episode_return, min_lower_margin]``
    carry the learner across chunks.
    """
    A = Q.shape[1]
    s, ep_len = istate[0], istate[1]
    ep_ret, margin = fstate[0], fstate[1]
    n_done, k_reset = 0, 0
    for i in range(u3.shape[0]):
        t = t0 + i
        eps = eps_end if t >= horizon else eps_start + (eps_end - eps_start) * t / horizon
        if u3[i, 0] < eps:
            a = min(int(u3[i, 1] * A), A - 1)
        else:
            a = np.argmax(Q[s])
        s2 = np.searchsorted(cum[s, a], u3[i, 2], side="right")
        r = R[s, a]
        target = r if term[s2] else r + gamma * np.max(Q[s2])
        if hard:
            target = min(max(target, lo[s, a]), hi[s, a])
        q = Q[s, a]
        step = alpha * (target - q)
        if soft:
            if q < lo[s, a]:
                step += min(alpha * w, lo[s, a] - q)
            if q > hi[s, a]:
                step -= min(alpha * w, q - hi[s, a])
        q += step
        if hard:
            q = min(max(q, lo[s, a]), hi[s, a])
        Q[s, a] = q
        margin = min(margin, q - lo[s, a])
        ep_ret += r
        ep_len += 1
        if term[s2] or ep_len >= cap:
            ep_out[n_done] = ep_ret
            n_done += 1
            ep_ret, ep_len = 0.0, 0
            s = np.searchsorted(start_cum, u_reset[k_reset], side="right")
            k_reset += 1
        else:
            s = s2
    istate[0], istate[1] = s, ep_len
    fstate[0], fstate[1] = ep_ret, margin
    return n_done


@njit(cache=True)
def _greedy_returns(Q, R, cum, term, mu_cum, lo, hi, clip_rows, u):
    """Undiscounted returns of greedy rollouts; ``u`` has one row of uniforms per episode."""
    out = np.empty(u.shape[0])
    for e in range(u.shape[0]):
        s = np.searchsorted(mu_cum, u[e, 0], side="right")
        total = 0.0
        for k in range(1, u.shape[1]):
            if term[s]:
                break
            row = Q[s]
            if clip_rows:
                row = np.minimum(np.maximum(row, lo[s]), hi[s])
            a = np.argmax(row)
            total += R[s, a]
            s = np.searchsorted(cum[s, a], u[e, k], side="right")
        out[e] = total
    return out


def _cumulative(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return np.ascontiguousarray(c)


def q_learning(mdp: TabularMdp, clip: ClipSpec, cfg: LearnConfig = LearnConfig(), seed: int = 0) -> LearnTrace:
    """Epsilon-greedy tabular Q-learning on a single (unbatched) MDP.

    The seed is split into independent streams for initialization, training
    and evaluation, so evaluation never perturbs the learning trajectory.
    ``q_checksum`` records the sum of the stored table at every evaluation
    point, which makes trajectories cheap to compare.
    """
    if mdp.batch_shape:
        raise ConfigError("q_learning needs a single MDP, not a batch")
    S, A = mdp.n_states, mdp.n_actions
    lower = None if clip.lower is None else mdp.check_table(clip.lower, "lower")
    upper = None if clip.upper is None else mdp.check_table(clip.upper, "upper")
    init_ss, train_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)

    R = np.ascontiguousarray(mdp.reward)
    term = np.ascontiguousarray(mdp.terminal)
    Q = np.random.default_rng(init_ss).uniform(cfg.init_low, cfg.init_high, size=(S, A))
    Q[term] = R[term]
    lo = np.full((S, A), -np.inf) if lower is None else np.array(lower)
    hi = np.full((S, A), np.inf) if upper is None else np.array(upper)
    if clip.hard:
        Q = np.clip(Q, lo, hi)
    q0 = Q.copy()
    cum = _cumulative(mdp.transition)
    mu_cum = _cumulative(mdp.initial_dist)
    if cfg.exploring_starts:
        live = (~term).astype(float)
        start_cum = _cumulative(live / live.sum())
    else:
        start_cum = mu_cum
    gamma = float(mdp.gamma)
    train_rng = np.random.default_rng(train_ss)
    eval_rng = np.random.default_rng(eval_ss)

    trace = LearnTrace([], [], [], [], [], q0, seed, clip.mode, hyper=asdict(cfg))
    trace.hyper["soft_weight"] = clip.soft_weight
    test_clip = clip.mode == "test"

    def log(step: int) -> None:
        u = eval_rng.random((cfg.eval_episodes, cfg.episode_cap + 1))
        returns = _greedy_returns(Q, R, cum, term, mu_cum, lo, hi, test_clip, u)
        trace.steps.append(step)
        trace.eval_return_mean.append(float(np.mean(returns)))
        trace.eval_return_std.append(float(np.std(returns)))
        trace.bv.append(0.0 if lower is None else bound_violation(Q, lower))
        trace.q_checksum.append(float(Q.sum()))

    istate = np.array([np.searchsorted(start_cum, train_rng.random(), side="right"), 0])
    fstate = np.array([0.0, float(np.min(Q - lo))])
    horizon = cfg.eps_decay_frac * cfg.steps
    log(0)
    t = 0
    while t < cfg.steps:
        n = min(cfg.eval_every - t % cfg.eval_every, cfg.steps - t)
        u3 = train_rng.random((n, 3))
        u_reset = train_rng.random(n)
        ep_out = np.empty(n)
        done = _train_chunk(Q, R, cum, term, start_cum, lo, hi, clip.hard, clip.soft, clip.soft_weight,
                            cfg.alpha, gamma, t, cfg.eps_start, cfg.eps_end, horizon, cfg.episode_cap,
                            u3, u_reset, istate, fstate, ep_out)
        trace.episode_returns.extend(ep_out[:done].tolist())
        t += n
        if t % cfg.eval_every == 0:
            log(t)

    trace.q = Q
    trace.min_lower_margin = float(fstate[1])
    return trace
