"""Double-sided bounds on the optimal Q of a transformed task, and regret certificates.

Given primitive optimal tables ``Q^(1..M)`` and a target task whose reward is
``f(r^(1), ..., r^(M))``:

* convex-conditions: ``f(Q) <= Q~ <= f(Q) + C``
* concave-conditions: ``f(Q) - C^ <= Q~ <= f(Q)``

``C`` (``C^``) is the optimal value of a standard-RL task on the target
dynamics with reward ``r_C = r~ + gamma E V_f - f(Q)`` (its negation), in both
regimes. ``D`` (``D^``) is the value of the zero-shot policy ``pi_f`` on an
auxiliary reward and upper-bounds the regret ``Q~ - Q~^{pi_f}``.

All functions accept batched MDPs and tables with leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qbounds.errors import ClassificationError, NumericalError, PreconditionError, StructuralError
from qbounds.mdp import (
    DEFAULT_TOL,
    Policy,
    SoftConfig,
    TabularMdp,
    boltzmann_policy,
    evaluate_policy_soft,
    evaluate_policy_standard,
    greedy_policy,
    soft_value,
    solve_soft,
    solve_standard,
)
from qbounds.transfer import Classification, Regime, TransferFn, apply_transfer

SIGN_TOL = 1e-9


def _soft_cfg(regime: Regime, cfg: SoftConfig | None) -> SoftConfig | None:
    if regime is Regime.SOFT:
        return SoftConfig() if cfg is None else cfg
    return None


def solve(mdp: TabularMdp, regime: "str | Regime", cfg: SoftConfig | None = None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Optimal Q of ``mdp`` in the given regime."""
    regime = Regime.parse(regime)
    if regime is Regime.STANDARD:
        return solve_standard(mdp, tol)
    return solve_soft(mdp, _soft_cfg(regime, cfg), tol)


def evaluate_policy(mdp: TabularMdp, pi: Policy, regime: "str | Regime", cfg: SoftConfig | None = None,
                    tol: float = DEFAULT_TOL) -> np.ndarray:
    """Q of ``pi`` on ``mdp``: plain discounted value, or soft value with the KL charge."""
    regime = Regime.parse(regime)
    if regime is Regime.STANDARD:
        return evaluate_policy_standard(mdp, pi, tol)
    return evaluate_policy_soft(mdp, pi, _soft_cfg(regime, cfg), tol)


def _state_value(fq: np.ndarray, regime: Regime, cfg: SoftConfig | None) -> np.ndarray:
    if regime is Regime.STANDARD:
        return fq.max(axis=-1)
    return soft_value(fq, cfg)


def value_f(f: TransferFn, qs: Sequence[np.ndarray], regime: "str | Regime", cfg: SoftConfig | None = None) -> np.ndarray:
    """``V_f(s)``: max over actions of ``f(Q)`` (standard) or its soft value under the prior."""
    regime = Regime.parse(regime)
    return _state_value(apply_transfer(f, qs), regime, _soft_cfg(regime, cfg))


def zero_shot_policy(f: TransferFn, qs: Sequence[np.ndarray], regime: "str | Regime",
                     cfg: SoftConfig | None = None) -> Policy:
    """``pi_f``: greedy in ``f(Q)`` (standard) or Boltzmann in ``f(Q)`` against the prior (soft)."""
    regime = Regime.parse(regime)
    fq = apply_transfer(f, qs)
    if regime is Regime.STANDARD:
        return greedy_policy(fq)
    return boltzmann_policy(fq, _soft_cfg(regime, cfg))


def c_reward(mdp: TabularMdp, f: TransferFn, qs: Sequence[np.ndarray], regime: "str | Regime",
             cfg: SoftConfig | None = None) -> np.ndarray:
    """``r_C = r~ + gamma E_{s'} V_f(s') - f(Q)`` with ``r~`` the target task's reward."""
    regime = Regime.parse(regime)
    fq = mdp.check_table(apply_transfer(f, qs), "f(Q)")
    v = _state_value(fq, regime, _soft_cfg(regime, cfg))
    return mdp.reward + mdp.discount * mdp.expect_next(v) - fq


def _sign_tol(mdp: TabularMdp, f: TransferFn, tol: float) -> float:
    L = 1.0 if f.lipschitz_bound is None else max(1.0, f.lipschitz_bound)
    return max(SIGN_TOL, 4.0 * tol * L / (1.0 - mdp.gamma_max))


def _require(f: TransferFn, regime: Regime, upper: bool, classification: Classification | None) -> None:
    cls = f.classification(regime) if classification is None else Classification(classification)
    ok = cls.upper_bound if upper else cls.lower_bound
    if not ok:
        need = "concave-conditions" if upper else "convex-conditions"
        raise ClassificationError(f"{f.name} is {cls.value} in the {regime.value} regime; {need} required")


def _check_nonneg(table: np.ndarray, thr: float, what: str) -> None:
    worst = float(np.min(table)) if table.size else 0.0
    if worst < -thr:
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmin(table)), table.shape))
        raise NumericalError(f"{what} is {worst:.3e} at index {idx}; expected non-negative")


def compute_C(mdp: TabularMdp, f: TransferFn, qs: Sequence[np.ndarray], regime: "str | Regime",
              cfg: SoftConfig | None = None, tol: float = DEFAULT_TOL, *,
              classification: Classification | None = None, check_sign: bool = True) -> np.ndarray:
    """Width certificate of the lower bound: ``Q~ <= f(Q) + C``.

    ``r_C >= 0`` holds for exact primitive optima. Negative entries within the
    solver's rounding tolerance are set to zero and larger ones raise
    ``NumericalError``; ``check_sign=False`` (for estimated primitives) skips
    both steps.
    """
    regime = Regime.parse(regime)
    _require(f, regime, upper=False, classification=classification)
    r_c = c_reward(mdp, f, qs, regime, cfg)
    if check_sign:
        _check_nonneg(r_c, _sign_tol(mdp, f, tol), "r_C")
        r_c = np.maximum(r_c, 0.0)
    return solve_standard(mdp.with_reward(r_c), tol)


def compute_C_hat(mdp: TabularMdp, f: TransferFn, qs: Sequence[np.ndarray], regime: "str | Regime",
                  cfg: SoftConfig | None = None, tol: float = DEFAULT_TOL, *,
                  classification: Classification | None = None, check_sign: bool = True) -> np.ndarray:
    """Width certificate of the upper bound: ``f(Q) - C^ <= Q~``."""
    regime = Regime.parse(regime)
    _require(f, regime, upper=True, classification=classification)
    r_hat = -c_reward(mdp, f, qs, regime, cfg)
    if check_sign:
        _check_nonneg(r_hat, _sign_tol(mdp, f, tol), "r^_C")
        r_hat = np.maximum(r_hat, 0.0)
    return solve_standard(mdp.with_reward(r_hat), tol)


def _next_expectation(mdp: TabularMdp, per_state: np.ndarray) -> np.ndarray:
    return mdp.discount * mdp.expect_next(per_state)


def compute_D(mdp: TabularMdp, f: TransferFn, qs: Sequence[np.ndarray], C: np.ndarray, regime: "str | Regime",
              cfg: SoftConfig | None = None, tol: float = DEFAULT_TOL, *,
              variant: str = "plain", check_sign: bool = True) -> np.ndarray:
    """Regret certificate for the lower-bound case: ``Q~ - Q~^{pi_f} <= D``.

    ``D`` is the value of ``pi_f`` under reward
    ``gamma E_{s'} E_{a'~pi_f}[max_b (f(Q) + C)(s', b) - f(Q)(s', a')]`` (standard) or
    ``gamma E_{s'}[max_b (f(Q) + C)(s', b) - V_f(s')]`` (soft). The soft regime
    evaluates ``pi_f`` as a plain discounted sum by default; ``variant="soft"``
    also charges the KL term.
    """
    regime = Regime.parse(regime)
    cfg = _soft_cfg(regime, cfg)
    fq = mdp.check_table(apply_transfer(f, qs), "f(Q)")
    C = mdp.check_table(C, "C")
    pi = zero_shot_policy(f, qs, regime, cfg)
    top = (fq + C).max(axis=-1)
    if regime is Regime.STANDARD:
        r_d = _next_expectation(mdp, top - (pi.probs * fq).sum(axis=-1))
    else:
        r_d = _next_expectation(mdp, top - soft_value(fq, cfg))
    D = _evaluate_aux(mdp.with_reward(r_d), pi, regime, cfg, tol, variant)
    if check_sign:
        _check_nonneg(D, _sign_tol(mdp, f, tol), "D")
    return D


def compute_D_hat(mdp: TabularMdp, f: TransferFn, qs: Sequence[np.ndarray], C_hat: np.ndarray,
                  regime: "str | Regime", cfg: SoftConfig | None = None, tol: float = DEFAULT_TOL, *,
                  variant: str = "plain", check_sign: bool = True) -> np.ndarray:
    """Regret certificate for the upper-bound case: ``Q~ - Q~^{pi_f} <= D^``.

    ``D^`` is the value of ``pi_f`` under reward
    ``gamma E_{s'} E_{a'~pi_f}[V_f(s') - f(Q)(s', a') + C^(s', a')]`` (standard) or
    ``gamma E_{s'} E_{a'~pi_f} C^(s', a')`` (soft).
    """
    regime = Regime.parse(regime)
    cfg = _soft_cfg(regime, cfg)
    fq = mdp.check_table(apply_transfer(f, qs), "f(Q)")
    C_hat = mdp.check_table(C_hat, "C^")
    pi = zero_shot_policy(f, qs, regime, cfg)
    if regime is Regime.STANDARD:
        inner = fq.max(axis=-1)[..., None] - fq + C_hat
    else:
        inner = C_hat
    r_d = _next_expectation(mdp, (pi.probs * inner).sum(axis=-1))
    D_hat = _evaluate_aux(mdp.with_reward(r_d), pi, regime, cfg, tol, variant)
    if check_sign:
        _check_nonneg(D_hat, _sign_tol(mdp, f, tol), "D^")
    return D_hat


def _evaluate_aux(mdp: TabularMdp, pi: Policy, regime: Regime, cfg: SoftConfig | None, tol: float,
                  variant: str) -> np.ndarray:
    if variant not in ("plain", "soft"):
        raise StructuralError(f"variant must be 'plain' or 'soft', got {variant!r}")
    if variant == "soft" and regime is Regime.SOFT:
        return evaluate_policy_soft(mdp, pi, cfg, tol)
    return evaluate_policy_standard(mdp, pi, tol)


def crude_C_bound(r_c: np.ndarray, gamma: float | np.ndarray) -> float | np.ndarray:
    """Closed-form cap ``max_{s,a} r_C / (1 - gamma)`` (per batch member)."""
    r_c = np.asarray(r_c, dtype=float)
    out = r_c.max(axis=(-2, -1)) / (1.0 - np.asarray(gamma, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class EpsilonSpec:
    """Sup-norm error ``epsilon`` of the estimated primitive Qs and Lipschitz constant ``L`` of ``f``."""

    epsilon: float
    L: float

    def __post_init__(self) -> None:
        for name in ("epsilon", "L"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise StructuralError(f"{name} must be finite and non-negative, got {v}")
            object.__setattr__(self, name, v)


def epsilon_bounds(f: TransferFn, q_bars: Sequence[np.ndarray], eps: EpsilonSpec, C_bar: np.ndarray | None,
                   classification: "str | Classification", gamma: float | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bounds on ``Q~`` from estimates ``Q_bar`` with ``|Q_bar - Q|_inf <= epsilon``.

    ``C_bar`` is computed from ``Q_bar`` like ``C`` (or ``C^`` for the
    concave case). With ``L eps = L * epsilon`` and ``w = 2 L eps / (1 - gamma)``:

    * convex:  ``[f(Q_bar) - L eps, f(Q_bar) + C_bar + w]``
    * concave: ``[f(Q_bar) - C_bar - w, f(Q_bar) + L eps]``
    * both:    ``[f(Q_bar) - L eps, f(Q_bar) + L eps]``
    """
    if f.lipschitz_bound is None:
        raise PreconditionError(f"{f.name} has no Lipschitz bound")
    if eps.L < f.lipschitz_bound:
        raise PreconditionError(f"L={eps.L} is below the Lipschitz bound {f.lipschitz_bound} of {f.name}")
    cls = Classification(classification)
    fq = apply_transfer(f, q_bars)
    g = np.asarray(gamma, dtype=float)
    g = g[..., None, None] if g.ndim else g
    le = eps.L * eps.epsilon
    widen = 2.0 * le / (1.0 - g)
    if cls is Classification.BOTH:
        return fq - le, fq + le
    if C_bar is None:
        raise StructuralError("C_bar is required unless the classification is 'both'")
    if cls is Classification.CONVEX:
        return fq - le, fq + C_bar + widen
    if cls is Classification.CONCAVE:
        return fq - C_bar - widen, fq + le
    raise ClassificationError(f"no bounds for classification {cls.value}")


@dataclass(frozen=True)
class BoundCheck:
    passed: bool
    lower_violation: float
    upper_violation: float
    lower_witness: tuple[int, ...]
    upper_witness: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "lower_violation": self.lower_violation,
                "upper_violation": self.upper_violation, "lower_witness": list(self.lower_witness),
                "upper_witness": list(self.upper_witness)}


def verify_bounds(q_tilde: np.ndarray, lower: np.ndarray, upper: np.ndarray, tol: float = 1e-8) -> BoundCheck:
    """Check ``lower <= q_tilde <= upper``; witnesses index the worst cell on each side."""
    q, lo, hi = (np.asarray(a, dtype=float) for a in (q_tilde, lower, upper))
    if not q.shape == lo.shape == hi.shape:
        raise StructuralError(f"shape mismatch: {q.shape}, {lo.shape}, {hi.shape}")
    below, above = lo - q, q - hi
    i, j = int(np.argmax(below)), int(np.argmax(above))
    lv, uv = float(below.flat[i]), float(above.flat[j])
    return BoundCheck(lv <= tol and uv <= tol, lv, uv,
                      tuple(int(k) for k in np.unravel_index(i, q.shape)),
                      tuple(int(k) for k in np.unravel_index(j, q.shape)))


def _rows(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


@dataclass(frozen=True)
class BoundReport:
    """Bounds, certificates and zero-shot policy for one transformed task (or a batch)."""

    function: str
    regime: Regime
    classification: Classification
    lower: np.ndarray
    upper: np.ndarray
    aux_kind: str
    aux_C: np.ndarray
    regret_D: np.ndarray
    crude_C_bound: float | np.ndarray
    zero_shot: Policy
    gamma: float | np.ndarray
    beta: float | None
    tol: float
    clamped_cells: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def gap_mean(self) -> float:
        return float(np.mean(self.gap))

    @property
    def gap_max(self) -> float:
        return float(np.max(self.gap))

    def to_dict(self) -> dict:
        crude = self.crude_C_bound
        return {
            "function": self.function,
            "regime": self.regime.value,
            "classification": self.classification.value,
            "gamma": _rows(self.gamma) if np.ndim(self.gamma) else float(self.gamma),
            "beta": self.beta,
            "tol": self.tol,
            "gap_mean": self.gap_mean,
            "gap_max": self.gap_max,
            "crude_C_bound": _rows(crude) if np.ndim(crude) else float(crude),
            "clamped_cells": self.clamped_cells,
            "aux_kind": self.aux_kind,
            "lower": _rows(self.lower),
            "upper": _rows(self.upper),
            "aux_C": _rows(self.aux_C),
            "regret_D": _rows(self.regret_D),
            "zero_shot": _rows(self.zero_shot.probs),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def compute_bounds(mdp: TabularMdp, f: TransferFn, qs: Sequence[np.ndarray], regime: "str | Regime",
                   cfg: SoftConfig | None = None, tol: float = DEFAULT_TOL, *,
                   classification: "str | Classification | None" = None, variant: str = "plain",
                   meta: dict | None = None) -> BoundReport:
    """Full pipeline: certificates, bounds and the zero-shot policy for the target task ``mdp``.

    The convex path (``C``, ``D``) is used for ``convex-conditions`` and
    ``both``; the concave path (``C^``, ``D^``) for ``concave-conditions``.
    Cells where rounding makes ``lower > upper`` are set to the midpoint and
    counted in ``clamped_cells``.
    """
    regime = Regime.parse(regime)
    cfg = _soft_cfg(regime, cfg)
    cls = f.classification(regime) if classification is None else Classification(classification)
    fq = mdp.check_table(apply_transfer(f, qs), "f(Q)")
    r_c = c_reward(mdp, f, qs, regime, cfg)
    if cls.lower_bound:
        aux_kind = "C"
        aux = compute_C(mdp, f, qs, regime, cfg, tol, classification=cls)
        D = compute_D(mdp, f, qs, aux, regime, cfg, tol, variant=variant)
        lower, upper = fq, fq + aux
        crude = crude_C_bound(r_c, mdp.gamma)
    elif cls.upper_bound:
        aux_kind = "C_hat"
        aux = compute_C_hat(mdp, f, qs, regime, cfg, tol, classification=cls)
        D = compute_D_hat(mdp, f, qs, aux, regime, cfg, tol, variant=variant)
        lower, upper = fq - aux, fq
        crude = crude_C_bound(-r_c, mdp.gamma)
    else:
        raise ClassificationError(f"{f.name} is {cls.value} in the {regime.value} regime; no bounds apply")
    crossed = lower > upper
    if np.any(crossed):
        mid = (lower + upper) / 2
        lower, upper = np.where(crossed, mid, lower), np.where(crossed, mid, upper)
    return BoundReport(
        function=f.name, regime=regime, classification=cls, lower=lower, upper=upper,
        aux_kind=aux_kind, aux_C=aux, regret_D=D, crude_C_bound=crude,
        zero_shot=zero_shot_policy(f, qs, regime, cfg), gamma=mdp.gamma,
        beta=None if cfg is None else cfg.beta, tol=tol, clamped_cells=int(np.sum(crossed)),
        meta=dict(meta or {}),
    )
