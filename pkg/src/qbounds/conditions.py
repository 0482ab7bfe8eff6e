"""Numerical certification of the convex and concave condition sets.

For a transfer function ``F`` on a box of Q-values the convex set asks for

1. convexity: ``F((x+y)/2) <= (F(x)+F(y))/2``
2. subadditivity: ``F(x+y) <= F(x) + F(y)``
3. discount scaling: ``F(gamma x) <= gamma F(x)``
4. exchange with the state value: ``F(V(Q)) <= V(F(Q))``, where ``V`` is the
   max over actions (standard) or the prior-weighted soft maximum (soft)

and the concave set asks for the mirrored inequalities. Vector arguments are
tested jointly, ``F(x+y)`` against ``F(x)+F(y)`` with ``x, y`` in ``R^M``.

Each inequality is evaluated on a regular grid plus seeded random samples.
An inequality holds when its worst violation is at most
``tol * (1 + |terms|)``. A passing check is evidence, not proof.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from qbounds.errors import StructuralError
from qbounds.mdp import SoftConfig, logsumexp
from qbounds.transfer import Classification, Regime, TransferFn

DEFAULT_CHECK_TOL = 1e-9
GRID_CAP = 65_536

CONVEX_SET = ("convexity", "subadditivity", "gamma_sublinearity", "value_exchange_convex")
CONCAVE_SET = ("concavity", "superadditivity", "gamma_superlinearity", "value_exchange_concave")
SHAPE_CONDITIONS = ("convexity", "concavity")


@dataclass(frozen=True)
class DomainBox:
    """Product of closed intervals ``[lo_k, hi_k]`` plus sampling metadata.

    ``gamma`` is the discount used by the scaling test and ``n_actions`` the
    width of the pseudo-Q rows used by the exchange test. ``deterministic``
    marks boxes certified for deterministic dynamics, where the
    convexity/concavity verdict does not enter the classification.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    sample_count: int = 64
    n_random: int = 10_000
    seed: int = 0
    gamma: float = 0.9
    n_actions: int = 4
    deterministic: bool = False

    def __post_init__(self) -> None:
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or not lo:
            raise StructuralError("lo and hi must have the same positive length")
        if not all(np.isfinite(a) and np.isfinite(b) and a <= b for a, b in zip(lo, hi)):
            raise StructuralError(f"box needs finite lo <= hi, got lo={lo}, hi={hi}")
        if self.sample_count < 2:
            raise StructuralError("sample_count must be at least 2")
        if self.n_random < 0 or self.n_actions < 1:
            raise StructuralError("n_random must be >= 0 and n_actions >= 1")
        if not 0 < self.gamma < 1:
            raise StructuralError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, arity: int, lo: float = -20.0, hi: float = 0.0, **kwargs) -> "DomainBox":
        return cls((lo,) * arity, (hi,) * arity, **kwargs)

    @property
    def arity(self) -> int:
        return len(self.lo)

    def to_dict(self) -> dict:
        return {
            "lo": list(self.lo), "hi": list(self.hi), "sample_count": self.sample_count,
            "n_random": self.n_random, "seed": self.seed, "gamma": self.gamma,
            "n_actions": self.n_actions, "deterministic": self.deterministic,
        }

    def grid(self) -> np.ndarray:
        """Regular grid of shape ``(n, M)``, capped at about ``GRID_CAP`` points."""
        per_axis = max(2, min(self.sample_count, int(math.floor(GRID_CAP ** (1.0 / self.arity) + 1e-9))))
        axes = [np.linspace(a, b, per_axis) for a, b in zip(self.lo, self.hi)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.arity)

    def random(self, rng: np.random.Generator, size: tuple[int, ...]) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=size + (self.arity,))


@dataclass(frozen=True)
class ConditionVerdict:
    """Outcome of one inequality: ``worst_violation`` is ``max(lhs - rhs)``."""

    name: str
    holds: bool
    worst_violation: float
    witness: dict
    excluded: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "holds": self.holds, "worst_violation": self.worst_violation,
                "excluded": self.excluded, "witness": self.witness}


@dataclass(frozen=True)
class ConditionReport:
    function: str
    regime: Regime
    classification: Classification
    verdicts: dict[str, ConditionVerdict]
    box: DomainBox
    beta: float | None = None
    tol: float = DEFAULT_CHECK_TOL
    notes: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "function": self.function,
            "regime": self.regime.value,
            "classification": self.classification.value,
            "beta": self.beta,
            "tol": self.tol,
            "box": self.box.to_dict(),
            "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()},
            "notes": list(self.notes),
        }


def _verdict(name: str, lhs: np.ndarray, rhs: np.ndarray, tol: float, witness: Callable[[int], dict]) -> ConditionVerdict:
    """Verdict for ``lhs <= rhs`` over flattened samples."""
    gap = lhs - rhs
    bad = ~np.isfinite(gap)
    scale = 1.0 + np.maximum(np.abs(lhs), np.abs(rhs))
    rel = np.where(bad, np.inf, gap / np.where(bad, 1.0, scale))
    i = int(np.argmax(rel))
    holds = bool(rel[i] <= tol)
    worst = float(gap[i]) if np.isfinite(gap[i]) else float("inf")
    return ConditionVerdict(name, holds, worst, witness(i))


def _as_list(a: np.ndarray) -> list[float]:
    return [float(v) for v in np.ravel(a)]


def _pairs(box: DomainBox, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    grid = box.grid()
    rand = box.random(rng, (box.n_random,))
    xs = [grid, rand]
    ys = [grid[rng.permutation(len(grid))], box.random(rng, (box.n_random,))]
    if box.arity == 1 and len(grid) <= 256:
        a, b = np.meshgrid(np.arange(len(grid)), np.arange(len(grid)), indexing="ij")
        xs.append(grid[a.ravel()])
        ys.append(grid[b.ravel()])
    return np.concatenate(xs), np.concatenate(ys)


def _pseudo_q(box: DomainBox, rng: np.random.Generator) -> np.ndarray:
    """Pseudo-Q rows of shape ``(N, n_actions, M)``: uniform draws plus box corners."""
    n = max(box.n_random, 1)
    rows = box.random(rng, (n, box.n_actions))
    lo, hi = np.array(box.lo), np.array(box.hi)
    pick = rng.integers(0, 2, size=(n // 4, box.n_actions, box.arity)).astype(bool)
    corners = np.where(pick, hi, lo)
    return np.concatenate([rows, corners])


def check_conditions(
    f: TransferFn,
    box: DomainBox,
    regime: "str | Regime",
    cfg: SoftConfig | None = None,
    tol: float = DEFAULT_CHECK_TOL,
) -> ConditionReport:
    """Test both condition sets for ``f`` on ``box`` and classify it.

    The result is ``both`` only if every inequality of both sets holds.
    Violations are reported as data, never raised.
    """
    regime = Regime.parse(regime)
    if box.arity != f.arity:
        raise StructuralError(f"box has {box.arity} axes but {f.name} takes {f.arity} argument(s)")
    if regime is Regime.SOFT and cfg is None:
        cfg = SoftConfig()
    pair_seq, row_seq = np.random.SeedSequence(box.seed).spawn(2)
    x, y = _pairs(box, np.random.default_rng(pair_seq))
    rows = _pseudo_q(box, np.random.default_rng(row_seq))

    def F(z: np.ndarray) -> np.ndarray:
        return np.asarray(f(*np.moveaxis(z, -1, 0)), dtype=float)

    g = box.gamma
    fx, fy = F(x), F(y)
    mid, fsum = F((x + y) / 2), F(x + y)
    fg = F(g * x)

    def pair_witness(i: int) -> dict:
        return {"x": _as_list(x[i]), "y": _as_list(y[i])}

    def point_witness(i: int) -> dict:
        return {"x": _as_list(x[i])}

    nA = box.n_actions
    if regime is Regime.STANDARD:
        v_of_q = rows.max(axis=1)
        v_of_fq = F(rows).max(axis=1)
        beta = None
    else:
        beta = cfg.beta
        log_prior = cfg.log_prior(nA)
        if log_prior.ndim > 1:
            log_prior = log_prior.reshape(-1, nA)[np.arange(len(rows)) % log_prior.reshape(-1, nA).shape[0]]
        v_of_q = logsumexp(beta * rows + log_prior[..., None], axis=1) / beta
        v_of_fq = logsumexp(beta * F(rows) + log_prior, axis=-1) / beta
    f_of_v = F(v_of_q)

    def row_witness(i: int) -> dict:
        return {"q_rows": [_as_list(r) for r in rows[i]]}

    verdicts = [
        _verdict("convexity", mid, (fx + fy) / 2, tol, pair_witness),
        _verdict("subadditivity", fsum, fx + fy, tol, pair_witness),
        _verdict("gamma_sublinearity", fg, g * fx, tol, point_witness),
        _verdict("value_exchange_convex", f_of_v, v_of_fq, tol, row_witness),
        _verdict("concavity", (fx + fy) / 2, mid, tol, pair_witness),
        _verdict("superadditivity", fx + fy, fsum, tol, pair_witness),
        _verdict("gamma_superlinearity", g * fx, fg, tol, point_witness),
        _verdict("value_exchange_concave", v_of_fq, f_of_v, tol, row_witness),
    ]
    if box.deterministic:
        verdicts = [
            ConditionVerdict(v.name, v.holds, v.worst_violation, v.witness, excluded=True)
            if v.name in SHAPE_CONDITIONS else v
            for v in verdicts
        ]
    by_name = {v.name: v for v in verdicts}

    def passes(names: tuple[str, ...]) -> bool:
        return all(by_name[n].holds or by_name[n].excluded for n in names)

    cls = Classification.from_flags(passes(CONVEX_SET), passes(CONCAVE_SET))
    return ConditionReport(f.name, regime, cls, by_name, box, beta, tol, f.notes)


def classify(
    f: TransferFn,
    box: DomainBox | None = None,
    regimes: tuple["str | Regime", ...] = tuple(Regime),
    cfg: SoftConfig | None = None,
    tol: float = DEFAULT_CHECK_TOL,
) -> TransferFn:
    """Return ``f`` with the numerically certified classification for each regime."""
    box = DomainBox.cube(f.arity) if box is None else box
    for r in regimes:
        f = f.with_classification(r, check_conditions(f, box, r, cfg, tol).classification)
    return f
