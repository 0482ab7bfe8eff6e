"""Transfer functions: the catalog, pointwise application and closure operators.

A ``TransferFn`` maps ``M`` values to one value and is applied pointwise to
Q-tables or reward tables. Each function carries a declared classification per
regime, which says which one-sided bound ``f(Q)`` provides:

* ``convex-conditions``: ``f(Q) <= Q~`` (lower bound; width certified by ``C``)
* ``concave-conditions``: ``Q~ <= f(Q)`` (upper bound; width certified by ``C^``)
* ``both``: equality, ``Q~ = f(Q)``

The declared classifications of the catalog are backed by numerical checks in
``qbounds.conditions``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Mapping, Sequence

import numpy as np

from qbounds.errors import ClassificationError, PreconditionError, StructuralError
from qbounds.expr import Expression, parse_expression


class Regime(str, enum.Enum):
    STANDARD = "standard"
    SOFT = "entropy-regularized"

    @classmethod
    def parse(cls, value: "str | Regime") -> "Regime":
        if isinstance(value, Regime):
            return value
        key = str(value).strip().lower()
        aliases = {"standard": cls.STANDARD, "std": cls.STANDARD, "soft": cls.SOFT,
                   "entropy-regularized": cls.SOFT, "entropy_regularized": cls.SOFT}
        if key not in aliases:
            raise StructuralError(f"unknown regime {value!r}; use 'standard' or 'soft'")
        return aliases[key]


class Classification(str, enum.Enum):
    CONVEX = "convex-conditions"
    CONCAVE = "concave-conditions"
    BOTH = "both"
    NEITHER = "neither"
    UNKNOWN = "unknown"

    @property
    def lower_bound(self) -> bool:
        """``f(Q)`` is a lower bound on the transformed optimum."""
        return self in (Classification.CONVEX, Classification.BOTH)

    @property
    def upper_bound(self) -> bool:
        """``f(Q)`` is an upper bound on the transformed optimum."""
        return self in (Classification.CONCAVE, Classification.BOTH)

    @classmethod
    def from_flags(cls, convex: bool, concave: bool) -> "Classification":
        if convex and concave:
            return cls.BOTH
        return cls.CONVEX if convex else cls.CONCAVE if concave else cls.NEITHER


def _shared(a: Classification, b: Classification) -> Classification | None:
    """Classification a closure operation may inherit from two operands, if any."""
    if Classification.UNKNOWN in (a, b) or Classification.NEITHER in (a, b):
        return None
    if a == b:
        return a
    if Classification.BOTH in (a, b):
        return b if a == Classification.BOTH else a
    return None


@dataclass(frozen=True, eq=False)
class TransferFn:
    """A function ``R^M -> R`` with declared per-regime classifications.

    ``kind`` is one of ``linear``, ``or_max``, ``and_min``, ``not_negate``,
    ``conical_combo``, ``convex_combo``, ``sum_of``, ``compose_of`` or
    ``custom``. ``lipschitz_bound`` is with respect to the sup-norm on the
    arguments.
    """

    kind: str
    arity: int
    params: tuple[float, ...] = ()
    children: tuple["TransferFn", ...] = ()
    expression: Expression | None = None
    lipschitz_bound: float | None = None
    classes: Mapping[Regime, Classification] = field(default_factory=dict)
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.arity < 1:
            raise StructuralError(f"arity must be positive, got {self.arity}")
        if self.lipschitz_bound is not None and not (np.isfinite(self.lipschitz_bound) and self.lipschitz_bound >= 0):
            raise StructuralError(f"lipschitz_bound must be finite and non-negative, got {self.lipschitz_bound}")
        classes = {r: Classification.UNKNOWN for r in Regime}
        classes.update({Regime.parse(r): Classification(c) for r, c in dict(self.classes).items()})
        object.__setattr__(self, "classes", classes)

    def classification(self, regime: "str | Regime") -> Classification:
        return self.classes[Regime.parse(regime)]

    def with_classification(self, regime: "str | Regime", cls: "str | Classification") -> "TransferFn":
        classes = dict(self.classes)
        classes[Regime.parse(regime)] = Classification(cls)
        return replace(self, classes=classes)

    def __call__(self, *args: np.ndarray) -> np.ndarray:
        if len(args) != self.arity:
            raise StructuralError(f"{self.name} takes {self.arity} argument(s), got {len(args)}")
        xs = [np.asarray(a, dtype=float) for a in args]
        k = self.kind
        if k == "linear":
            return self.params[0] * xs[0]
        if k == "or_max":
            return reduce(np.maximum, xs)
        if k == "and_min":
            return reduce(np.minimum, xs)
        if k == "not_negate":
            return -xs[0]
        if k in ("conical_combo", "convex_combo"):
            return sum(w * x for w, x in zip(self.params, xs))
        if k == "sum_of":
            f, g = self.children
            return f(*xs) + g(*xs)
        if k == "compose_of":
            f, g = self.children
            return f(g(*xs))
        return self.expression(*xs)

    @property
    def name(self) -> str:
        if self.kind == "linear":
            return f"linear({self.params[0]:g})"
        if self.kind in ("conical_combo", "convex_combo"):
            return f"{self.kind}([{', '.join(f'{w:g}' for w in self.params)}])"
        if self.kind == "sum_of":
            return f"({self.children[0].name} + {self.children[1].name})"
        if self.kind == "compose_of":
            return f"{self.children[0].name}∘{self.children[1].name}"
        if self.kind == "custom":
            return f"expr({self.expression})"
        return self.kind

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "kind": self.kind,
            "arity": self.arity,
            "lipschitz_bound": self.lipschitz_bound,
            "classification": {r.value: c.value for r, c in self.classes.items()},
        }
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def _linear_classes(k: float) -> dict[Regime, Classification]:
    # Standard RL: Q~ = kQ for k >= 0; for k < 0 only Q~ >= kQ survives.
    std = Classification.BOTH if k >= 0 else Classification.CONVEX
    # Soft RL: kQ overshoots Q~ for k in (0, 1) and undershoots it for k > 1 or k < 0.
    if k in (0.0, 1.0):
        soft = Classification.BOTH
    elif 0 < k < 1:
        soft = Classification.CONCAVE
    else:
        soft = Classification.CONVEX
    return {Regime.STANDARD: std, Regime.SOFT: soft}


def linear(k: float) -> TransferFn:
    k = float(k)
    if not np.isfinite(k):
        raise StructuralError("linear coefficient must be finite")
    return TransferFn("linear", 1, (k,), lipschitz_bound=abs(k), classes=_linear_classes(k))


def _check_arity(arity: int) -> int:
    if int(arity) < 2:
        raise StructuralError(f"composition arity must be at least 2, got {arity}")
    return int(arity)


def or_max(arity: int = 2) -> TransferFn:
    return TransferFn("or_max", _check_arity(arity), lipschitz_bound=1.0,
                      classes={r: Classification.CONVEX for r in Regime})


def and_min(arity: int = 2) -> TransferFn:
    return TransferFn("and_min", _check_arity(arity), lipschitz_bound=1.0,
                      classes={r: Classification.CONCAVE for r in Regime})


def not_negate() -> TransferFn:
    """``f(x) = -x``; the transformed optimum dominates ``-Q`` in both regimes."""
    return TransferFn("not_negate", 1, lipschitz_bound=1.0,
                      classes={r: Classification.CONVEX for r in Regime})


def _weights(weights: Sequence[float]) -> tuple[float, ...]:
    w = tuple(float(x) for x in weights)
    if len(w) < 1 or not all(np.isfinite(x) and x >= 0 for x in w) or sum(w) <= 0:
        raise StructuralError(f"weights must be finite, non-negative and not all zero, got {list(weights)}")
    return w


def conical_combo(weights: Sequence[float]) -> TransferFn:
    """``sum_k a_k x_k`` with ``a_k >= 0``; an upper bound in standard RL for any total weight."""
    w = _weights(weights)
    soft = Classification.CONCAVE if sum(w) <= 1.0 else Classification.UNKNOWN
    return TransferFn("conical_combo", len(w), w, lipschitz_bound=sum(w),
                      classes={Regime.STANDARD: Classification.CONCAVE, Regime.SOFT: soft})


def convex_combo(weights: Sequence[float]) -> TransferFn:
    """``sum_k a_k x_k`` with ``a_k >= 0`` and ``sum_k a_k <= 1``."""
    w = _weights(weights)
    if sum(w) > 1.0 + 1e-12:
        raise StructuralError(f"convex_combo weights must sum to at most 1, got {sum(w)}")
    return TransferFn("convex_combo", len(w), w, lipschitz_bound=sum(w),
                      classes={r: Classification.CONCAVE for r in Regime})


def custom(
    expression: "str | Expression",
    arity: int | None = None,
    lipschitz_bound: float | None = None,
    classes: Mapping["str | Regime", "str | Classification"] | None = None,
) -> TransferFn:
    """Function given by an arithmetic expression over ``x1 .. xM``.

    The classification stays ``unknown`` unless supplied; use
    ``qbounds.conditions.classify`` to certify one numerically.
    """
    expr = parse_expression(expression) if isinstance(expression, str) else expression
    m = expr.arity if arity is None else int(arity)
    if m < expr.arity:
        raise StructuralError(f"expression uses x{expr.arity} but arity is {m}")
    return TransferFn("custom", m, expression=expr, lipschitz_bound=lipschitz_bound, classes=dict(classes or {}))


def catalog() -> dict[str, TransferFn]:
    """The library of known transfer functions, keyed by a short label."""
    return {
        "or": or_max(2),
        "and": and_min(2),
        "not": not_negate(),
        "linear_0.5": linear(0.5),
        "linear_2": linear(2.0),
        "linear_-1": linear(-1.0),
        "conical": conical_combo([0.7, 0.6]),
        "average": convex_combo([0.5, 0.5]),
    }


def _check_tables(f: TransferFn, tables: Sequence[np.ndarray], what: str) -> list[np.ndarray]:
    if len(tables) != f.arity:
        raise StructuralError(f"{f.name} takes {f.arity} {what}, got {len(tables)}")
    arrays = [np.asarray(t, dtype=float) for t in tables]
    if len({a.shape for a in arrays}) > 1:
        raise StructuralError(f"{what} have mismatched shapes {[a.shape for a in arrays]}")
    return arrays


def apply_transfer(f: TransferFn, qs: Sequence[np.ndarray]) -> np.ndarray:
    """``f(q_1(s,a), ..., q_M(s,a))`` at every cell."""
    return f(*_check_tables(f, qs, "Q-tables"))


def transform_reward(f: TransferFn, rewards: Sequence[np.ndarray]) -> np.ndarray:
    """Reward table of the transformed or composed task."""
    return f(*_check_tables(f, rewards, "reward tables"))


def _inherit(f: TransferFn, g: TransferFn, op: str) -> dict[Regime, Classification]:
    classes = {}
    for r in Regime:
        shared = _shared(f.classes[r], g.classes[r])
        classes[r] = Classification.UNKNOWN if shared is None else shared
    if all(c == Classification.UNKNOWN for c in classes.values()):
        detail = ", ".join(f"{r.value}: {f.classes[r].value} vs {g.classes[r].value}" for r in Regime)
        raise ClassificationError(f"{op} needs operands sharing a classification ({detail})")
    return classes


def sum_fns(f: TransferFn, g: TransferFn) -> TransferFn:
    """``f + g``, inheriting the classification both operands share in each regime.

    Regimes where the operands disagree become ``unknown``; if no regime
    remains classified a ``ClassificationError`` is raised.
    """
    if f.arity != g.arity:
        raise StructuralError(f"cannot add functions of arity {f.arity} and {g.arity}")
    classes = _inherit(f, g, "sum")
    L = None if f.lipschitz_bound is None or g.lipschitz_bound is None else f.lipschitz_bound + g.lipschitz_bound
    notes = f.notes + g.notes
    if any(c == Classification.CONCAVE for c in classes.values()):
        notes += ("concave sum: the max-exchange condition is only known to hold as an inequality",)
    return TransferFn("sum_of", f.arity, children=(f, g), lipschitz_bound=L, classes=classes, notes=notes)


def compose_fns(f: TransferFn, g: TransferFn, lo: float = -20.0, hi: float = 0.0,
                n_samples: int = 4096, seed: int = 0, tol: float = 1e-9) -> TransferFn:
    """``f(g(x))`` for unary, non-decreasing ``f``.

    Monotonicity of ``f`` is checked on the range of ``g`` sampled over the
    box ``[lo, hi]^M``.
    """
    if f.arity != 1:
        raise StructuralError(f"outer function must be unary, got arity {f.arity}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(n_samples, g.arity))
    corners = np.array(np.meshgrid(*[[lo, hi]] * g.arity)).reshape(g.arity, -1).T
    x = np.vstack([x, corners])
    u = np.sort(np.asarray(g(*x.T), dtype=float).ravel())
    fu = np.asarray(f(u), dtype=float)
    drops = fu[:-1] - fu[1:]
    scale = 1.0 + np.maximum(np.abs(fu[:-1]), np.abs(fu[1:]))
    if np.any(drops > tol * scale):
        i = int(np.argmax(drops / scale))
        raise PreconditionError(
            f"{f.name} decreases on the range of {g.name}: f({u[i]:.6g}) = {fu[i]:.6g} > f({u[i + 1]:.6g}) = {fu[i + 1]:.6g}"
        )
    classes = _inherit(f, g, "composition")
    L = None if f.lipschitz_bound is None or g.lipschitz_bound is None else f.lipschitz_bound * g.lipschitz_bound
    return TransferFn("compose_of", g.arity, children=(f, g), lipschitz_bound=L, classes=classes,
                      notes=f.notes + g.notes)
