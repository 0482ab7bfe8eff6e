"""JSON experiment configuration.

Example::

    {
      "kind": "bound-check",
      "grids": ["fixture:or_left.txt", "fixture:or_down.txt"],
      "grid_params": {"penalty_reward": -100.0, "gamma": 0.99},
      "transfer": {"kind": "or_max", "arity": 2},
      "regime": "standard",
      "seed": 0
    }

Grid paths are resolved relative to the config file; ``fixture:NAME`` refers
to a layout bundled with the package. In ``betas`` the string ``"inf"``
selects standard RL; internally it is represented by ``None``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from qbounds.conditions import DomainBox
from qbounds.envs import GridSpec, load_fixture, random_mdp
from qbounds.errors import ConfigError
from qbounds.learn import LearnConfig
from qbounds.mdp import DEFAULT_TOL, TabularMdp
from qbounds.transfer import (
    Regime,
    TransferFn,
    and_min,
    compose_fns,
    conical_combo,
    convex_combo,
    custom,
    linear,
    not_negate,
    or_max,
    sum_fns,
)

KINDS = ("bound-check", "stochasticity-sweep", "sparsity-sweep", "clipping", "solve", "check-fn")
SEEDED_KINDS = ("sparsity-sweep", "clipping")
GRID_PARAM_KEYS = ("slip", "step_reward", "diamond_reward", "penalty_reward", "gamma")


def parse_beta(value: Any) -> float | None:
    """``"inf"`` (or ``None``) means standard RL; anything else must be a positive finite number."""
    if value is None or (isinstance(value, str) and value.strip().lower() in ("inf", "infinity")):
        return None
    try:
        b = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid beta {value!r}") from None
    if math.isinf(b) and b > 0:
        return None
    if not (math.isfinite(b) and b > 0):
        raise ConfigError(f"beta must be positive, got {value!r}")
    return b


def transfer_from_spec(spec: dict | str) -> TransferFn:
    """Build a transfer function from ``{"kind": ...}`` or ``{"expr": ...}`` (or a bare expression)."""
    if isinstance(spec, str):
        return custom(spec)
    if not isinstance(spec, dict):
        raise ConfigError(f"transfer spec must be an object or expression string, got {spec!r}")
    if "expr" in spec:
        return custom(spec["expr"], spec.get("arity"), spec.get("lipschitz_bound"), spec.get("classification"))
    kind = spec.get("kind")
    try:
        if kind == "linear":
            return linear(spec["k"])
        if kind == "or_max":
            return or_max(spec.get("arity", 2))
        if kind == "and_min":
            return and_min(spec.get("arity", 2))
        if kind == "not_negate":
            return not_negate()
        if kind == "conical_combo":
            return conical_combo(spec["weights"])
        if kind == "convex_combo":
            return convex_combo(spec["weights"])
        if kind == "sum_of":
            return sum_fns(transfer_from_spec(spec["f"]), transfer_from_spec(spec["g"]))
        if kind == "compose_of":
            return compose_fns(transfer_from_spec(spec["f"]), transfer_from_spec(spec["g"]))
    except KeyError as exc:
        raise ConfigError(f"transfer kind {kind!r} needs field {exc.args[0]!r}") from None
    raise ConfigError(f"unknown transfer kind {kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    grids: tuple[str, ...] = ()
    grid_params: dict = field(default_factory=dict)
    random_mdp: dict | None = None
    transfer: dict | str | None = None
    regime: str = "standard"
    betas: tuple[float | None, ...] = (None,)
    gamma: float | None = None
    tol: float = DEFAULT_TOL
    seed: int | None = None
    trials: int = 1
    slips: tuple[float, ...] = ()
    sizes: tuple[int, ...] = (6,)
    densities: tuple[int, ...] | None = None
    arms: tuple[str, ...] = ("none", "hard", "soft", "test", "soft_hard")
    learn: dict = field(default_factory=dict)
    soft_weight: float = 1.0
    clip_upper: bool = False
    box: dict = field(default_factory=dict)
    out_dir: str = "out"
    base_dir: str = "."

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in SEEDED_KINDS and self.seed is None:
            raise ConfigError(f"experiment kind {self.kind!r} needs an explicit integer seed")
        if self.random_mdp is not None and self.seed is None and "seed" not in self.random_mdp:
            raise ConfigError("random_mdp sources need an explicit seed")
        if self.seed is not None and (not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0):
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not (isinstance(self.trials, int) and self.trials >= 1):
            raise ConfigError(f"trials must be a positive integer, got {self.trials!r}")
        if self.gamma is not None and not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not (self.tol > 0 and math.isfinite(self.tol)):
            raise ConfigError(f"tol must be positive, got {self.tol}")
        unknown = set(self.grid_params) - set(GRID_PARAM_KEYS)
        if unknown:
            raise ConfigError(f"unknown grid_params {sorted(unknown)}")
        Regime.parse(self.regime)
        for g in self.grids:
            self._grid_text(g)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("config needs a 'kind'")
        d = dict(data)
        for key in ("grids", "slips", "sizes", "arms"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("densities") is not None:
            d["densities"] = tuple(int(x) for x in d["densities"])
        if "betas" in d:
            d["betas"] = tuple(parse_beta(b) for b in d["betas"])
        return cls(**d, base_dir=str(base_dir))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, path.parent)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update({k: v for k, v in kwargs.items() if v is not None})
        return ExperimentConfig(**data)

    def _grid_text(self, ref: str) -> str:
        if ref.startswith("fixture:"):
            try:
                return load_fixture(ref.split(":", 1)[1])
            except (FileNotFoundError, OSError):
                raise ConfigError(f"unknown fixture {ref!r}") from None
        path = Path(self.base_dir) / ref
        if not path.is_file():
            raise ConfigError(f"grid file not found: {path}")
        return path.read_text(encoding="utf-8")

    def grid_specs(self, **overrides) -> list[GridSpec]:
        params = dict(self.grid_params)
        if self.gamma is not None:
            params["gamma"] = self.gamma
        params.update(overrides)
        return [GridSpec.from_text(self._grid_text(g), **params) for g in self.grids]

    def transfer_fn(self) -> TransferFn:
        if self.transfer is None:
            raise ConfigError("config needs a 'transfer' function")
        return transfer_from_spec(self.transfer)

    def learn_config(self) -> LearnConfig:
        try:
            return LearnConfig(**self.learn)
        except TypeError as exc:
            raise ConfigError(f"invalid learn settings: {exc}") from None

    def domain_box(self, arity: int) -> DomainBox:
        b = dict(self.box)
        lo, hi = b.pop("lo", -20.0), b.pop("hi", 0.0)
        lo = tuple(np.broadcast_to(np.asarray(lo, dtype=float), (arity,)))
        hi = tuple(np.broadcast_to(np.asarray(hi, dtype=float), (arity,)))
        b.setdefault("seed", self.seed if self.seed is not None else 0)
        try:
            return DomainBox(lo, hi, **b)
        except TypeError as exc:
            raise ConfigError(f"invalid box settings: {exc}") from None

    def random_primitives(self) -> TabularMdp:
        """Primitive tasks sharing random dynamics: rewards stacked along a leading axis."""
        p = dict(self.random_mdp or {})
        tasks = int(p.pop("tasks", 2))
        seed = p.pop("seed", self.seed)
        try:
            n_states, n_actions = int(p.pop("n_states")), int(p.pop("n_actions"))
        except KeyError as exc:
            raise ConfigError(f"random_mdp needs {exc.args[0]!r}") from None
        reward_range = tuple(p.pop("reward_range", (-1.0, 0.0)))
        gamma = float(p.pop("gamma", 0.9 if self.gamma is None else self.gamma))
        if p:
            raise ConfigError(f"unknown random_mdp fields {sorted(p)}")
        base = random_mdp(n_states, n_actions, reward_range, gamma, seed)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        extra = rng.uniform(*reward_range, size=(tasks - 1, n_states, n_actions))
        return base.with_reward(np.concatenate([base.reward[None], extra]))
