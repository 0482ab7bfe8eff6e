"""Gridworlds with slip dynamics, reward composition and random MDP generators.

Grid text uses one character per cell:

``.`` free, ``#`` wall, ``S`` start (free), ``X`` terminal penalty, ``D`` reward diamond.

States are the non-wall, non-``X`` cells in row-major order, followed by one
absorbing terminal sink when the layout contains an ``X``. Actions are
up, down, left, right. With slip probability ``p`` the agent moves in the
intended direction with probability ``1 - p`` and, in addition, in each of the
four directions with probability ``p / 4``. Moves into walls or off the grid
leave the agent in place. Entering an ``X`` cell moves the agent to the sink.

The reward of ``(s, a)`` is the expected reward of the cell occupied after the
move: ``diamond_reward`` for a diamond, ``penalty_reward`` for an ``X``
(entering the sink), ``step_reward`` otherwise. Diamonds do not end the episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from qbounds.errors import ConfigError, ParseError, StructuralError
from qbounds.mdp import TabularMdp, stack_mdps
from qbounds.transfer import TransferFn, transform_reward

ACTIONS = ("up", "down", "left", "right")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
CELL_CHARS = frozenset(".#SXD")


@dataclass(frozen=True)
class GridSpec:
    """Layout plus dynamics and reward parameters of a gridworld.

    ``cell_rewards`` maps ``(row, col)`` to an arrival reward that overrides
    the character-derived reward of that cell. ``penalty_reward`` must be set
    when the layout contains an ``X``; there is no default value.
    """

    rows: tuple[str, ...]
    slip: float = 0.0
    step_reward: float = -1.0
    diamond_reward: float = -0.5
    penalty_reward: float | None = None
    gamma: float = 0.99
    cell_rewards: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        rows = tuple(self.rows)
        if not rows or not rows[0]:
            raise ParseError("grid is empty")
        if any(len(r) != len(rows[0]) for r in rows):
            raise ParseError(f"grid is not rectangular: row lengths {[len(r) for r in rows]}")
        bad = set("".join(rows)) - CELL_CHARS
        if bad:
            raise ParseError(f"unknown cell characters {sorted(bad)}; allowed are {''.join(sorted(CELL_CHARS))}")
        n_start = sum(r.count("S") for r in rows)
        if n_start != 1:
            raise ParseError(f"grid needs exactly one 'S', found {n_start}")
        if not 0.0 <= self.slip <= 1.0:
            raise ConfigError(f"slip must lie in [0, 1], got {self.slip}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if any("X" in r for r in rows) and self.penalty_reward is None:
            raise ConfigError("layout contains 'X' but penalty_reward is not set")
        cells = {}
        for (i, j), v in dict(self.cell_rewards).items():
            i, j = int(i), int(j)
            if not (0 <= i < len(rows) and 0 <= j < len(rows[0])) or rows[i][j] in "#X":
                raise ConfigError(f"cell_rewards entry ({i}, {j}) is not a free cell")
            cells[(i, j)] = float(v)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cell_rewards", cells)

    @classmethod
    def from_text(cls, text: str, **params) -> "GridSpec":
        rows = [r.rstrip("\r") for r in text.split("\n")]
        while rows and rows[-1] == "":
            rows.pop()
        return cls(tuple(rows), **params)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.rows[0])

    @property
    def text(self) -> str:
        return "\n".join(self.rows) + "\n"

    def layout_key(self) -> tuple:
        """Everything that fixes the dynamics, ignoring where rewards sit."""
        return tuple(r.replace("D", ".") for r in self.rows), self.slip, self.gamma

    def cells(self) -> list[tuple[int, int]]:
        """Coordinates of the states, in state-index order (the sink excluded)."""
        return [(i, j) for i, row in enumerate(self.rows) for j, c in enumerate(row) if c not in "#X"]

    @property
    def has_sink(self) -> bool:
        return any("X" in r for r in self.rows)

    @property
    def n_states(self) -> int:
        return len(self.cells()) + int(self.has_sink)

    @property
    def start_state(self) -> int:
        return next(k for k, (i, j) in enumerate(self.cells()) if self.rows[i][j] == "S")


def _kernel(slip: float) -> np.ndarray:
    """``K[a, d]``: probability of moving in direction ``d`` when choosing action ``a``."""
    return (1.0 - slip) * np.eye(4) + slip / 4.0


def _arrival_reward(spec: GridSpec, cell: tuple[int, int]) -> float:
    if cell in spec.cell_rewards:
        return spec.cell_rewards[cell]
    return spec.diamond_reward if spec.rows[cell[0]][cell[1]] == "D" else spec.step_reward


def _outcomes(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per state and direction: successor index and arrival reward."""
    cells = spec.cells()
    index = {c: k for k, c in enumerate(cells)}
    H, W = spec.shape
    sink = len(cells)
    nxt = np.zeros((spec.n_states, 4), dtype=int)
    rew = np.zeros((spec.n_states, 4))
    for k, (i, j) in enumerate(cells):
        for d, (di, dj) in enumerate(MOVES):
            ti, tj = i + di, j + dj
            if not (0 <= ti < H and 0 <= tj < W) or spec.rows[ti][tj] == "#":
                ti, tj = i, j
            if spec.rows[ti][tj] == "X":
                nxt[k, d], rew[k, d] = sink, spec.penalty_reward
            else:
                nxt[k, d], rew[k, d] = index[(ti, tj)], _arrival_reward(spec, (ti, tj))
    if spec.has_sink:
        nxt[sink] = sink
    return nxt, rew


def grid_reward(spec: GridSpec) -> np.ndarray:
    """Expected arrival reward ``r(s, a)``; the sink's row is zero."""
    _, rew = _outcomes(spec)
    return rew @ _kernel(spec.slip).T


def build_mdp(spec: GridSpec) -> TabularMdp:
    nxt, rew = _outcomes(spec)
    S = spec.n_states
    K = _kernel(spec.slip)
    P = np.zeros((S, 4, S))
    for d in range(4):
        np.add.at(P, (np.arange(S)[:, None], np.arange(4)[None, :], nxt[:, d][:, None]), K[:, d][None, :])
    terminal = np.zeros(S, dtype=bool)
    if spec.has_sink:
        terminal[-1] = True
    mu = np.zeros(S)
    mu[spec.start_state] = 1.0
    return TabularMdp(P, rew @ K.T, spec.gamma, terminal, mu)


def parse_grid(text: str, **params) -> TabularMdp:
    """Build the MDP of a grid given as text; ``params`` are ``GridSpec`` fields."""
    return build_mdp(GridSpec.from_text(text, **params))


def _check_layouts(specs: Sequence[GridSpec]) -> None:
    if not specs:
        raise StructuralError("at least one grid is required")
    keys = {s.layout_key() for s in specs}
    if len(keys) != 1:
        raise StructuralError("composed grids must share walls, start, terminals, slip and gamma")


def compose_grids(f: TransferFn, specs: Sequence[GridSpec]) -> TabularMdp:
    """MDP on the shared layout whose reward is ``f`` applied to the primitive rewards."""
    _check_layouts(specs)
    base = build_mdp(specs[0])
    return base.with_reward(transform_reward(f, [grid_reward(s) for s in specs]))


def primitive_mdps(specs: Sequence[GridSpec]) -> TabularMdp:
    """The primitives of a composition as one batched MDP (batch axis first)."""
    _check_layouts(specs)
    base = build_mdp(specs[0])
    return base.with_reward(np.stack([grid_reward(s) for s in specs]))


def with_slip(specs: Sequence[GridSpec], slip: float) -> list[GridSpec]:
    return [replace(s, slip=slip) for s in specs]


def load_fixture(name: str) -> str:
    """Text of a bundled grid layout, e.g. ``"or_left.txt"``."""
    return resources.files("qbounds.fixtures").joinpath(name).read_text(encoding="utf-8")


def random_sparse_grid(size: int, n_rewards: int, reward_range: tuple[float, float] = (0.0, 1.0),
                       seed: int = 0, gamma: float = 0.99) -> GridSpec:
    """Open ``size x size`` grid, deterministic, zero step reward, ``n_rewards`` rewarding cells.

    The start marker sits in the top-left corner and may itself carry a reward.
    """
    if size < 2:
        raise ConfigError(f"size must be at least 2, got {size}")
    if not 0 < n_rewards < size * size:
        raise ConfigError(f"n_rewards must lie in [1, {size * size - 1}], got {n_rewards}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(size * size, size=n_rewards, replace=False)
    values = rng.uniform(*reward_range, size=n_rewards)
    rows = ["S" + "." * (size - 1)] + ["." * size] * (size - 1)
    cells = {(int(p) // size, int(p) % size): float(v) for p, v in zip(picks, values)}
    return GridSpec(tuple(rows), slip=0.0, step_reward=0.0, gamma=gamma, cell_rewards=cells)


def random_mdp(n_states: int, n_actions: int, reward_range: tuple[float, float] = (-1.0, 0.0),
               gamma: float | Sequence[float] = 0.9, seed: int | np.random.SeedSequence = 0,
               batch: int | None = None) -> TabularMdp:
    """MDP with normalized-uniform transition rows and uniform rewards; no terminal states.

    With ``batch`` set, returns ``batch`` independent MDPs stacked along a
    leading axis; ``gamma`` may then be one value per member.
    """
    if n_states < 1 or n_actions < 1:
        raise ConfigError("n_states and n_actions must be at least 1")
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (int(batch),)
    w = rng.uniform(size=lead + (n_states, n_actions, n_states)) + 1e-12
    P = w / w.sum(axis=-1, keepdims=True)
    r = rng.uniform(*reward_range, size=lead + (n_states, n_actions))
    return TabularMdp(P, r, np.asarray(gamma, dtype=float) if batch else float(np.asarray(gamma)))


__all__ = [
    "ACTIONS", "GridSpec", "build_mdp", "compose_grids", "grid_reward", "load_fixture", "parse_grid",
    "primitive_mdps", "random_mdp", "random_sparse_grid", "stack_mdps", "with_slip",
]
