"""Stochasticity and sparsity sweeps of bound tightness and policy divergence.

Both sweeps solve the primitives and the composite exactly at every point.
The gap is ``Q~ - f(Q)`` for functions meeting the convex conditions and
``f(Q) - Q~`` otherwise, averaged over all state-action pairs. The
divergence is ``KL(pi || pi_f)`` between the Boltzmann policies of ``Q~`` and
``f(Q)``, averaged over states; it is left empty for ``beta = inf``.

Sparsity trials use the seed scheme ``SeedSequence([seed, point_index])``,
spawned once per trial and again per primitive task, where ``point_index``
counts (size, density) points in sweep order. Trials at one point are solved
as one batch, so results do not depend on evaluation order.

CSV columns (one file per sweep, or per grid size for sparsity)::

    sweep_value, beta, mean_kl, kl_std, mean_gap, gap_std, min_gap, trials
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import numpy as np

from qbounds.bounds import solve
from qbounds.envs import build_mdp, compose_grids, grid_reward, primitive_mdps, random_sparse_grid, with_slip
from qbounds.errors import ClassificationError, ConfigError, NumericalError
from qbounds.harness.config import ExperimentConfig
from qbounds.harness.io import write_csv
from qbounds.harness.metrics import MetricRow, kl_policy_divergence
from qbounds.mdp import SoftConfig, TabularMdp, boltzmann_policy
from qbounds.transfer import Regime, TransferFn, apply_transfer

DEFAULT_SLIPS = tuple(round(0.05 * k, 2) for k in range(17))
SIGN_CHECK_TOL = 1e-8


@contextmanager
def sweep_point(**coords):
    """Re-raise numerical errors with the sweep coordinates appended to the message."""
    try:
        yield
    except NumericalError as exc:
        where = ", ".join(f"{k}={'inf' if v is None else v}" for k, v in coords.items())
        raise type(exc)(f"{exc} [at {where}]") from exc


def point_metrics(prim: TabularMdp, comp: TabularMdp, f: TransferFn, beta: float | None,
                  tol: float) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-trial signed gaps ``(..., S, A)`` and mean KL ``(...)`` at one sweep point.

    ``prim`` carries the primitive tasks on its last batch axis; ``comp`` has
    the remaining batch axes.
    """
    regime = Regime.STANDARD if beta is None else Regime.SOFT
    cfg = None if beta is None else SoftConfig(beta)
    cls = f.classification(regime)
    if not (cls.lower_bound or cls.upper_bound):
        raise ClassificationError(f"{f.name} is {cls.value} in the {regime.value} regime; no gap is defined")
    q_prim = solve(prim, regime, cfg, tol)
    q_tilde = solve(comp, regime, cfg, tol)
    fq = apply_transfer(f, list(np.moveaxis(q_prim, -3, 0)))
    gaps = q_tilde - fq if cls.lower_bound else fq - q_tilde
    kl = None
    if cfg is not None:
        kl = np.asarray(kl_policy_divergence(boltzmann_policy(q_tilde, cfg), boltzmann_policy(fq, cfg)))
    return gaps, kl


def _row(value, beta, gaps: np.ndarray, kl: np.ndarray | None) -> MetricRow:
    per_trial = gaps.reshape(-1, gaps.shape[-2] * gaps.shape[-1]).mean(axis=1)
    kl = None if kl is None else np.ravel(kl)
    return MetricRow(
        sweep_value=value, beta=beta,
        mean_kl=None if kl is None else float(np.mean(kl)),
        kl_std=None if kl is None else float(np.std(kl)),
        mean_gap=float(np.mean(per_trial)), gap_std=float(np.std(per_trial)),
        trials=len(per_trial), min_gap=float(np.min(gaps)),
    )


def _write(rows: list[MetricRow], path: Path | None) -> None:
    if path is not None:
        write_csv(path, MetricRow.HEADER, (r.as_row() for r in rows))


def run_stochasticity_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[MetricRow]:
    """Gap and KL per (slip, beta) on the configured grids; writes ``stochasticity.csv``."""
    f = cfg.transfer_fn()
    specs = cfg.grid_specs()
    if len(specs) != f.arity:
        raise ConfigError(f"{f.name} takes {f.arity} tasks but {len(specs)} grids are configured")
    rows = []
    for slip in cfg.slips or DEFAULT_SLIPS:
        at_slip = with_slip(specs, float(slip))
        prim, comp = primitive_mdps(at_slip), compose_grids(f, at_slip)
        for beta in cfg.betas:
            with sweep_point(slip=slip, beta=beta):
                gaps, kl = point_metrics(prim, comp, f, beta, cfg.tol)
            rows.append(_row(float(slip), beta, gaps, kl))
    _write(rows, None if out_dir is None else Path(out_dir) / "stochasticity.csv")
    return rows


def sparse_pair_seeds(seed: int, point_index: int, trials: int, arity: int) -> list[list[np.random.SeedSequence]]:
    """Seeds of every primitive grid at one sweep point, indexed ``[trial][task]``."""
    return [t.spawn(arity) for t in np.random.SeedSequence([seed, point_index]).spawn(trials)]


def run_sparsity_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict[int, list[MetricRow]]:
    """Gap and KL against the number of rewarding cells; writes ``sparsity_size<N>.csv`` per size.

    Every trial is also checked for the bound sign at ``1e-8``; a violation
    raises ``NumericalError`` naming the trial.
    """
    f = cfg.transfer_fn()
    gamma = cfg.gamma if cfg.gamma is not None else cfg.grid_params.get("gamma", 0.99)
    out: dict[int, list[MetricRow]] = {}
    point_index = 0
    for size in cfg.sizes:
        densities = cfg.densities or tuple(range(1, size * size))
        rows = []
        for density in densities:
            seeds = sparse_pair_seeds(cfg.seed, point_index, cfg.trials, f.arity)
            specs = [[random_sparse_grid(size, density, seed=s, gamma=gamma) for s in trial] for trial in seeds]
            base = build_mdp(specs[0][0])
            rewards = np.array([[grid_reward(s) for s in trial] for trial in specs])
            prim = base.with_reward(rewards)
            comp = base.with_reward(apply_transfer(f, list(np.moveaxis(rewards, 1, 0))))
            for beta in cfg.betas:
                with sweep_point(size=size, density=density, beta=beta):
                    gaps, kl = point_metrics(prim, comp, f, beta, cfg.tol)
                    worst = gaps.reshape(len(gaps), -1).min(axis=1)
                    bad = np.flatnonzero(worst < -SIGN_CHECK_TOL)
                    if bad.size:
                        raise NumericalError(
                            f"bound sign violated by {-worst[bad[0]]:.3e} in trial {int(bad[0])}")
                rows.append(_row(density, beta, gaps, kl))
            point_index += 1
        out[size] = rows
        _write(rows, None if out_dir is None else Path(out_dir) / f"sparsity_size{size}.csv")
    return out
