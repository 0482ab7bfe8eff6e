"""Clipping experiment: Q-learning on a composite grid with bounds from exact primitives.

Every arm runs the same trials; trial ``t`` uses the learner seed drawn from
``SeedSequence([seed, t])``, so arms are compared under matched seeds.

Outputs under the output directory::

    clipping/<arm>/trial_<t>.csv   step, eval_return_mean, eval_return_ci_low, eval_return_ci_high, bv
    clipping/<arm>.csv             step, eval_return_mean, eval_return_ci_low, eval_return_ci_high,
                                   bv, bv_ci_low, bv_ci_high, trials
    clipping/summary.json          per arm: steps to zero BV per trial, their median, max BV

Per-trial intervals come from the evaluation episodes, per-arm intervals from
the spread over trials; both are normal-approximation 95% intervals. The
per-arm files and the summary are pure functions of the per-trial files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qbounds.bounds import compute_bounds, solve
from qbounds.envs import compose_grids, primitive_mdps
from qbounds.errors import ConfigError
from qbounds.harness.config import ExperimentConfig
from qbounds.harness.io import write_csv, write_json
from qbounds.harness.metrics import CI_Z, mean_ci
from qbounds.learn import BV_ZERO, CLIP_MODES, ClipSpec, LearnTrace, q_learning
from qbounds.transfer import Regime

TRIAL_HEADER = ("step", "eval_return_mean", "eval_return_ci_low", "eval_return_ci_high", "bv")
ARM_HEADER = TRIAL_HEADER + ("bv_ci_low", "bv_ci_high", "trials")


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def trial_rows(trace: LearnTrace, episodes: int) -> list[tuple]:
    """Per-trial curve with the interval over evaluation episodes."""
    half = CI_Z / math.sqrt(episodes) if episodes > 1 else 0.0
    return [
        (step, m, m - half * s, m + half * s, bv)
        for step, m, s, bv in zip(trace.steps, trace.eval_return_mean, trace.eval_return_std, trace.bv)
    ]


def aggregate(curves: list[list[tuple]]) -> list[tuple]:
    """Per-step mean and interval over trials of per-trial rows (``TRIAL_HEADER`` layout)."""
    if not curves:
        raise ConfigError("nothing to aggregate")
    steps = [r[0] for r in curves[0]]
    if any([r[0] for r in c] != steps for c in curves):
        raise ConfigError("trials logged different steps")
    rows = []
    for k, step in enumerate(steps):
        ret = mean_ci([c[k][1] for c in curves])
        bv = mean_ci([c[k][4] for c in curves])
        rows.append((step, *ret, *bv, len(curves)))
    return rows


def steps_to_zero(curve: list[tuple], threshold: float = BV_ZERO) -> float:
    """First logged step from which BV stays at or below ``threshold``; ``inf`` if never."""
    first = math.inf
    for row in curve:
        if row[4] > threshold:
            first = math.inf
        elif first == math.inf:
            first = row[0]
    return first


@dataclass
class ArmResult:
    arm: str
    curves: list[list[tuple]]
    traces: list[LearnTrace]

    def summary(self) -> dict:
        hits = [steps_to_zero(c) for c in self.curves]
        return {
            "steps_to_zero_bv": [None if math.isinf(h) else h for h in hits],
            "median_steps_to_zero_bv": float(np.median(hits)),
            "never_zero_trials": int(sum(math.isinf(h) for h in hits)),
            "max_bv": max(row[4] for c in self.curves for row in c),
            "final_return_mean": float(np.mean([c[-1][1] for c in self.curves])),
        }


def clip_tables(cfg: ExperimentConfig) -> tuple:
    """Composite MDP plus the lower and (optionally) upper tables implied by exact primitives."""
    f = cfg.transfer_fn()
    specs = cfg.grid_specs()
    if len(specs) != f.arity:
        raise ConfigError(f"{f.name} takes {f.arity} tasks but {len(specs)} grids are configured")
    comp = compose_grids(f, specs)
    q = solve(primitive_mdps(specs), Regime.STANDARD, None, cfg.tol)
    report = compute_bounds(comp, f, list(q), Regime.STANDARD, tol=cfg.tol)
    return comp, report.lower, report.upper if cfg.clip_upper else None


def run_clipping_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Run every arm over ``cfg.trials`` seeds; returns the summary document."""
    bad = set(cfg.arms) - set(CLIP_MODES)
    if bad:
        raise ConfigError(f"unknown arms {sorted(bad)}; expected a subset of {CLIP_MODES}")
    comp, lower, upper = clip_tables(cfg)
    learn_cfg = cfg.learn_config()
    seeds = [trial_seed(cfg.seed, t) for t in range(cfg.trials)]
    results = {}
    for arm in cfg.arms:
        clip = ClipSpec(arm, cfg.soft_weight, lower, upper)
        traces = [q_learning(comp, clip, learn_cfg, s) for s in seeds]
        results[arm] = ArmResult(arm, [trial_rows(t, learn_cfg.eval_episodes) for t in traces], traces)

    summary = {
        "bv_zero_threshold": BV_ZERO,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "trial_seeds": seeds,
        "soft_weight": cfg.soft_weight,
        "clip_upper": cfg.clip_upper,
        "learn": results[cfg.arms[0]].traces[0].hyper if cfg.arms else {},
        "arms": {arm: r.summary() for arm, r in results.items()},
    }
    if out_dir is not None:
        root = Path(out_dir) / "clipping"
        for arm, r in results.items():
            for t, curve in enumerate(r.curves):
                write_csv(root / arm / f"trial_{t:03d}.csv", TRIAL_HEADER, curve)
            write_csv(root / f"{arm}.csv", ARM_HEADER, aggregate(r.curves))
        write_json(root / "summary.json", summary)
    summary["results"] = results
    return summary
