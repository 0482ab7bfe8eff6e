"""Command-line entry point ``qbounds``.

Subcommands: solve, check-fn, bound, learn, sweep-stochasticity,
sweep-sparsity, clip-experiment. Common flags: ``--config``, ``--out``,
``--seed``, ``--tol``; the flags override the corresponding config fields.

Exit status is 0 on success, 1 on configuration or input errors (including
unknown flags) and 2 on numerical or convergence failures.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from qbounds.bounds import compute_bounds, solve
from qbounds.conditions import DomainBox, check_conditions
from qbounds.envs import compose_grids, primitive_mdps
from qbounds.errors import ConfigError, NumericalError, QBoundsError
from qbounds.harness.clipping import TRIAL_HEADER, clip_tables, run_clipping_experiment, trial_rows
from qbounds.harness.config import ExperimentConfig, parse_beta, transfer_from_spec
from qbounds.harness.io import write_csv, write_json
from qbounds.harness.sweeps import run_sparsity_sweep, run_stochasticity_sweep
from qbounds.learn import CLIP_MODES, ClipSpec, bound_violation, q_learning
from qbounds.mdp import SoftConfig, TabularMdp
from qbounds.transfer import Regime, TransferFn, transform_reward

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

# Config kind each subcommand expects; ``solve`` accepts any config naming tasks.
KIND_OF = {
    "solve": "solve",
    "check-fn": "check-fn",
    "bound": "bound-check",
    "learn": "clipping",
    "sweep-stochasticity": "stochasticity-sweep",
    "sweep-sparsity": "sparsity-sweep",
    "clip-experiment": "clipping",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load(args, command: str) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(f"{command} needs --config")
    cfg = ExperimentConfig.from_file(args.config)
    if command != "solve" and cfg.kind != KIND_OF[command]:
        raise ConfigError(f"{args.config} describes a {cfg.kind!r} experiment, not {KIND_OF[command]!r}")
    return cfg.with_overrides(seed=args.seed, tol=args.tol, out_dir=args.out)


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir)


def _soft_cfg(cfg: ExperimentConfig, regime: Regime) -> SoftConfig | None:
    if regime is Regime.STANDARD:
        return None
    beta = cfg.betas[0] if cfg.betas else None
    if beta is None:
        raise ConfigError("the entropy-regularized regime needs a finite beta")
    return SoftConfig(beta)


def _tasks(cfg: ExperimentConfig, f: TransferFn | None) -> tuple[TabularMdp, TabularMdp | None]:
    """Primitives batched along the first axis, and the composite target when ``f`` is given."""
    if cfg.grids:
        specs = cfg.grid_specs()
        return primitive_mdps(specs), None if f is None else compose_grids(f, specs)
    if cfg.random_mdp is not None:
        prim = cfg.random_primitives()
        return prim, None if f is None else prim.select(0).with_reward(transform_reward(f, list(prim.reward)))
    raise ConfigError("config needs 'grids' or 'random_mdp'")


def _certify(f: TransferFn, regime: Regime, soft: SoftConfig | None, qs: np.ndarray, mdp: TabularMdp,
             cfg: ExperimentConfig) -> TransferFn:
    """Classify a function of unknown class on the box spanned by the primitive Q-values."""
    if f.classification(regime).value != "unknown":
        return f
    box = DomainBox(tuple(q.min() for q in qs), tuple(q.max() for q in qs), gamma=float(mdp.gamma_max),
                    n_actions=mdp.n_actions, deterministic=mdp.deterministic, seed=cfg.seed or 0)
    return f.with_classification(regime, check_conditions(f, box, regime, soft).classification)


def cmd_solve(args) -> str:
    cfg = _load(args, "solve")
    regime = Regime.parse(cfg.regime)
    soft = _soft_cfg(cfg, regime)
    f = None if cfg.transfer is None else cfg.transfer_fn()
    prim, comp = _tasks(cfg, f)
    q = solve(prim, regime, soft, cfg.tol)
    doc = {"regime": regime.value, "beta": None if soft is None else soft.beta, "tol": cfg.tol, "q": q}
    if comp is not None:
        doc["composite_q"] = solve(comp, regime, soft, cfg.tol)
    write_json(_out(cfg) / "solution.json", doc)
    return f"solved {q.shape[0]} task(s); max |Q| = {float(np.max(np.abs(q))):.6g}"


def cmd_check_fn(args) -> str:
    cfg = None
    if args.config:
        cfg = _load(args, "check-fn")
    if args.expr is not None:
        f = transfer_from_spec({"expr": args.expr, "arity": args.arity})
    elif cfg is not None:
        f = cfg.transfer_fn()
    else:
        raise ConfigError("check-fn needs --expr or --config")
    regime = Regime.parse(args.regime or (cfg.regime if cfg else "standard"))
    beta = parse_beta(args.beta) if args.beta is not None else (cfg.betas[0] if cfg and cfg.betas else 1.0)
    if regime is Regime.SOFT and beta is None:
        raise ConfigError("the entropy-regularized regime needs a finite beta")
    soft = SoftConfig(beta) if regime is Regime.SOFT else None
    if cfg is not None:
        box = cfg.domain_box(f.arity)
    else:
        seed = 0 if args.seed is None else args.seed
        box = DomainBox.cube(f.arity, args.lo, args.hi, seed=seed)
    report = check_conditions(f, box, regime, soft, tol=args.tol or 1e-9)
    if args.out or cfg is not None:
        write_json(Path(args.out or cfg.out_dir) / "check_report.json", report.to_dict())
    return report.classification.value


def cmd_bound(args) -> str:
    cfg = _load(args, "bound")
    regime = Regime.parse(cfg.regime)
    soft = _soft_cfg(cfg, regime)
    f = cfg.transfer_fn()
    prim, comp = _tasks(cfg, f)
    q = solve(prim, regime, soft, cfg.tol)
    f = _certify(f, regime, soft, q, comp, cfg)
    meta = {"seed": cfg.seed, "grids": list(cfg.grids), "random_mdp": cfg.random_mdp}
    report = compute_bounds(comp, f, list(q), regime, soft, cfg.tol, meta=meta)
    write_json(_out(cfg) / "bound_report.json", report.to_dict())
    return f"gap_max={report.gap_max!r}"


def cmd_learn(args) -> str:
    cfg = _load(args, "learn")
    if cfg.seed is None:
        raise ConfigError("learn needs an explicit seed")
    mode = args.mode or (cfg.arms[0] if cfg.arms else "none")
    comp, lower, upper = clip_tables(cfg)
    learn_cfg = cfg.learn_config()
    trace = q_learning(comp, ClipSpec(mode, cfg.soft_weight, lower, upper), learn_cfg, cfg.seed)
    write_csv(_out(cfg) / f"learn_{mode}.csv", TRIAL_HEADER, trial_rows(trace, learn_cfg.eval_episodes))
    bv = bound_violation(trace.q, lower)
    return f"mode={mode} final_return={trace.eval_return_mean[-1]!r} bv={bv!r}"


def cmd_sweep_stochasticity(args) -> str:
    cfg = _load(args, "sweep-stochasticity")
    rows = run_stochasticity_sweep(cfg, _out(cfg))
    return f"wrote {len(rows)} rows to {_out(cfg) / 'stochasticity.csv'}; min_gap={min(r.min_gap for r in rows)!r}"


def cmd_sweep_sparsity(args) -> str:
    cfg = _load(args, "sweep-sparsity")
    out = run_sparsity_sweep(cfg, _out(cfg))
    n = sum(len(v) for v in out.values())
    return f"wrote {n} rows for sizes {sorted(out)}; min_gap={min(r.min_gap for v in out.values() for r in v)!r}"


def cmd_clip_experiment(args) -> str:
    cfg = _load(args, "clip-experiment")
    summary = run_clipping_experiment(cfg, _out(cfg))
    parts = []
    for arm, s in summary["arms"].items():
        m = s["median_steps_to_zero_bv"]
        parts.append(f"{arm}={'inf' if math.isinf(m) else int(m)}")
    return "median steps to zero BV: " + " ".join(parts)


COMMANDS = {
    "solve": (cmd_solve, "solve the configured primitive (and composite) tasks exactly"),
    "check-fn": (cmd_check_fn, "classify a transfer function against the convex and concave conditions"),
    "bound": (cmd_bound, "compute double-sided bounds and regret certificates"),
    "learn": (cmd_learn, "run one Q-learning trial with clipping"),
    "sweep-stochasticity": (cmd_sweep_stochasticity, "bound gap and KL against slip probability"),
    "sweep-sparsity": (cmd_sweep_sparsity, "bound gap and KL against reward density"),
    "clip-experiment": (cmd_clip_experiment, "compare clipping arms over seeded trials"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qbounds", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="seed (overrides the config)")
        p.add_argument("--tol", type=float, help="solver tolerance (overrides the config)")
        if name == "check-fn":
            p.add_argument("--expr", help="expression over x1..xM, e.g. 'max(x1,x2)'")
            p.add_argument("--arity", type=int, help="number of arguments (default: highest xK used)")
            p.add_argument("--regime", help="standard or soft")
            p.add_argument("--beta", help="inverse temperature for the soft regime (default 1)")
            p.add_argument("--lo", type=float, default=-20.0, help="lower edge of the test box")
            p.add_argument("--hi", type=float, default=0.0, help="upper edge of the test box")
        if name == "learn":
            p.add_argument("--mode", choices=CLIP_MODES, help="clipping mode (default: first configured arm)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    handler = COMMANDS[args.command][0]
    try:
        print(handler(args))
    except NumericalError as exc:
        print(f"qbounds {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (QBoundsError, OSError) as exc:
        print(f"qbounds {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
