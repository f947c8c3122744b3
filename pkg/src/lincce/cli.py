"""Command-line entry point: ``run``, ``oracle``, ``sweep`` and ``gen``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .ftrl import RestartBudgetExceeded
from .game import load_game, load_policy, save_game
from .harness import (ConfigError, ExperimentConfig, InvariantViolation, SWEEP_PARAMS, generate,
                      run_experiment, sweep, write_records, write_summary)
from .simulator import ProtocolViolation

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3

log = logging.getLogger("lincce")


def _cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    seeds = [args.seed] if args.seed is not None else sorted(cfg.seeds)
    records = []
    for seed in seeds:
        rec, mix = run_experiment(cfg, seed, return_policy=True)
        records.append(rec)
        if args.policy_out:
            Path(args.policy_out).write_text(json.dumps(mix.to_dict()))
    write_records(records, args.out)


def _cmd_oracle(args):
    from .oracle import cce_gap

    try:
        game = load_game(args.game)
        mix = load_policy(args.policy)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load inputs: {exc}") from None
    try:
        report = cce_gap(game, mix)
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from None
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))


def _cmd_sweep(args):
    cfg = ExperimentConfig.load(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    try:
        result = sweep(cfg, args.param, values)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad sweep values: {exc}") from None
    write_records([r for _, r in result.records], args.out)
    out = Path(args.out)
    write_summary(result, out.with_name(out.stem + "_summary.csv"))


def _cmd_gen(args):
    spec = {"generator": args.kind}
    if args.params:
        try:
            spec.update(json.loads(args.params))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--params is not valid JSON: {exc}") from None
    save_game(generate(spec, args.seed), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lincce", description="Learn and score coarse correlated equilibria.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the configured learner")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, help="override the config's seed list")
    run.add_argument("--out", required=True, help="CSV of run records")
    run.add_argument("--policy-out", help="JSON dump of the learned policy (last seed)")
    run.set_defaults(func=_cmd_run)

    ora = sub.add_parser("oracle", help="exact CCE gap of a policy")
    ora.add_argument("--game", required=True)
    ora.add_argument("--policy", required=True)
    ora.add_argument("--out", required=True)
    ora.set_defaults(func=_cmd_oracle)

    sw = sub.add_parser("sweep", help="grid over one parameter")
    sw.add_argument("--config", required=True)
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", required=True, help="comma-separated list")
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=_cmd_sweep)

    gen = sub.add_parser("gen", help="write a generated game as JSON")
    gen.add_argument("--kind", required=True,
                     choices=["random_tabular", "matrix_game", "matching_pennies", "chain"])
    gen.add_argument("--params", help='generator fields as JSON, e.g. \'{"S": 4, "m": 2, "A": [2, 3], "H": 3}\'')
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CCE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, ProtocolViolation, RestartBudgetExceeded, ArithmeticError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
