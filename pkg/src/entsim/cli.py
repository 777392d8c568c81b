"""``entsim run --scenario ...`` entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import ScenarioKind, ScenarioSpec, run_scenario, values_from_arg, write_outputs
from .netmodel import ConfigError, NetworkConfig

log = logging.getLogger("entsim")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entsim", description="Entanglement distribution simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario and write a CSV")
    run.add_argument("--scenario", required=True, choices=[k.value for k in ScenarioKind])
    run.add_argument("--config", type=Path, help="network config JSON (required for simulated scenarios)")
    run.add_argument("--trials", type=int, default=100, help="trials per sweep point")
    run.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    run.add_argument("--out", type=Path, required=True, help="output CSV path")
    run.add_argument("--trace", type=Path, help="write the event log of every trial here")
    run.add_argument("--per-trial-dump", type=Path, help="write one CSV row per trial here")
    run.add_argument("--rounds", type=int, default=3, help="purification rounds (purification-curve)")
    run.add_argument("--values", help="comma-separated sweep values overriding the defaults")
    run.add_argument("--workers", type=int, default=1, help="worker processes per sweep point")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if not 0 <= args.seed < 2**64:
            raise ValueError("--seed must fit in an unsigned 64-bit integer")
        for path in (args.out, args.trace, args.per_trial_dump):
            if path is not None and not path.parent.resolve().is_dir():
                raise OSError(f"cannot write {path}: directory does not exist")
        kind = ScenarioKind(args.scenario)
        config = None
        if args.config is not None:
            config = NetworkConfig.load(args.config)
        elif kind is not ScenarioKind.PURIFICATION_CURVE:
            raise ConfigError(f"--config is required for {kind.value}")
        spec = ScenarioSpec(
            kind=kind,
            sweep_values=values_from_arg(args.values),
            trials_per_point=args.trials,
            base_config=config,
            seed=args.seed,
            rounds=args.rounds,
            workers=args.workers,
        )
        if args.trace is not None:
            with open(args.trace, "w") as trace:
                result = run_scenario(spec, trace)
        else:
            result = run_scenario(spec)
        write_outputs(result, args.out, args.per_trial_dump)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"entsim: error: {exc}", file=sys.stderr)
        return 2
    log.info("wrote %s", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
