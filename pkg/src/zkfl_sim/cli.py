"""Command-line entry point: ``zkfl-sim run`` and ``zkfl-sim sweep``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .config import BASELINES, ScenarioConfig, config_from_mapping, load_scenario
from .engine import emit_outputs, run_scenario
from .errors import ConfigError, IoError


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zkfl-sim",
                                     description="Deterministic DAG federated-learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True, help="YAML file of config fields")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--epochs", type=int, help="override epochs_max")
    run.add_argument("--baseline", choices=BASELINES)
    run.add_argument("--emit-events", action="store_true", help="also write events.ndjson")

    sweep = sub.add_parser("sweep", help="run a scenario once per value of one field")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--param", required=True, help="config field to vary")
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--out", default="sweep", help="parent directory for per-value outputs")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--epochs", type=int)
    sweep.add_argument("--emit-events", action="store_true")
    return parser


def _apply_overrides(config: ScenarioConfig, args) -> ScenarioConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs_max"] = args.epochs
    if getattr(args, "baseline", None) is not None:
        overrides["baseline"] = args.baseline
    if not overrides:
        return config
    return config_from_mapping({**config.to_dict(), **overrides})


def _run_one(config: ScenarioConfig, out_dir, emit_events: bool) -> None:
    metrics = run_scenario(config, emit_events=emit_events)
    emit_outputs(metrics, out_dir)
    acc = metrics.final_accuracy
    acc_text = "n/a" if acc is None else f"{acc:.4f}"
    print(f"{out_dir}: {len(metrics.epochs)} epochs, final accuracy {acc_text}, "
          f"converged at {metrics.epochs_to_convergence}")


def _sweep_configs(base: ScenarioConfig, param: str, values: str):
    mapping = base.to_dict()
    if param not in mapping:
        raise ConfigError(param, "unknown key")
    for text in (v.strip() for v in values.split(",")):
        if not text:
            raise ConfigError(param, "empty value in --values")
        yield text, config_from_mapping({**mapping, param: yaml.safe_load(text)})


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        base = _apply_overrides(load_scenario(args.scenario), args)
        if args.command == "run":
            _run_one(base, args.out, args.emit_events)
        else:
            # validate every value before spending time on any run
            runs = list(_sweep_configs(base, args.param, args.values))
            for text, config in runs:
                _run_one(config, Path(args.out) / f"{args.param}={text}", args.emit_events)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
