"""
kronsbl command line.

    kronsbl estimate --config run.toml --out report.json
    kronsbl sweep --config sweep.toml --out nmse.csv [--seed S] [--trials T]
    kronsbl selftest

Exit codes: 0 on success, 1 when the config or a parameter is invalid,
2 on any runtime failure (including a failed selftest).
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from kronsbl import log_helper
from kronsbl.channel_sim import (
    build_dictionary,
    generate_channel,
    observe,
    reconstruct_channel,
    trial_rng,
)
from kronsbl.config import EstimateRequest, parse_config, serialize_config
from kronsbl.errors import ConfigError, ParameterError
from kronsbl.estimators import EstimatorSettings, run_estimator
from kronsbl.experiments import SweepSpec, emit_csv, format_summary, nmse, run_sweep, write_atomic
from kronsbl.metrics import SweepMetrics
from kronsbl.selftest import run_selftest

log = log_helper.getLogger("kronsbl.cli")

__all__ = ["main", "parse_config", "serialize_config"]


def load_config(path: Path) -> Union[SweepSpec, EstimateRequest]:
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def estimate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if isinstance(config, SweepSpec):
        config = EstimateRequest(
            config.base_scenario,
            config.estimators,
            config.sbl_hyper,
            config.esbl_hyper,
            config.policy,
        )
    scenario = config.scenario
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)

    dictionary = build_dictionary(scenario)
    rng = trial_rng(scenario.seed, 0, 0)
    channel, _ = generate_channel(scenario, rng)
    observation = observe(channel, dictionary.pilot, scenario.snr_db, rng)
    settings = EstimatorSettings(config.sbl_hyper, config.esbl_hyper, config.policy)

    estimates: Dict[str, Any] = {}
    for name in config.estimators:
        report = run_estimator(
            name, dictionary, observation.z, scenario.estimation_sigma2, settings
        )
        h_hat = reconstruct_channel(
            report.u_hat, dictionary.transform, scenario.num_antennas, scenario.num_users
        ).H
        estimates[name] = {
            "nmse": nmse(h_hat, channel.H),
            "iterations": report.iterations,
            "converged": report.converged,
            "objective_trace": report.objective_trace,
            "wall_time": report.wall_time,
            "h_hat": {"real": np.real(h_hat).tolist(), "imag": np.imag(h_hat).tolist()},
        }
        log.info(f"{name}: nmse {estimates[name]['nmse']:.4e}, {report.iterations} iterations")

    out = {
        "config": serialize_config(dataclasses.replace(config, scenario=scenario)),
        "gram_structure": dictionary.structure.value,
        "estimates": estimates,
    }
    write_atomic(args.out, json.dumps(out, indent=2) + "\n")
    return 0


def sweep(args: argparse.Namespace) -> int:
    spec = load_config(args.config)
    if not isinstance(spec, SweepSpec):
        raise ConfigError("sweep needs a config with a [sweep] section", key="sweep")

    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["base_scenario"] = dataclasses.replace(spec.base_scenario, seed=args.seed)
    if args.trials is not None:
        overrides["num_trials"] = args.trials
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.timing:
        overrides["timing"] = True
    spec = dataclasses.replace(spec, **overrides)

    metrics = SweepMetrics() if args.metrics_out is not None else None
    result = run_sweep(spec, metrics)
    emit_csv(result, args.out)
    if metrics is not None:
        metrics.write(args.metrics_out)

    print(format_summary(result))
    return 0


def selftest(args: argparse.Namespace) -> int:
    results = run_selftest(args.seed if args.seed is not None else 0)
    for r in results:
        print(f"{'ok' if r.passed else 'FAILED':>6}  {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kronsbl",
        description="Sparse Bayesian channel estimation over Kronecker-structured dictionaries",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Log warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="Estimate one seeded channel realization")
    p.add_argument("--config", type=Path, required=True, help="TOML experiment config")
    p.add_argument("--out", type=Path, required=True, help="Output JSON report")
    p.add_argument("--seed", type=int, help="Override scenario.seed")
    p.set_defaults(func=estimate)

    p = sub.add_parser("sweep", help="Run a Monte Carlo NMSE sweep")
    p.add_argument("--config", type=Path, required=True, help="TOML experiment config")
    p.add_argument("--out", type=Path, required=True, help="Output CSV file")
    p.add_argument("--seed", type=int, help="Override scenario.seed")
    p.add_argument("--trials", type=int, help="Override sweep.trials")
    p.add_argument("--workers", type=int, help="Override sweep.workers")
    p.add_argument("--timing", action="store_true", help="Write mean wall time to the CSV")
    p.add_argument("--metrics-out", type=Path, help="Write Prometheus metrics to this file")
    p.set_defaults(func=sweep)

    p = sub.add_parser("selftest", help="Run the built-in invariant checks")
    p.add_argument("--seed", type=int, help="Seed for the random instances")
    p.set_defaults(func=selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    else:
        level = logging.INFO
    log_helper.configure(level)

    try:
        return int(args.func(args))
    except (ConfigError, ParameterError) as e:
        log.error(f"invalid input: {e}")
        return 1
    except Exception as e:
        log.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
