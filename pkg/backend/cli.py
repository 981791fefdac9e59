"""
pdediscover command line

    python backend/cli.py [global flags] <command> <experiment.yaml> [options]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 degenerate discovery.
"""

import os
import sys
import json
import math
import logging
import argparse
from typing import Any, Dict, List, Optional

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from backend.experiment_config import ExperimentConfig, load_experiment, with_overrides, with_seed
from backend.experiment_runner import DiscoveryReport, ExperimentRunner, sweep
from backend.utils import ensure_directory_exists, load_config, parse_float_list, save_json_file, setup_logging
from discovery.errors import ConfigError, GenomeError, PdeDiscoveryError
from discovery.pdegen import solution_error
from discovery.genome import display_equation, parse_genome

logger = logging.getLogger("pdediscover.cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdediscover",
        description="Discover integral-form PDEs from sparse, noisy observations",
    )
    parser.add_argument("--config", default="config/config.yaml", help="Path to application configuration")
    parser.add_argument("--seed", type=int, help="Master seed for noise, sampling, training and the GA")
    parser.add_argument("--out-dir", help="Directory for reports and tables")
    parser.add_argument("--threads", type=int, help="Worker threads for fitness evaluation and windows")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Override log level")
    parser.add_argument("--no-cache", action="store_true", help="Recompute every stage")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")

    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="Solve the reference PDE and write the observed dataset")
    generate.add_argument("experiment", help="Experiment YAML")

    train = commands.add_parser("train", help="Fit the surrogate network")
    train.add_argument("experiment", help="Experiment YAML")

    discover = commands.add_parser("discover", help="Constant-coefficient structure discovery")
    discover.add_argument("experiment", help="Experiment YAML")
    discover.add_argument("--network", help="Use a saved network instead of training")
    discover.add_argument("--mode", choices=["integral", "differential"], help="Override the discovery mode")

    hetero = commands.add_parser("discover-hetero", help="Stepwise discovery of spatially varying coefficients")
    hetero.add_argument("experiment", help="Experiment YAML")
    hetero.add_argument("--network", help="Use a saved network instead of training")

    evaluate = commands.add_parser("evaluate", help="Re-solve a given structure and report its solution error")
    evaluate.add_argument("experiment", help="Experiment YAML")
    evaluate.add_argument("--structure", required=True, help='Genome, e.g. "[1],{[0,0],[2]}"')
    evaluate.add_argument("--coefficients", required=True, help="Comma-separated coefficients, one per module")
    evaluate.add_argument("--form", choices=["integral", "differential"], default="integral")

    sweep_cmd = commands.add_parser("sweep", help="Repeat discovery over one varied setting")
    sweep_cmd.add_argument("experiment", help="Experiment YAML")
    sweep_cmd.add_argument("--kind", choices=["interval", "noise", "datasize", "variance"])
    sweep_cmd.add_argument("--values", help="Comma-separated values")

    return parser


def _app_config(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_config(args.config)
    app = config.setdefault("app", {})
    if args.out_dir:
        app["out_dir"] = args.out_dir
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        app["threads"] = args.threads
    if args.no_cache:
        app["cache_enabled"] = False
    if args.progress:
        app["progress"] = True
    if args.log_level:
        config.setdefault("logging", {})["level"] = args.log_level
    return config


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    experiment = load_experiment(args.experiment)
    if args.seed is not None:
        experiment = with_seed(experiment, args.seed)
    overrides: Dict[str, Any] = {}
    if getattr(args, "network", None):
        overrides["surrogate.network_file"] = args.network
    if getattr(args, "mode", None):
        overrides["discovery.mode"] = args.mode
    return with_overrides(experiment, overrides) if overrides else experiment


def _print_report(report: DiscoveryReport) -> None:
    print(f"Equation: {report.equation}")
    if report.differential_form:
        print(f"Differential form: {report.differential_form}")
    if report.stability is not None:
        print(f"Stability S = {report.stability:.2f}")
        for term, stats in report.cv_table.items():
            cv = "undefined" if stats["cv_percent"] is None else f"{stats['cv_percent']:.2f}%"
            print(f"  {term}: mean={stats['mean']:.4g} cv={cv} ({stats['kind']})")
    if report.solution_error_percent is not None:
        print(f"Solution error: {report.solution_error_percent:.2f}%")
    if report.support_recovered is not None:
        print(f"Support recovered: {report.support_recovered}")


def cmd_generate(config: Dict[str, Any], experiment: ExperimentConfig) -> None:
    runner = ExperimentRunner(config, experiment)
    state = runner.execute("generate")
    ensure_directory_exists(runner.out_dir)
    state["dataset"].to_csv(os.path.join(runner.out_dir, "dataset.csv"))
    state["observed"].to_csv(os.path.join(runner.out_dir, "observed.csv"))
    print(f"Dataset written to {runner.out_dir}")


def cmd_train(config: Dict[str, Any], experiment: ExperimentConfig) -> None:
    runner = ExperimentRunner(config, experiment)
    state = runner.execute("train")
    path = os.path.join(runner.out_dir, "network.json")
    state["network"].save(path)
    print(f"Network written to {path}")


def cmd_discover(config: Dict[str, Any], experiment: ExperimentConfig, hetero: bool) -> None:
    if hetero and experiment.discovery.mode != "hetero":
        raise ConfigError("discover-hetero needs discovery.mode: hetero")
    if not hetero and experiment.discovery.mode == "hetero":
        raise ConfigError("Heterogeneous experiments run with discover-hetero")
    _print_report(ExperimentRunner(config, experiment).run())


def cmd_evaluate(config: Dict[str, Any], experiment: ExperimentConfig, args: argparse.Namespace) -> None:
    try:
        genome = parse_genome(args.structure)
        coefficients = parse_float_list(args.coefficients)
    except (GenomeError, ValueError) as e:
        raise ConfigError(f"Invalid structure or coefficients: {e}") from e
    if len(coefficients) != len(genome.modules):
        raise ConfigError(f"{len(genome.modules)} coefficients expected, got {len(coefficients)}")
    runner = ExperimentRunner(config, experiment)
    reference = runner.execute("generate")["dataset"]
    error = solution_error(reference, genome, coefficients, args.form)
    result = {
        "equation": display_equation(genome, coefficients, args.form),
        "solution_error_percent": error if math.isfinite(error) else None,
    }
    save_json_file(result, os.path.join(runner.out_dir, "evaluation.json"))
    print(json.dumps(result, indent=2, ensure_ascii=False))


def cmd_sweep(config: Dict[str, Any], experiment: ExperimentConfig, args: argparse.Namespace) -> None:
    kind = args.kind or (experiment.sweep.kind if experiment.sweep else None)
    if args.values is not None:
        values = parse_float_list(args.values)
    else:
        values = experiment.sweep.values if experiment.sweep else []
    if kind is None:
        raise ConfigError("Sweep kind missing: pass --kind or add a sweep block")
    table = sweep(config, experiment, kind, values)
    print(table.to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point"""
    args = build_parser().parse_args(argv)
    try:
        config = _app_config(args)
        setup_logging(config.get("logging", {}))
        experiment = _experiment(args)
        logger.info(f"Running {args.command} for experiment '{experiment.name}'")

        if args.command == "generate":
            cmd_generate(config, experiment)
        elif args.command == "train":
            cmd_train(config, experiment)
        elif args.command in ("discover", "discover-hetero"):
            cmd_discover(config, experiment, hetero=args.command == "discover-hetero")
        elif args.command == "evaluate":
            cmd_evaluate(config, experiment, args)
        elif args.command == "sweep":
            cmd_sweep(config, experiment, args)
    except PdeDiscoveryError as e:
        logger.error(str(e))
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
