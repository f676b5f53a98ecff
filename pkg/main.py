"""
Truth-Maximized Diffusion Classifier - Experiment CLI
======================================================
Trains a class-conditional diffusion model on synthetic blobs, uses it as a
classifier, attacks it with transfer and direct attacks, and fine-tunes it
with Truth Maximization (LoRA on adversarial inputs).

Usage:
    python main.py run --config configs/reference.json          # full pipeline
    python main.py run --config configs/table1.json --force     # re-run everything
    python main.py eval --config configs/smoke.json --seed 7    # one stage
    python main.py report --config configs/reference.json
    python main.py schema > experiment.schema.json
    python main.py aggregate outputs/runs/a outputs/runs/b --output seeds.csv

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""

import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

from config import (
    EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_FAILURE, LOG_DATE_FORMAT,
    LOG_FORMAT, LOG_LEVEL, RUN_LOG_DIR,
)
from pipeline.experiment_config import ALL_STAGES, ConfigError, ExperimentConfig, load_config
from pipeline.runner import StageError, run_experiment

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False) -> None:
    """Configure the root logger with a console handler."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else LOG_LEVEL,
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def add_file_logging(log_dir: Path, command: str) -> Path:
    """Mirror the log into a timestamped file under the run's logs/ directory."""
    log_dir.mkdir(parents=True, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = log_dir / f"{command}_{timestamp}.log"
    handler = logging.FileHandler(str(log_file), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
    logging.getLogger().addHandler(handler)
    return log_file


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="Experiment config (JSON or YAML); defaults to the built-in reference")
    parser.add_argument("--seed", type=int, default=None,
                        help="Override the config's master seed")
    parser.add_argument("--force", action="store_true",
                        help="Re-run stages even when their outputs exist")
    parser.add_argument("--run-dir", type=Path, default=None,
                        help="Run directory (default: <output_dir>/<name>-<run id>)")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")
    parser.add_argument("--verbose", action="store_true", help="DEBUG-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Truth-Maximized Diffusion Classifier experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in ALL_STAGES:
        _add_run_arguments(sub.add_parser(stage, help=f"Run the {stage} stage"))

    run = sub.add_parser("run", help="Run every stage the config declares")
    _add_run_arguments(run)
    run.add_argument("--stages", nargs="+", choices=ALL_STAGES, default=None,
                     help="Run only these stages (pipeline order is kept)")

    sub.add_parser("schema", help="Print the JSON Schema of experiment configs")

    aggregate = sub.add_parser("aggregate", help="Mean/std of accuracies over several runs")
    aggregate.add_argument("run_dirs", type=Path, nargs="+")
    aggregate.add_argument("--output", type=Path, required=True)
    aggregate.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "schema":
        print(json.dumps(ExperimentConfig.model_json_schema(), indent=2, sort_keys=True))
        return EXIT_OK

    setup_logging(args.verbose)

    if args.command == "aggregate":
        from analysis.report import aggregate_runs

        aggregate_runs(args.run_dirs, args.output)
        return EXIT_OK

    try:
        config = load_config(args.config, seed=args.seed)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR

    run_dir = args.run_dir or config.run_dir()
    log_file = add_file_logging(run_dir / RUN_LOG_DIR, args.command)
    logger.info(f"Logging to {log_file}")

    stages = args.stages if args.command == "run" else [args.command]
    try:
        run_experiment(config, run_dir=run_dir, stages=stages,
                       force=args.force, progress=args.progress)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG_ERROR
    except StageError as e:
        logger.error(str(e))
        return EXIT_STAGE_FAILURE

    logger.info(f"Outputs in {run_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
