#!/usr/bin/env python3
"""Command-line entry point: generate | train | eval | ablate | plot"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import Config, RunConfig
from errors import ConfigurationError, DataError, ILNetError, NumericFailure
from plotting import write_svg
from predictor_service import PredictorService
from scene import load_scenario
from storage import load_prediction

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="ilnet", description="Multi-agent trajectory prediction toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="write a synthetic train/val dataset")
    _add_config_flags(generate)
    generate.add_argument("--out", type=Path, help="dataset directory")

    train = commands.add_parser("train", help="train a model on a dataset")
    _add_config_flags(train)
    train.add_argument("--data", type=Path, help="dataset directory")
    train.add_argument("--out", type=Path, help="run directory")
    train.add_argument("--task", choices=("joint", "marginal"))
    train.add_argument("--resume", action="store_true", help="continue from checkpoints/last")

    evaluate = commands.add_parser("eval", help="evaluate a trained run")
    _add_config_flags(evaluate)
    evaluate.add_argument("--out", type=Path, required=True, help="run directory")
    evaluate.add_argument("--data", type=Path, help="dataset directory")
    evaluate.add_argument("--split", choices=("train", "val"), default="val")
    evaluate.add_argument("--checkpoint", choices=("best", "last"), default="best")
    evaluate.add_argument("--task", choices=("joint", "marginal"))
    evaluate.add_argument("--mask-ratio", type=float)
    evaluate.add_argument("--challenging", action="store_true", help="restrict to the challenging subset")
    evaluate.add_argument("--dump-predictions", action="store_true", help="write predictions/<id>.json")

    ablate = commands.add_parser("ablate", help="run the ablation grid")
    _add_config_flags(ablate)
    ablate.add_argument("--data", type=Path, help="dataset directory")
    ablate.add_argument("--out", type=Path, help="ablation output directory")

    plot = commands.add_parser("plot", help="render a scenario and its predictions as SVG")
    plot.add_argument("--scenario", type=Path, required=True)
    plot.add_argument("--predictions", type=Path)
    plot.add_argument("--out", type=Path, required=True, help="SVG file")

    return parser.parse_args(argv)


def _build_config(args: argparse.Namespace, default_file: Optional[Path] = None) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "task", None):
        overrides.append(f"task={args.task}")
    if getattr(args, "mask_ratio", None) is not None:
        overrides.append(f"mask_ratio={args.mask_ratio}")
    if getattr(args, "data", None) is not None:
        overrides.append(f"data_dir={args.data}")
    path = args.config or default_file
    return RunConfig.load(str(path) if path else None, overrides)


def run(args: argparse.Namespace) -> int:
    if args.command == "plot":
        record = load_prediction(args.predictions) if args.predictions else None
        write_svg(load_scenario(args.scenario), record, args.out)
        return EXIT_OK

    if args.command == "eval":
        config = _build_config(args, args.out / "config.json")
        service = PredictorService(config)
        report = service.evaluate(args.out, split=args.split, checkpoint=args.checkpoint,
                                  challenging=args.challenging, dump_predictions=args.dump_predictions)
        print(report.to_text(), end="")
        return EXIT_OK

    config = _build_config(args)
    service = PredictorService(config)
    if args.command == "generate":
        service.generate_dataset(args.out or config.data_dir)
    elif args.command == "train":
        out = args.out or Path(Config.RUNS_DIR) / f"run_seed{config.seed}"
        service.train(out, resume=args.resume)
    elif args.command == "ablate":
        summary = service.ablate(args.out or Path(Config.RUNS_DIR) / "ablation")
        print(summary.to_string(index=False))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format=Config.LOG_FORMAT
    )
    try:
        args = _parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        Config.validate()
        return run(args)
    except NumericFailure as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (ILNetError, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except ValueError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
