import argparse
import logging
import sys
from typing import List, Optional

import torch

from . import __version__
from .config import ExperimentConfig, SweepConfig, load_json, thread_count
from .exceptions import ConfigError, NicaError, NumericalError
from .experiment import cmd_evaluate, cmd_generate, cmd_train
from .sweep import cmd_sweep

log = logging.getLogger("tpnica.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpnica",
        description="Synthetic identifiability experiments for t-process and "
        "Gaussian-process nonlinear ICA",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", help="JSON config document")
        sub.add_argument("--out", help="Output directory (overrides the config's out_dir)")
        sub.add_argument("--seed", type=int, help="Experiment seed")
        sub.add_argument("--force", action="store_true", help="Overwrite an existing output directory")

    generate = commands.add_parser("generate", help="Sample a synthetic dataset")
    common(generate)

    train = commands.add_parser("train", help="Fit tp-NICA or gp-NICA to a dataset")
    common(train)
    train.add_argument("--dataset", required=True, help="Directory written by 'generate'")
    train.add_argument("--model", choices=["tp", "gp"], help="Model kind")
    train.add_argument("--resume", help="Checkpoint directory to continue from")

    evaluate = commands.add_parser("evaluate", help="Score a trained model with MCC")
    common(evaluate)
    evaluate.add_argument("--dataset", required=True, help="Directory written by 'generate'")
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="Checkpoint directory written by 'train'")
    source.add_argument(
        "--self-check",
        action="store_true",
        help="Score the ground-truth components as their own estimate",
    )
    evaluate.add_argument(
        "--no-samples",
        action="store_true",
        help="Skip writing the sampled posterior components",
    )

    sweep = commands.add_parser("sweep", help="Run a grid of experiments and aggregate MCC")
    common(sweep)
    sweep.add_argument("--use-threads", action="store_true", help="Run cells on threads")
    return parser


def _experiment_config(args) -> ExperimentConfig:
    document = load_json(args.config) if args.config else {}
    config = ExperimentConfig.from_dict(document)
    return config.with_overrides(
        seed=args.seed,
        model_kind=getattr(args, "model", None),
        out_dir=args.out,
    )


def _out_dir(args, config_out: Optional[str]) -> str:
    out = args.out or config_out
    if not out:
        raise ConfigError("No output directory: pass --out or set out_dir in the config")
    return out


def run(args) -> int:
    if args.command == "generate":
        config = _experiment_config(args)
        cmd_generate(config, _out_dir(args, config.out_dir), force=args.force)

    elif args.command == "train":
        config = _experiment_config(args)
        result = cmd_train(
            config,
            args.dataset,
            _out_dir(args, config.out_dir),
            force=args.force,
            resume=args.resume,
        )
        log.info("Final checkpoint: {}".format(result.checkpoint))

    elif args.command == "evaluate":
        # without --config the self-check scores against the dataset's own config
        config = _experiment_config(args) if args.self_check and args.config else None
        cmd_evaluate(
            args.checkpoint,
            args.dataset,
            _out_dir(args, config.out_dir if config else None),
            force=args.force,
            config=config,
            samples=not args.no_samples,
        )

    elif args.command == "sweep":
        document = load_json(args.config) if args.config else {}
        config = SweepConfig.from_dict(document)
        runner = cmd_sweep(
            config,
            _out_dir(args, config.base.out_dir),
            force=args.force,
            seed=args.seed,
            use_threads=args.use_threads,
        )
        if runner.failures:
            log.warning("{} sweep cells failed, see failures.csv".format(len(runner.failures)))

    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        torch.set_num_threads(thread_count())
        return run(args)
    except NumericalError as e:
        log.error("Numerical failure: {}".format(e))
        return EXIT_NUMERICAL
    except ConfigError as e:
        log.error("Configuration error: {}".format(e))
        return EXIT_CONFIG
    except NicaError as e:
        log.error("{}: {}".format(type(e).__name__, e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
