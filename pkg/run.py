# run.py
import argparse
import logging
import os
import sys

from app.errors import ConfigError
from app.services.config_service import load_config, with_overrides
from app.workers.experiment_worker import ExperimentWorker
from app.workers.study_worker import StudyWorker

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2


def parse_args(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config/config.yaml", help="Path to config file")
    common.add_argument("--seed", type=int, help="Override run.seed")
    common.add_argument("--out", help="Override run.out_dir")
    common.add_argument("--repeat", type=int, default=1, help="Number of seeds (seed, seed+1, ...)")

    parser = argparse.ArgumentParser(description="Multi-source domain adaptation lab")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("train", parents=[common], help="Train the configured mode")

    sweep = commands.add_parser("sweep", parents=[common], help="Sweep one loss weight, or run a search preset")
    sweep.add_argument("--param", help="mu_d, mu_s, mu_c or tau (bare or dotted)")
    sweep.add_argument("--values", type=float, nargs="*", default=[], help="Values to try")
    sweep.add_argument("--preset", choices=["cv"], help="cv: random search scored on held-out sources")

    overtrain = commands.add_parser("overtrain", parents=[common], help="Over-training stability study")
    overtrain.add_argument("--epochs", type=int, default=60, help="Epoch budget (at least 30)")

    bound = commands.add_parser("bound", parents=[common], help="Write the target-risk bound report")
    bound.add_argument("--alpha", choices=["from_checkpoint", "uniform", "explicit"], default="from_checkpoint",
                       help="Where the mixture weights come from")
    bound.add_argument("--alpha-values", type=float, nargs="*", help="Weights for --alpha explicit")
    bound.add_argument("--checkpoint", help="Model checkpoint (defaults to the configured run)")
    bound.add_argument("--with-lambda", action="store_true", help="Estimate lambda with oracle target labels")

    commands.add_parser("generate", parents=[common], help="Write the synthetic domains as CSV files")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)

    config_path = os.path.abspath(args.config)
    if not os.path.exists(config_path):
        print(f"Error: Config file not found at {config_path}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        config = load_config(config_path)
        overrides = {}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.out is not None:
            overrides["run.out_dir"] = args.out
        if overrides:
            config = with_overrides(config, overrides)
        if args.repeat < 1:
            raise ConfigError(f"--repeat must be at least 1, got {args.repeat}")

        if args.command == "train":
            worker = ExperimentWorker(config)
            records = [worker.run_experiment()] if args.repeat == 1 else worker.run_batch(args.repeat)
            return EXIT_FAILURE if any(r.status == "failed" for r in records) else EXIT_OK

        worker = StudyWorker(config)
        if args.command == "sweep":
            if args.preset == "cv":
                worker.cross_validate()
            else:
                if not args.param:
                    raise ConfigError("sweep needs --param or --preset")
                worker.sweep(args.param, args.values, args.repeat)
        elif args.command == "overtrain":
            worker.overtrain_study(args.epochs, args.repeat)
        elif args.command == "bound":
            worker.bound_report(args.alpha, args.alpha_values, args.checkpoint, args.with_lambda)
        elif args.command == "generate":
            worker.generate()
        return EXIT_OK

    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logging.getLogger(__name__).error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
