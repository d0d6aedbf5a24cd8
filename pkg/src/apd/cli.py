"""Command-line entry point: ``apd <experiment> [--config FILE] [--seed N] ...``.

Exit codes: 0 success, 2 config error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import experiments
from .errors import ConfigError, DivergenceError, FormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

HELP = {
    "toy2d": "SGD / SGLD / APD uncertainty on two 2-D clusters, with a grid dump",
    "train-sgld": "train the point estimate and draw the SGLD sample set",
    "distill": "distill the SGLD set into a generator (offline or online)",
    "anomaly": "OOD detection per method, measure and OOD kind",
    "active-learn": "pool-based active learning curves",
    "attack-detect": "gray-box FGSM/PGD detection matrix",
    "gan-compare": "checkpointed AUROC for each GAN loss",
    "mog-sweep": "mixture-of-Gaussians baselines of growing size",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file overriding profile keys")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory for results and artifacts")
    common.add_argument("--profile", choices=sorted(experiments.PROFILES),
                        help="defaults profile (default: the config file's, else desk)")
    common.add_argument("--dry-run", action="store_true", help="validate the config and print the plan")
    parser = argparse.ArgumentParser(prog="apd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in experiments.EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def _summary(result):
    return json.dumps(result.metrics, indent=2, sort_keys=True, default=str)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return exc.code
    try:
        config = experiments.load_config(args.config, args.profile, args.seed)
        if args.dry_run:
            print(f"plan for {args.command} (seed {config['seed']}, profile {args.profile or 'from config'}):")
            for i, step in enumerate(experiments.plan(args.command, config), start=1):
                print(f"  {i}. {step}")
            if args.out:
                print(f"  results -> {args.out}")
            return EXIT_OK
        result = experiments.run(args.command, config, args.out)
    except (ConfigError, FormatError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    print(_summary(result))
    if args.out:
        print(f"results written to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
