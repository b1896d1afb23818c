"""Command-line entry point for the experiment runner.

Usage:
    igsmc --experiment uni-infer --seed 1 --out-dir runs/uni
    igsmc --config my_config.json --replicates 5 --threads 2

Flags override values from the JSON config document.
"""

from __future__ import annotations

import argparse
import sys

from .core import IgsmcError
from .experiments import EXPERIMENT_NAMES, load_spec, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="igsmc",
        description="Run SMC sampler experiments with information-geometric kernels.",
    )
    parser.add_argument("--config", metavar="PATH", help="JSON config document")
    parser.add_argument("--experiment", choices=EXPERIMENT_NAMES, help="experiment name")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--out-dir", help="output directory")
    parser.add_argument("--replicates", type=int, help="number of replicates")
    parser.add_argument("--threads", type=int, help="worker processes for replicates")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.config is None and args.experiment is None:
        build_parser().error("provide --experiment and/or --config")
    try:
        spec = load_spec(
            args.config,
            experiment=args.experiment,
            seed=args.seed,
            out_dir=args.out_dir,
            replicates=args.replicates,
            threads=args.threads,
        )
        manifest = run_experiment(spec)
    except (IgsmcError, OSError, ValueError) as exc:
        print(f"igsmc: error: {exc}", file=sys.stderr)
        return 1
    print(f"igsmc: {spec.name} finished; outputs in {spec.out_dir} "
          f"({len(manifest['completed'])} replicates)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
