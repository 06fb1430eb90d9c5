"""``flowiar`` command line: train, evaluate, plot, ablate, validate-config.

Exit codes: 0 success, 2 validation error, 3 training aborted (checkpoint written).
"""

import argparse
import json
import logging
import sys

from ..errors import CapacityError, ConfigError, ContractViolation, SchemaError, TrainingAborted
from .config import load_spec
from .experiment import ABLATIONS, evaluate_checkpoint, parse_probe, run_ablation, run_spec
from .plotting import X_AXES, plot_runs

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORTED = 3


def build_parser():
    parser = argparse.ArgumentParser(prog="flowiar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every seed of an experiment spec")
    p.add_argument("spec", help="YAML experiment spec")
    p.add_argument("overrides", nargs="*", help="dotted overrides, e.g. train.lr_actor=1e-4 seeds=[0,1]")
    p.add_argument("--output-dir", help="overrides output_dir from the experiment spec")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on fixed-seed episodes")
    p.add_argument("checkpoint")
    p.add_argument("--env", help="environment name (must match the checkpoint)")
    p.add_argument("--n-episodes", type=int, default=10)
    p.add_argument("--probe", action="append", default=[], help="probe allocation like 4,0,3 ('' = initial state)")
    p.add_argument("--probe-samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="mean curve with across-seed band")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--x", dest="x_axis", choices=sorted(X_AXES), default="steps")
    p.add_argument("--y", default="mean_return")
    p.add_argument("--source", choices=("metrics", "updates"), default="metrics")
    p.add_argument("--best-till-now", action="store_true", help="plot the running maximum")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.png and <out>.csv")

    p = sub.add_parser("ablate", help="run a paired ablation of the flow policy")
    p.add_argument("name", choices=sorted(ABLATIONS))
    p.add_argument("spec")
    p.add_argument("overrides", nargs="*")
    p.add_argument("--output-dir")

    p = sub.add_parser("validate-config", help="parse and validate a spec without running it")
    p.add_argument("spec")
    p.add_argument("overrides", nargs="*")
    return parser


def _run(args):
    if args.command == "validate-config":
        spec = load_spec(args.spec, args.overrides)
        print(json.dumps(spec.to_dict(), indent=2))
        return EXIT_OK
    if args.command == "train":
        spec = load_spec(args.spec, args.overrides)
        for outcome in run_spec(spec, args.output_dir):
            print(f"seed {outcome.seed}: {outcome.status} -> {outcome.run_dir}")
        return EXIT_OK
    if args.command == "evaluate":
        probes = [parse_probe(p) for p in args.probe]
        report = evaluate_checkpoint(args.checkpoint, args.env, args.n_episodes, probes, args.probe_samples, args.seed)
        print(json.dumps(report, indent=2))
        return EXIT_OK
    if args.command == "plot":
        png, data = plot_runs(
            args.runs, args.y, args.out, args.x_axis, args.source, "best_till_now" if args.best_till_now else None
        )
        print(f"wrote {png} and {data}")
        return EXIT_OK
    if args.command == "ablate":
        spec = load_spec(args.spec, args.overrides)
        report = run_ablation(args.name, spec, args.output_dir)
        print(json.dumps(report, indent=2))
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, SchemaError, CapacityError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingAborted as exc:
        where = f" (checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"aborted: {exc}{where}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
