"""``ensemble-sampling run <spec> [--out DIR] [--plot] [--seeds-override CSV] [--parallel N]``.

Exit status: 0 when every episode succeeded, 1 when any episode failed,
2 for an invalid spec or invalid arguments.
"""
from __future__ import annotations

import argparse
import sys

from . import kernels
from .bench import default_output_dir, parse_spec, run_suite
from .errors import SpecError

EXIT_OK, EXIT_EPISODE_FAILED, EXIT_SPEC_ERROR = 0, 1, 2


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 or s >= 2 ** 64 for s in seeds) or len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError("seeds must be distinct integers in [0, 2^64)")
    return seeds


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return n


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_SPEC_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ensemble-sampling", description="Seeded ensemble-sampling bandit benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run an experiment suite")
    run.add_argument("spec", help="path to the YAML suite spec")
    run.add_argument("--out", help="output directory (default: $ENSEMBLE_SAMPLING_OUT, "
                                   "then the spec's output_dir, then ./results)")
    run.add_argument("--plot", action="store_true", help="write regret.svg per experiment")
    run.add_argument("--seeds-override", type=_seed_list, metavar="CSV",
                     help="comma-separated seeds replacing the spec's list")
    run.add_argument("--parallel", type=_positive, default=1, metavar="N",
                     help="worker processes across episodes (default 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = parse_spec(args.spec)
    except SpecError as exc:
        where = args.spec
        if exc.line is not None:
            where += f":{exc.line}:{exc.column}"
        print(f"{where}: {exc}", file=sys.stderr)
        return EXIT_SPEC_ERROR
    out = default_output_dir(spec, args.out)
    result = run_suite(spec, out, parallel=args.parallel, plot=args.plot or spec.plot,
                       seeds=args.seeds_override)
    n = len(result.episodes)
    print(f"{n - len(result.failures)}/{n} episodes ok ({kernels.BACKEND} kernels) -> {out}")
    for fail in result.failures:
        print(f"FAILED {fail.experiment}/{fail.agent} seed {fail.seed}: {fail.error}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
