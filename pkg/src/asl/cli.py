"""Command line entry point: ``asl <stage> --config PATH --run DIR [--seed U64]``.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import gradcheck, gradcore
from .pipeline import MAX_SEED, STAGES, ConfigError, RunLocked, load_config, run_stage
from .segmodel import FormatError

log = logging.getLogger("asl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asl", description="Anomaly segmentation with synthetic unknowns.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="sectioned key = value config file")
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--seed", type=_seed, help="master seed, overrides [run] seed")
    p = sub.add_parser("gradcheck", help="finite-difference check of every autodiff primitive")
    p.add_argument("--config", help="accepted for symmetry; unused")
    p.add_argument("--run", help="accepted for symmetry; unused")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--graphs", type=int, default=6, help="random graphs per primitive")
    p.add_argument("--primitives", help="comma-separated subset; an empty string checks nothing")
    # test mode: corrupt one primitive's vector-Jacobian product to prove the check bites
    p.add_argument("--inject-fault", metavar="PRIMITIVE", help=argparse.SUPPRESS)
    return parser


def _corrupt(primitive: str):
    if primitive not in gradcore.PRIMITIVES:
        raise ConfigError(f"unknown primitive {primitive!r}")
    fwd, vjp = gradcore.PRIMITIVES[primitive]

    def wrong(g, vals, out, attrs):
        return tuple(None if x is None else 1.5 * x + 0.1 for x in vjp(g, vals, out, attrs))

    gradcore.PRIMITIVES[primitive] = (fwd, wrong)
    return fwd, vjp


def cmd_gradcheck(args) -> int:
    prims = None
    if args.primitives is not None:
        prims = [p.strip() for p in args.primitives.split(",") if p.strip()]
        unknown = sorted(set(prims) - set(gradcheck.CASES))
        if unknown:
            raise ConfigError(f"unknown primitive(s): {', '.join(unknown)}")
    if args.graphs < 1:
        raise ConfigError("--graphs must be at least 1")
    saved = _corrupt(args.inject_fault) if args.inject_fault else None
    try:
        report = gradcheck.run_suite(prims, args.graphs, seed=args.seed)
    finally:
        if saved:
            gradcore.PRIMITIVES[args.inject_fault] = saved
    for name, err in sorted(report.per_primitive.items()):
        print(f"{name:12s} {err:.3e}")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: {report.graphs} graphs, max relative error {report.max_error:.3e} "
          f"(tolerance {gradcheck.TOLERANCE:g}), {report.seconds:.2f} s")
    return EXIT_OK if report.passed else EXIT_FAIL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = load_config(args.config, args.seed)
        run_stage(args.command, args.run, cfg)
    except ConfigError as exc:
        print(f"asl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"asl {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError, RuntimeError, ArithmeticError, RunLocked) as exc:
        print(f"asl {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
