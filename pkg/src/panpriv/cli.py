"""Command-line entry point: ``panpriv run | intrude | lowerbound | reduce-pke``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import crypto
from .errors import PanPrivError
from .sim import (
    ExperimentConfig,
    parse_bits,
    rows_to_csv,
    run_experiment,
    run_gap_table,
    run_intrusion_check,
    run_lowerbound_table,
    run_reduction_demo,
    to_jsonable,
)
from .twoserver import MERSENNE61


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _eps0(text: str) -> float:
    return math.inf if text.lower() in ("inf", "infinity") else float(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", type=Path, help="write output here instead of stdout")
    p.add_argument("--format", choices=("json", "csv"), default=None, help="output format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panpriv", description="Locally pan-private telemetry simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an end-to-end experiment")
    run.add_argument("--protocol", choices=("count", "histogram", "mean", "count-2s"), default="count")
    run.add_argument("--model", choices=("single", "two-server"), default="single",
                     help="two-server turns --protocol count into count-2s")
    run.add_argument("--n", type=int, default=1000, help="number of clients")
    run.add_argument("--T", type=int, default=20, help="stream length")
    run.add_argument("--k", type=int, default=8, help="histogram / clipping bound")
    run.add_argument("--eps0", type=_eps0, help="local randomized-response parameter (or 'inf')")
    run.add_argument("--eps", type=float, help="aggregator-model epsilon")
    run.add_argument("--delta", type=float, help="aggregator-model delta")
    run.add_argument("--variance", type=float, help="per-client discrete Gaussian variance (mean protocol)")
    run.add_argument("--group", choices=sorted(crypto.GROUPS), default="test65521")
    run.add_argument("--field", type=int, default=MERSENNE61, help="prime field modulus for count-2s")
    run.add_argument("--stream", default="bernoulli:0.05",
                     help="bernoulli:Q | at-most-one:Q | fixed-count:M | file:PATH")
    run.add_argument("--trials", type=int, default=1)
    run.add_argument("--fresh-enc", dest="fresh_enc", action="store_true", default=None,
                     help="replace Rerandomize^t(enc(b)) with enc(b)")
    run.add_argument("--literal", dest="fresh_enc", action="store_false",
                     help="apply Rerandomize^t literally")
    run.add_argument("--timing", action="store_true", help="include wall-clock time (breaks byte determinism)")
    _common(run)

    intr = sub.add_parser("intrude", help="compare the state traces of two streams")
    intr.add_argument("--protocol", choices=("count", "histogram", "mean", "count-2s", "count-leaky"), default="count")
    intr.add_argument("--streams", nargs=2, metavar=("A", "B"), required=True, help="two bit strings, e.g. 01 10")
    intr.add_argument("--group", choices=sorted(crypto.GROUPS), default="test65521")
    intr.add_argument("--exact-group", choices=("test11", "test101"), default="test11")
    intr.add_argument("--k", type=int, default=4)
    intr.add_argument("--fresh-enc", dest="fresh_enc", action="store_true", default=None)
    _common(intr)

    lb = sub.add_parser("lowerbound", help="TV table and baseline-versus-encrypted gap table")
    lb.add_argument("--T", type=_int_list, default=[2, 4, 16, 64, 256], help="comma-separated horizons")
    lb.add_argument("--eps", type=_float_list, default=[1.0], help="comma-separated epsilons")
    lb.add_argument("--trials", type=int, default=10_000)
    lb.add_argument("--gap", action="store_true", help="emit the CountNonZero error gap table instead")
    lb.add_argument("--n", type=int, default=10_000, help="clients for the gap table")
    lb.add_argument("--group", choices=sorted(crypto.GROUPS), default="test65521")
    _common(lb)

    red = sub.add_parser("reduce-pke", help="bit encryption from the CountNonZero pipeline")
    red.add_argument("--n", type=int, default=200)
    red.add_argument("--T", type=int, default=10)
    red.add_argument("--eps0", type=_eps0, default=math.inf)
    red.add_argument("--trials", type=int, default=100)
    red.add_argument("--group", choices=sorted(crypto.GROUPS), default="test65521")
    _common(red)
    return parser


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def _dump(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            protocol = "count-2s" if args.model == "two-server" and args.protocol == "count" else args.protocol
            cfg = ExperimentConfig(
                protocol=protocol, n=args.n, T=args.T, k=args.k, eps0=args.eps0, eps=args.eps,
                delta=args.delta, variance=args.variance, group=args.group, field=args.field,
                stream=args.stream, seed=args.seed, trials=args.trials, fresh_enc=args.fresh_enc,
                timing=args.timing,
            )
            result = run_experiment(cfg)
            _emit(result.to_csv() if args.format == "csv" else result.to_json(), args.out)
            return 0
        if args.command == "intrude":
            report = run_intrusion_check(
                args.protocol, parse_bits(args.streams[0]), parse_bits(args.streams[1]),
                group=args.group, k=args.k, seed=args.seed, fresh_enc=args.fresh_enc,
                exact_group=args.exact_group,
            )
            _emit(_dump(report), args.out)
            return 0 if report["passed"] else 1
        if args.command == "lowerbound":
            if args.gap:
                rows = []
                for eps in args.eps:
                    rows += run_gap_table(args.n, args.T, eps, trials=args.trials, seed=args.seed, group=args.group)
            else:
                rows = run_lowerbound_table(args.T, args.eps, trials=args.trials, seed=args.seed)
            _emit(_dump(rows) if args.format == "json" else rows_to_csv(rows), args.out)
            return 0
        if args.command == "reduce-pke":
            report = run_reduction_demo(args.n, args.T, args.eps0, args.trials, seed=args.seed, group=args.group)
            _emit(_dump(report), args.out)
            return 0
    except PanPrivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
