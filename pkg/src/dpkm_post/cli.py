"""Command line entry point: ``dpkm-post run | gen | summarize``.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 every cell failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    DatasetError,
    ExperimentConfig,
    gen_blobs,
    read_runs,
    run_experiment,
    summarize,
    write_summary,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ALL_FAILED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for I/O here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N,d,K integers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected N,d,K, got {text!r}")
    return parts


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpkm-post", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run the epsilon sweep")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="numeric CSV, one point per row")
    src.add_argument("--blobs", type=_int_triple, metavar="N,d,K", help="synthetic blob data")
    run.add_argument("--header", action="store_true", help="skip the first CSV line")
    run.add_argument("--spread", type=float, default=0.03, help="blob standard deviation")
    run.add_argument("--k", type=int, help="number of clusters (defaults to the blob K)")
    run.add_argument("--t", type=int, default=5, help="DP-KMEANS iterations")
    run.add_argument("--eps", type=_float_list, default=[0.05, 0.1, 0.2, 0.5, 1.0])
    run.add_argument("--reps", type=int, default=10)
    run.add_argument("--chain-steps", type=int, default=30_000)
    run.add_argument("--delta", type=float, default=0.001, help="proposal variance")
    run.add_argument("--restarts", type=int, default=10, help="Lloyd restarts on the simulated data")
    run.add_argument("--min-sep", type=float, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--out", required=True, help="results directory")
    run.add_argument("--skip-consistency", action="store_true")
    run.add_argument("--no-ball-projection", action="store_true")

    gen = sub.add_parser("gen", help="write a synthetic blob dataset as CSV")
    gen.add_argument("--blobs", type=_int_triple, metavar="N,d,K", required=True)
    gen.add_argument("--spread", type=float, default=0.03)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    summ = sub.add_parser("summarize", help="per-run CSV to summary CSV")
    summ.add_argument("runs")
    summ.add_argument("--out", required=True)
    return parser


def _cmd_run(args) -> int:
    K = args.k if args.k is not None else (args.blobs[2] if args.blobs else None)
    if K is None:
        raise ConfigError("--k is required with --data")
    config = ExperimentConfig(
        K=K, data_path=args.data, blobs=args.blobs, blob_spread=args.spread, header=args.header,
        T=args.t, epsilons=args.eps, repetitions=args.reps, chain_steps=args.chain_steps,
        delta=args.delta, lloyd_restarts=args.restarts, min_sep=args.min_sep, seed=args.seed,
        skip_consistency=args.skip_consistency, ball_projection=not args.no_ball_projection,
        workers=args.workers,
    )
    result = run_experiment(config, out_dir=args.out)
    for row in result.summary:
        print(f"eps={row['epsilon']:g}  n={row['n_ok']}  "
              f"dpkm={row['mean_wcss_dpkm']:.6g}  mcmc={row['mean_wcss_mcmc']:.6g}")
    if all(r.status != "ok" for r in result.records):
        return EXIT_ALL_FAILED
    return EXIT_OK


def _cmd_gen(args) -> int:
    N, d, K = args.blobs
    try:
        data = gen_blobs(N, d, K, args.spread, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in data:
            w.writerow([str(float(v)) for v in row])
    return EXIT_OK


def _cmd_summarize(args) -> int:
    write_summary(summarize(read_runs(args.runs)), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "gen": _cmd_gen, "summarize": _cmd_summarize}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
