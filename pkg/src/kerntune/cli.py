"""Command-line entry points: subset sampling and results analysis."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, bench
from .errors import KernTuneError


def _cmd_sample_subset(args: argparse.Namespace) -> int:
    result = bench.ingest_corpus(Path(args.corpus))
    if args.skip_report:
        Path(args.skip_report).write_text(result.render_skip_report())
    stratification = bench.stratify(result.cases)
    selection = bench.sample_subset(stratification, args.seed)
    print(f"# seed={selection.seed} corpus={args.corpus} "
          f"cases={len(result.cases)} skipped={len(result.skipped)}")
    for bin_name, ids in selection.central_picks:
        for case_id in ids:
            print(f"{bin_name}\t{case_id}")
    for case_id in selection.tail_low_picks:
        print(f"tail_low\t{case_id}")
    for case_id in selection.tail_high_picks:
        print(f"tail_high\t{case_id}")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    records = analysis.load_ledger(Path(args.ledger))
    exclude = set(args.exclude.split(",")) if args.exclude else set()
    records = [r for r in records if r.case_id not in exclude]
    summary = analysis.aggregate(records)
    histogram = analysis.speedup_histogram(
        records, bin_width=args.bin_width, cap=args.cap
    )
    cdf = analysis.speedup_cdf(records)
    rounds = analysis.success_by_rounds(records)
    length_stats = analysis.length_ratio_stats(records)

    correlations = []
    pairs = (
        ("rounds_vs_length_ratio", [float(r.rounds_used) for r in records],
         [r.length_ratio for r in records]),
        ("length_ratio_vs_speedup", [r.length_ratio for r in records],
         [r.speedup for r in records]),
    )
    for name, xs, ys in pairs:
        try:
            rho, p_value = analysis.spearman(xs, ys)
        except KernTuneError:
            continue
        correlations.append(
            analysis.CorrelationResult(name=name, n=len(xs), rho=rho, p_value=p_value)
        )

    files = analysis.emit_report(
        summary, histogram, cdf, rounds, length_stats, correlations, Path(args.out)
    )
    for path in files:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kerntune",
        description="Profiling-guided kernel optimization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sample = sub.add_parser(
        "sample-subset",
        help="print the deterministic 36-case evaluation subset for a corpus",
    )
    sample.add_argument("corpus", help="corpus root directory")
    sample.add_argument("--seed", type=int, default=0, help="sampling seed")
    sample.add_argument(
        "--skip-report", default="",
        help="also write the structured skip report (JSONL) to this path",
    )
    sample.set_defaults(func=_cmd_sample_subset)

    analyze = sub.add_parser(
        "analyze", help="aggregate a results ledger into CSV tables"
    )
    analyze.add_argument("--ledger", required=True, help="JSONL results ledger")
    analyze.add_argument("--out", required=True, help="output directory")
    analyze.add_argument(
        "--exclude", default="", help="comma-separated case ids to drop"
    )
    analyze.add_argument(
        "--cap", type=float, default=10.0,
        help="histogram outlier cap (speedups above it are counted separately)",
    )
    analyze.add_argument("--bin-width", type=float, default=0.25)
    analyze.set_defaults(func=_cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KernTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
