"""CLI entry point: configure execution and serve jobs on stdio."""

from __future__ import annotations

import argparse
import sys

from .execution import ExecutionConfig
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernel-runner",
        description=(
            "Kernel execution service: reads one JSON job per stdin line, "
            "writes one JSON reply per stdout line"
        ),
    )
    parser.add_argument(
        "--cpu-stub",
        action="store_true",
        help="no-GPU mode: run the full job lifecycle with deterministic "
        "synthetic perf timings",
    )
    parser.add_argument("--device", type=int, default=0, help="CUDA device index")
    parser.add_argument(
        "--tolerance-abs", type=float, default=1e-3,
        help="absolute tolerance for correctness comparisons",
    )
    parser.add_argument(
        "--tolerance-rel", type=float, default=1e-3,
        help="relative tolerance for correctness comparisons",
    )
    parser.add_argument(
        "--allow-custom-timing", action="store_true",
        help="accept perf jobs that deviate from the 3 warmup / 5 iteration "
        "protocol",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = ExecutionConfig(
        cpu_stub=args.cpu_stub,
        device=args.device,
        tolerance_abs=args.tolerance_abs,
        tolerance_rel=args.tolerance_rel,
        allow_custom_timing=args.allow_custom_timing,
    )
    serve(sys.stdin, sys.stdout, config)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
