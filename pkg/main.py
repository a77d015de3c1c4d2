#!/usr/bin/env python3
"""
MoE Expert Placement Simulator - Command Line Entry Point
=========================================================

Commands:
  gen-trace     write a synthetic routing trace
  analyze       similarity heatmap, unique experts per step, top-B drift
  optimize-tau  refresh-interval cost curve and optimum
  simulate      run one placement policy over trace blocks
  compare       policy / budget / block-size comparison grid
  fit-profile   fit a hardware profile from profiling measurements
  replay        re-run a command from its manifest

Exit codes: 0 ok, 2 usage or validation error, 3 I/O error.
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError as RequestValidationError

from routers import COMMANDS, run_command
from routers.common import flag_name
from utils import __version__
from utils.config import check_log_level, config_manager
from utils.errors import MoESimError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3

_GLOBAL_KEYS = {"command", "config", "log_level"}


def _add_profile_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("hardware profile")
    group.add_argument("--profile", help="Profile file (c_io=..., c_cpu=..., c_gpu=..., io_overlap=...)")
    group.add_argument("--c-io", type=float, help="Time per expert migration")
    group.add_argument("--c-cpu", type=float, help="Time per CPU (token, expert) pair")
    group.add_argument("--c-gpu", type=float, help="Time per GPU (token, expert) pair")
    group.add_argument("--io-overlap", action="store_true", default=None, help="Overlap migration with compute")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moe-placement-sim",
        description="Trace-driven simulator for MoE expert placement in diffusion-LLM decoding",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="Optional key=value config file (flags win)")
    parser.add_argument("--log-level", help="Logging level (default from MOE_SIM_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="Generate a synthetic routing trace")
    p.add_argument("--experts", type=int, help="Experts per layer (E)")
    p.add_argument("--topk", type=int, help="Experts per token (k)")
    p.add_argument("--tokens", type=int, help="Tokens per block (N)")
    p.add_argument("--steps", type=int, help="Denoising steps per block (T)")
    p.add_argument("--layers", type=int, help="MoE layers (L)")
    p.add_argument("--budget", type=int, help="GPU budget recorded in the trace header (B)")
    p.add_argument("--persistence", type=float, help="Probability a token keeps each expert")
    p.add_argument("--skew", type=float, help="Zipf exponent of fresh expert draws")
    p.add_argument("--seed", type=int, help="Generator seed (default MOE_SIM_SEED)")
    p.add_argument("--decode-fraction", type=float, help="Freeze tokens on a geometric decode schedule")
    p.add_argument("--drop-decoded", action="store_true", default=None, help="Decoded tokens stop routing")
    p.add_argument("--mask-affinity", type=float, help="Share of still-masked draws from a per-layer mask ranking (default 0.9 with --decode-fraction, else 0)")
    p.add_argument("-o", "--output", help="Trace path (.tracebin for binary)")

    p = sub.add_parser("analyze", help="Similarity, unique experts and drift of a trace")
    p.add_argument("trace", nargs="?", help="Trace file")
    p.add_argument("--layer", type=int, help="Layer to analyze (default: mean over layers)")
    p.add_argument("--budget", type=int, help="Include the top-B drift series")
    p.add_argument("--band", type=int, help="Step offset for the band similarity summary")
    p.add_argument("-o", "--output-dir", help="Directory for CSV/JSON outputs")

    p = sub.add_parser("optimize-tau", help="Choose the refresh interval")
    p.add_argument("--mode", choices=["analytic", "simulated"])
    p.add_argument("--trace", help="Trace to measure drift from or to simulate")
    p.add_argument("--d", type=float, help="Mean drift rate (analytic mode without trace)")
    p.add_argument("--budget", type=int, help="GPU budget B")
    p.add_argument("--steps", type=int, help="Block size T (analytic mode without trace)")
    p.add_argument("--f-mode", choices=["closed", "empirical"], help="Miss-growth function")
    p.add_argument("--miss-unit", choices=["pairs", "experts"], help="Empirical miss unit")
    p.add_argument("--drift-series", action="store_true", default=None, help="Use per-step drift")
    p.add_argument("--cold-start", choices=["first-b", "oracle-step0"])
    p.add_argument("--decode-fraction", type=float)
    p.add_argument("--jobs", type=int, help="Worker threads (default MOE_SIM_JOBS)")
    p.add_argument("-o", "--output", help="Cost curve CSV")
    _add_profile_flags(p)

    p = sub.add_parser("simulate", help="Simulate one placement policy")
    p.add_argument("--trace", action="append", help="Trace file; repeat for consecutive blocks")
    p.add_argument("--policy", choices=["tide", "perstep", "static"])
    p.add_argument("--tau", type=int, help="Refresh interval for tide")
    p.add_argument("--cold-start", choices=["first-b", "oracle-step0"])
    p.add_argument("--counter-mode", choices=["windowed", "block", "global"])
    p.add_argument("--refresh-mode", choices=["observed", "oracle"])
    p.add_argument("--budget", type=int, help="Override the trace's GPU budget")
    p.add_argument("--decode-fraction", type=float)
    p.add_argument("--carry-counters", action="store_true", default=None)
    p.add_argument("-o", "--output", help="Per-step CSV")
    p.add_argument("--json-output", help="Full JSON report")
    p.add_argument("--decisions-output", help="JSON-lines placement decisions")
    _add_profile_flags(p)

    p = sub.add_parser("compare", help="Compare policies over budgets and traces")
    p.add_argument("--trace", action="append", help="Trace file; repeat for a block-size grid")
    p.add_argument("--policies", help="e.g. perstep,static@first-b,tide:4,tide:auto")
    p.add_argument("--budgets", help="Comma-separated GPU budgets")
    p.add_argument("--baseline", type=int, help="Index of the baseline policy")
    p.add_argument("--cold-start", choices=["first-b", "oracle-step0"])
    p.add_argument("--decode-fraction", type=float)
    p.add_argument("--decode-fractions", help="Comma-separated decode fractions; decoded tokens stop routing")
    p.add_argument("--jobs", type=int, help="Worker threads (default MOE_SIM_JOBS)")
    p.add_argument("-o", "--output", help="Comparison CSV")
    p.add_argument("--log-output", help="JSON run log")
    _add_profile_flags(p)

    p = sub.add_parser("fit-profile", help="Fit a hardware profile")
    p.add_argument("--measurements", help="CSV with device,amount,time")
    p.add_argument("--synthetic-c-io", type=float)
    p.add_argument("--synthetic-c-cpu", type=float)
    p.add_argument("--synthetic-c-gpu", type=float)
    p.add_argument("--noise", type=float, help="Uniform multiplicative noise of synthetic samples")
    p.add_argument("--seed", type=int)
    p.add_argument("--io-overlap", action="store_true", default=None)
    p.add_argument("--measurements-out", help="Also write the synthetic samples")
    p.add_argument("-o", "--output", help="Profile file")

    p = sub.add_parser("replay", help="Re-run a command from its manifest")
    p.add_argument("manifest", help="Manifest written beside an output")
    p.add_argument("--verify", action="store_true", default=None, help="Fail unless outputs are identical")

    return parser


def configure_logging(level: Optional[str] = None) -> None:
    """Flag level, else MOE_SIM_LOG_LEVEL; reading settings may raise ValidationError."""
    logging.basicConfig(
        level=check_log_level("--log-level", level) if level else config_manager.settings.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def build_payload(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags over config file values, then environment defaults."""
    flags = {k: v for k, v in vars(args).items() if k not in _GLOBAL_KEYS}
    payload = config_manager.resolve(flags, args.config)
    fields = COMMANDS[args.command][0].model_fields
    settings = config_manager.settings
    if "jobs" in fields:
        payload.setdefault("jobs", settings.jobs)
    if "output_dir" in fields:
        payload.setdefault("output_dir", settings.output_dir)
    return payload


def format_request_errors(error: RequestValidationError) -> List[str]:
    messages = []
    for item in error.errors():
        loc = item.get("loc") or ()
        where = flag_name(str(loc[0])) if loc else "arguments"
        messages.append(f"{where}: {item.get('msg')}")
    return messages


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        configure_logging(args.log_level)
        result = run_command(args.command, build_payload(args))
    except RequestValidationError as e:
        for message in format_request_errors(e):
            print(f"❌ {message}", file=sys.stderr)
        return EXIT_VALIDATION
    except MoESimError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_IO

    for line in result.lines:
        print(line)
    for path in result.outputs:
        print(f"💾 {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
