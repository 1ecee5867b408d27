"""Command-line entry point: run experiments, emit reports, collect garbage.

Exit code 0 on success; failures print a machine-readable JSON error record
to stderr and exit nonzero.
"""

# Pin BLAS threading before numpy loads anywhere in this process: wall-clock
# comparisons between sequential and multiagent runs assume one thread per
# worker.
import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "BLIS_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import load_experiment_config
from .coordinator import run_experiment
from .errors import PathforgeError, StoreError
from .report import emit_report
from .store import SystemStore


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathforge",
        description="Evolve a shared multitask system with asynchronous "
                    "per-task agents (or a sequential baseline).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a config file")
    run_p.add_argument("--config", required=True, help="experiment config JSON")
    run_p.add_argument("--mode", choices=["sequential", "multiagent"],
                       help="override the config's execution mode")
    run_p.add_argument("--processes", action="store_true",
                       help="run each agent as a separate OS process")
    run_p.add_argument("--equal-budget", action="store_true",
                       help="force identical training budgets across agents")
    run_p.add_argument("--store", metavar="DIR",
                       help="override the workspace directory")
    run_p.add_argument("--seed", type=int, help="override the master seed")
    run_p.add_argument("--iterations", type=int,
                       help="override the task-set iteration count")
    run_p.add_argument("--repetitions", type=int,
                       help="override the repetition count")

    report_p = sub.add_parser("report", help="render CSVs and figures from runs")
    report_p.add_argument("--runs", nargs="+", required=True, metavar="DIR",
                          help="one or more run workspace directories")
    report_p.add_argument("--out", default="report", metavar="DIR",
                          help="output directory (default: ./report)")

    gc_p = sub.add_parser("gc", help="offline store cleanup (never run while "
                                     "agents are active)")
    gc_p.add_argument("--store", required=True, metavar="DIR",
                      help="store directory (contains manifest.json)")
    return parser


def _run(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.processes:
        overrides["processes"] = True
    if args.equal_budget:
        overrides["equal_budget"] = True
    if args.store is not None:
        overrides["workspace"] = args.store
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.repetitions is not None:
        overrides["repetitions"] = args.repetitions
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    workspace = run_experiment(cfg)
    print(json.dumps({"workspace": str(workspace),
                      "repetitions": cfg.repetitions,
                      "mode": cfg.mode}))
    return 0


def _report(args: argparse.Namespace) -> int:
    written = emit_report(list(args.runs), args.out)
    print(json.dumps({"out": str(Path(args.out)),
                      "files": [p.name for p in written]}))
    return 0


def _gc(args: argparse.Namespace) -> int:
    store = SystemStore(args.store)
    if not (store.root / "manifest.json").is_file():
        raise StoreError(f"{args.store} is not a store (no manifest.json)")
    stats = store.gc()
    print(json.dumps(stats, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": _run, "report": _report, "gc": _gc}
    try:
        return handlers[args.command](args)
    except PathforgeError as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        if hasattr(exc, "missing"):
            record["missing"] = list(exc.missing)
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
