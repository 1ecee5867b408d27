"""Agent worker entry point, shared by thread workers and spawned processes.

The environment pinning below must happen before numpy loads in a spawned
worker: agents time their own compute, and BLAS-level threading would let a
"sequential" baseline secretly parallelize, corrupting every speedup
measurement.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "BLIS_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import json
import sys
import time
import traceback
from pathlib import Path

from .errors import BarrierTimeout
from .evolution import AgentConfig, TrainBudget, run_agent
from .store import SystemStore
from .tasks import Task, TaskSpec, generate_task, load_csv_task


def rebuild_task(task_args: dict) -> Task:
    if task_args["kind"] == "family":
        return generate_task(TaskSpec(**task_args["spec"]))
    if task_args["kind"] == "csv":
        return load_csv_task(
            task_args["task_id"],
            task_args["train_csv"],
            task_args["val_csv"],
            task_args["test_csv"],
        )
    raise ValueError(f"unknown task kind {task_args['kind']!r}")


def agent_main(args: dict) -> list[dict]:
    """Run one agent to completion; returns per-iteration result records.

    Writes results to ``<run_dir>/agents/<task>.json`` and appends
    start/complete events (wall-clock nanoseconds) to the agent's event log,
    so process workers and thread workers report identically.
    """
    task = rebuild_task(args["task"])
    cfg = AgentConfig(
        task_id=args["task_id"],
        generations_per_iteration=args["generations_per_iteration"],
        samples_per_generation=args["samples_per_generation"],
        budget=TrainBudget(args["budget_epochs"], args["budget_samples_cap"]),
        cost_scale=args["cost_scale"],
        rng_seed=args["rng_seed"],
        sample_workers=args.get("sample_workers", 1),
    )
    store = SystemStore(args["store_dir"])
    run_dir = Path(args["run_dir"])
    agents_dir = run_dir / "agents"
    agents_dir.mkdir(parents=True, exist_ok=True)
    event_path = agents_dir / f"{cfg.task_id}.events.jsonl"

    def on_event(kind: str, iteration: int) -> None:
        line = json.dumps({
            "event": kind,
            "agent": cfg.task_id,
            "iteration": iteration,
            "t_ns": time.time_ns(),
        }, sort_keys=True)
        with open(event_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    results = run_agent(
        cfg, task, store,
        num_iterations=args["num_iterations"],
        barrier_timeout_s=args["barrier_timeout_s"],
        on_event=on_event,
    )
    records = [r.to_record() for r in results]
    out = agents_dir / f"{cfg.task_id}.json"
    out.write_text(
        json.dumps({"task_id": cfg.task_id, "results": records}, sort_keys=True),
        encoding="utf-8",
    )
    return records


def agent_process_entry(args: dict) -> None:
    """Spawned-process wrapper: report failures via an error file + exit code."""
    try:
        agent_main(args)
    except BaseException as exc:  # noqa: BLE001 - must surface everything
        err = {
            "error": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
        }
        if isinstance(exc, BarrierTimeout):
            err["missing"] = list(exc.missing)
            err["iteration"] = exc.iteration
        agents_dir = Path(args["run_dir"]) / "agents"
        agents_dir.mkdir(parents=True, exist_ok=True)
        error_path = agents_dir / f"{args['task_id']}.error.json"
        error_path.write_text(json.dumps(err, sort_keys=True), encoding="utf-8")
        sys.exit(1)
