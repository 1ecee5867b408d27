"""Experiment coordinator: builds the root system, launches sequential or
multiagent runs, and assembles per-repetition run records.

The coordinator shares no in-memory state with agents: multiagent workers
(threads by default, OS processes with ``processes=True``) communicate only
through the on-disk store, and report their measurements through per-agent
files in the run directory.  Sequential mode drives the identical
per-iteration code path in task order inside one process.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing
import threading
import time
from pathlib import Path

from .config import ExperimentConfig, SearchSpace
from .errors import BarrierTimeout, ConfigError, StoreError
from .evolution import AgentConfig, TrainBudget, run_task_iteration
from .graph import (
    Component,
    ComponentKind,
    CostNorms,
    ModelPath,
    ROOT_TASK,
    SystemState,
    accounted_parameters,
    inference_flops,
    make_component,
)
from .jsonio import canonical_dumps, fingerprint_obj
from .nnet import init_affine
from .rng import stream, stream_key
from .store import SystemStore
from .tasks import Task, family_from_config, load_csv_task
from .worker import agent_main, agent_process_entry

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# System bootstrap
# ---------------------------------------------------------------------------

def build_root(
    space: SearchSpace,
    input_dim: int,
    head_classes: int,
    seed: int,
) -> tuple[ModelPath, list[Component]]:
    """Seeded initial stack every lineage descends from.

    Structure: input stub -> tanh -> dense -> tanh, plus a placeholder head
    (never trained; parents for a concrete task are always re-headed).
    """
    width = space.hidden_dim
    gen = stream("root", seed)
    stub = make_component(
        ComponentKind.EMBEDDING_STUB, input_dim, width,
        init_affine(input_dim, width, gen), depth_hint=0,
    )
    act1 = make_component(ComponentKind.ACTIVATION, width, width, [], depth_hint=1)
    dense = make_component(
        ComponentKind.DENSE, width, width, init_affine(width, width, gen),
        depth_hint=2,
    )
    act2 = make_component(ComponentKind.ACTIVATION, width, width, [], depth_hint=3)
    head = make_component(
        ComponentKind.DENSE, width, head_classes,
        init_affine(width, head_classes, gen), depth_hint=4,
    )
    root = ModelPath(
        task_id=ROOT_TASK,
        component_ids=(stub.id, act1.id, dense.id, act2.id),
        head_id=head.id,
        hyperparams=space.default_hyperparams(),
        mutation_probs={},
    )
    return root, [stub, act1, dense, act2, head]


def build_tasks(cfg: ExperimentConfig) -> list[Task]:
    if cfg.csv_tasks:
        tasks = [
            load_csv_task(t.task_id, t.train_csv, t.val_csv, t.test_csv)
            for t in cfg.csv_tasks
        ]
    else:
        tasks = family_from_config(cfg.family)
    dims = {t.input_dim for t in tasks}
    if len(dims) != 1:
        raise ConfigError(
            f"all tasks must share one input width (components are shared); "
            f"got {sorted(dims)}"
        )
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate task ids")
    return tasks


def init_store(store_dir: Path, cfg: ExperimentConfig, tasks: list[Task]) -> SystemStore:
    input_dim = tasks[0].input_dim
    head_classes = max(t.n_classes for t in tasks)
    root, components = build_root(cfg.space, input_dim, head_classes, cfg.seed)
    if not (cfg.space.min_layers <= len(root.component_ids) <= cfg.space.max_layers):
        raise ConfigError("layer bounds exclude the root stack")
    probe = SystemState(
        tasks={}, components={c.id: c for c in components}, bests={},
        root=root, layer_bounds=(cfg.space.min_layers, cfg.space.max_layers),
        cost_norms=CostNorms(1.0, 1.0),
    )
    norms = CostNorms(
        params_norm=cfg.cost_norm_margin * accounted_parameters(root, probe),
        flops_norm=cfg.cost_norm_margin * inference_flops(root, probe),
    )
    return SystemStore.create(
        store_dir,
        tasks=[t.meta() for t in tasks],
        agents=[t.task_id for t in tasks],
        space=cfg.space,
        cost_norms=norms,
        root_path=root,
        root_components=components,
    )


# ---------------------------------------------------------------------------
# Per-repetition execution
# ---------------------------------------------------------------------------

def _rep_seed(cfg: ExperimentConfig, rep: int) -> int:
    # Mode-independent: sequential and multiagent runs of the same rep share
    # every random stream.
    return stream_key("rep", cfg.seed, rep)


def _effective_cap(cfg: ExperimentConfig, tasks: list[Task], task: Task) -> int:
    cap = min(task.train.inputs.shape[0], cfg.agent.budget_samples_cap)
    if cfg.equal_budget:
        cap = min(min(t.train.inputs.shape[0], cfg.agent.budget_samples_cap)
                  for t in tasks)
    return cap


def _agent_args(
    cfg: ExperimentConfig,
    tasks: list[Task],
    task: Task,
    rep: int,
    store_dir: Path,
    run_dir: Path,
) -> dict:
    if cfg.csv_tasks:
        by_id = {t.task_id: t for t in cfg.csv_tasks}
        csv_cfg = by_id[task.task_id]
        task_args = {
            "kind": "csv",
            "task_id": task.task_id,
            "train_csv": csv_cfg.train_csv,
            "val_csv": csv_cfg.val_csv,
            "test_csv": csv_cfg.test_csv,
        }
    else:
        task_args = {"kind": "family", "spec": dataclasses.asdict(task.spec)}
    return {
        "task_id": task.task_id,
        "task": task_args,
        "store_dir": str(store_dir),
        "run_dir": str(run_dir),
        "num_iterations": cfg.iterations,
        "barrier_timeout_s": cfg.barrier_timeout_s,
        "generations_per_iteration": cfg.agent.generations_per_iteration,
        "samples_per_generation": cfg.agent.samples_per_generation,
        "budget_epochs": cfg.agent.budget_epochs,
        "budget_samples_cap": _effective_cap(cfg, tasks, task),
        "cost_scale": cfg.agent.cost_scale,
        "rng_seed": _rep_seed(cfg, rep),
    }


def _log_event(run_dir: Path, agent_id: str, kind: str, iteration: int) -> None:
    agents_dir = run_dir / "agents"
    agents_dir.mkdir(parents=True, exist_ok=True)
    line = json.dumps({
        "event": kind, "agent": agent_id, "iteration": iteration,
        "t_ns": time.time_ns(),
    }, sort_keys=True)
    with open(agents_dir / f"{agent_id}.events.jsonl", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def run_sequential(
    cfg: ExperimentConfig,
    tasks: list[Task],
    store: SystemStore,
    run_dir: Path,
    rep: int,
) -> dict:
    """One program iterates over tasks in declaration order, improving one
    model at a time; same evolutionary code path as the agents."""
    per_task: dict[str, list[dict]] = {t.task_id: [] for t in tasks}
    rep_seed = _rep_seed(cfg, rep)
    t_start = time.perf_counter()
    for n in range(cfg.iterations):
        for task in tasks:
            agent_cfg = AgentConfig(
                task_id=task.task_id,
                generations_per_iteration=cfg.agent.generations_per_iteration,
                samples_per_generation=cfg.agent.samples_per_generation,
                budget=TrainBudget(cfg.agent.budget_epochs,
                                   _effective_cap(cfg, tasks, task)),
                cost_scale=cfg.agent.cost_scale,
                rng_seed=rep_seed,
            )
            store.wait_for_barrier(n, timeout_s=cfg.barrier_timeout_s)
            _log_event(run_dir, task.task_id, "start", n)
            result = run_task_iteration(agent_cfg, task, store, n, horizon=None)
            store.mark_iteration_complete(task.task_id, n)
            _log_event(run_dir, task.task_id, "complete", n)
            per_task[task.task_id].append(result.to_record())
    total = time.perf_counter() - t_start
    agents_dir = run_dir / "agents"
    agents_dir.mkdir(parents=True, exist_ok=True)
    for tid, records in per_task.items():
        (agents_dir / f"{tid}.json").write_text(
            json.dumps({"task_id": tid, "results": records}, sort_keys=True),
            encoding="utf-8",
        )
    return assemble_run_record(cfg, tasks, store, run_dir, rep, "sequential", total)


def run_multiagent(
    cfg: ExperimentConfig,
    tasks: list[Task],
    store: SystemStore,
    run_dir: Path,
    rep: int,
) -> dict:
    """One agent per task, running asynchronously against the shared store.

    Workers are in-process threads by default; ``processes=True`` runs each
    agent as a distinct OS process (distinct program, own interpreter),
    exercising the same store protocol.
    """
    args_list = [
        _agent_args(cfg, tasks, task, rep, Path(store.root), run_dir)
        for task in tasks
    ]
    t_start = time.perf_counter()
    if cfg.processes:
        ctx = multiprocessing.get_context("spawn")
        procs = [ctx.Process(target=agent_process_entry, args=(a,), name=a["task_id"])
                 for a in args_list]
        for p in procs:
            p.start()
        for p in procs:
            p.join()
        failures = [p.name for p in procs if p.exitcode != 0]
        if failures:
            _raise_worker_failure(run_dir, failures)
    else:
        errors: list[BaseException] = []

        def run_one(a: dict) -> None:
            try:
                agent_main(a)
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=run_one, args=(a,), name=a["task_id"])
                   for a in args_list]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            barrier = [e for e in errors if isinstance(e, BarrierTimeout)]
            raise (barrier[0] if barrier else errors[0])
    total = time.perf_counter() - t_start
    return assemble_run_record(cfg, tasks, store, run_dir, rep, "multiagent", total)


def _raise_worker_failure(run_dir: Path, failed: list[str]) -> None:
    details = []
    for tid in failed:
        err_path = run_dir / "agents" / f"{tid}.error.json"
        if err_path.exists():
            rec = json.loads(err_path.read_text(encoding="utf-8"))
            if rec.get("error") == "BarrierTimeout":
                raise BarrierTimeout(rec.get("iteration", -1),
                                     tuple(rec.get("missing", ())))
            details.append(f"{tid}: {rec.get('error')}: {rec.get('message')}")
        else:
            details.append(f"{tid}: worker died without a report")
    raise StoreError("agent worker failure: " + "; ".join(details))


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

def assemble_run_record(
    cfg: ExperimentConfig,
    tasks: list[Task],
    store: SystemStore,
    run_dir: Path,
    rep: int,
    mode: str,
    total_wall_s: float,
) -> dict:
    task_ids = [t.task_id for t in tasks]
    per_task: dict[str, list[dict]] = {}
    for tid in task_ids:
        payload = json.loads(
            (run_dir / "agents" / f"{tid}.json").read_text(encoding="utf-8")
        )
        per_task[tid] = payload["results"]
    counts = {len(v) for v in per_task.values()}
    if counts != {cfg.iterations}:
        raise StoreError(f"agents reported ragged iteration counts {counts}")

    iterations = []
    cum = 0.0
    for n in range(cfg.iterations):
        row = {tid: per_task[tid][n] for tid in task_ids}
        walls = [row[tid]["wall_time_s"] for tid in task_ids]
        task_set_wall = sum(walls) if mode == "sequential" else max(walls)
        cum += task_set_wall
        iterations.append({
            "iteration": n,
            "per_task": row,
            "task_set_wall_s": task_set_wall,
            "cum_wall_s": cum,
        })

    final_state = store.load_system_image()
    final = {}
    for tid in task_ids:
        best = final_state.best_for(tid)
        if best is None:
            continue
        final[tid] = {
            "score": best.score,
            "val_accuracy": best.val_accuracy,
            "test_accuracy": best.test_accuracy,
            "n_layers": len(best.component_ids),
            "hyperparams": best.hyperparams.to_record(),
            "mutation_probs": dict(sorted(best.mutation_probs.items())),
            "accounted_params": accounted_parameters(best, final_state),
            "inference_flops": inference_flops(best, final_state),
        }
    return {
        "schema": 1,
        "mode": mode,
        "rep": rep,
        "seed": cfg.seed,
        "config_fingerprint": fingerprint_obj(cfg.to_record()),
        "tasks": task_ids,
        "iterations": iterations,
        "final": final,
        "total_wall_s": total_wall_s,
    }


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every repetition of an experiment; returns the workspace dir.

    Workspace layout: <workspace>/config.json plus one rep%02d/ directory per
    repetition holding the store, per-agent outputs, and run.json.
    """
    workspace = Path(cfg.workspace)
    workspace.mkdir(parents=True, exist_ok=True)
    (workspace / "config.json").write_text(
        canonical_dumps(cfg.to_record()) + "\n", encoding="utf-8"
    )
    tasks = build_tasks(cfg)
    for rep in range(cfg.repetitions):
        rep_dir = workspace / f"rep{rep:02d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        store = init_store(rep_dir / "store", cfg, tasks)
        logger.info("rep %d/%d (%s) starting", rep + 1, cfg.repetitions, cfg.mode)
        if cfg.mode == "sequential":
            record = run_sequential(cfg, tasks, store, rep_dir, rep)
        else:
            record = run_multiagent(cfg, tasks, store, rep_dir, rep)
        (rep_dir / "run.json").write_text(
            canonical_dumps(record) + "\n", encoding="utf-8"
        )
        logger.info("rep %d/%d done in %.1fs", rep + 1, cfg.repetitions,
                     record["total_wall_s"])
    return workspace
