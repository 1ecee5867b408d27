"""Sharded on-disk system state: the only channel between agents.

Layout (all shared state lives under one directory tree):

    store/
      manifest.json                       # tasks, agents, search space, norms
      components/<id>.bin                 # write-once content-addressed blobs
      tasks/<task_id>/best/<seq>.json     # append-only best-record versions
      tasks/<task_id>/iter/<agent>.<n>.done   # write-once barrier markers
      tmp/                                # writer scratch; readers ignore it

Atomicity rests on two POSIX primitives: ``link(tmp, target)`` publishes a
fully written file or fails with EEXIST (never a torn record), and records
are only ever created, never rewritten.  The current best for a task is the
highest-numbered version file; claiming version ``seq+1`` with link is a
lock-free compare-and-swap, keyed by the fingerprint of the record it
supersedes.  The root path is stored as the best record of the reserved
pseudo-task ``__root__``.

Handles are cheap and are not shared across threads; each worker opens its
own.
"""

from __future__ import annotations

import os
import random
import re
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .config import SearchSpace
from .errors import (
    BarrierTimeout,
    Conflict,
    DanglingComponent,
    DuplicateMarker,
    IntegrityViolation,
    StoreError,
)
from .graph import (
    Component,
    CostNorms,
    ModelPath,
    ROOT_TASK,
    SystemState,
    TaskMeta,
    component_id,
    deserialize_component,
    serialize_component,
)
from .jsonio import canonical_bytes, fingerprint, loads

_MANIFEST = "manifest.json"
_VERSION_RE = re.compile(r"^(\d{6})\.json$")
_MARKER_RE = re.compile(r"^(?P<agent>.+)\.(?P<n>\d+)\.done$")

_RETRIES = 4
_RETRY_BASE_S = 0.05

# Barrier polling: jittered backoff between existence checks.
_POLL_MIN_S = 0.005
_POLL_MAX_S = 0.1


def _retry(fn, what: str):
    """Run a filesystem operation with bounded backoff on transient errors."""
    for attempt in range(_RETRIES + 1):
        try:
            return fn()
        except FileExistsError:
            raise
        except FileNotFoundError:
            raise
        except OSError as exc:
            if attempt == _RETRIES:
                raise StoreError(f"{what}: {exc}") from exc
            time.sleep(_RETRY_BASE_S * (2 ** attempt))


class SystemStore:
    """Handle on one on-disk system state."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._manifest_cache: dict | None = None

    # -- paths -------------------------------------------------------------

    def _components_dir(self) -> Path:
        return self.root / "components"

    def _component_path(self, cid: str) -> Path:
        return self._components_dir() / f"{cid}.bin"

    def _best_dir(self, task_id: str) -> Path:
        return self.root / "tasks" / task_id / "best"

    def _iter_dir(self, task_id: str) -> Path:
        return self.root / "tasks" / task_id / "iter"

    def _tmp_path(self) -> Path:
        return self.root / "tmp" / f"tmp-{os.getpid()}-{uuid.uuid4().hex}"

    # -- creation ----------------------------------------------------------

    @classmethod
    def create(
        cls,
        root: str | Path,
        tasks: Iterable[TaskMeta],
        agents: Sequence[str],
        space: SearchSpace,
        cost_norms: CostNorms,
        root_path: ModelPath,
        root_components: Iterable[Component],
    ) -> "SystemStore":
        store = cls(root)
        if (store.root / _MANIFEST).exists():
            raise StoreError(f"store already initialized at {store.root}")
        task_list = list(tasks)
        for sub in ("components", "tmp"):
            (store.root / sub).mkdir(parents=True, exist_ok=True)
        for meta in task_list:
            store._best_dir(meta.task_id).mkdir(parents=True, exist_ok=True)
            store._iter_dir(meta.task_id).mkdir(parents=True, exist_ok=True)
        store._best_dir(ROOT_TASK).mkdir(parents=True, exist_ok=True)

        for comp in root_components:
            store.publish_component(comp)
        store._write_once(
            store._best_dir(ROOT_TASK) / "000000.json",
            canonical_bytes({**root_path.to_record(), "iteration": -1}),
        )
        manifest = {
            "format": 1,
            "agents": sorted(agents),
            "tasks": {
                m.task_id: {"n_classes": m.n_classes, "input_dim": m.input_dim}
                for m in task_list
            },
            "space": space.to_record(),
            "cost_norms": {
                "params_norm": cost_norms.params_norm,
                "flops_norm": cost_norms.flops_norm,
            },
        }
        store._write_once(store.root / _MANIFEST, canonical_bytes(manifest))
        return store

    # -- low-level write discipline ----------------------------------------

    def _write_once(self, target: Path, data: bytes) -> bool:
        """Atomically create ``target`` with ``data``; False if it exists.

        The payload is staged in tmp/ and hardlinked into place, so readers
        can never observe a partially written record.
        """
        tmp = self._tmp_path()

        def write():
            tmp.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())

        _retry(write, f"write {target.name}")
        try:
            os.link(tmp, target)
            return True
        except FileExistsError:
            return False
        except OSError as exc:
            raise StoreError(f"publish {target.name}: {exc}") from exc
        finally:
            try:
                os.unlink(tmp)
            except OSError:
                pass

    # -- manifest ----------------------------------------------------------

    def manifest(self) -> dict:
        if self._manifest_cache is None:
            path = self.root / _MANIFEST
            try:
                raw = _retry(lambda: path.read_bytes(), "read manifest")
            except FileNotFoundError:
                raise StoreError(f"no store at {self.root}") from None
            try:
                self._manifest_cache = loads(raw)
            except ValueError as exc:
                raise IntegrityViolation(f"manifest unreadable: {exc}") from exc
        return self._manifest_cache

    def registered_agents(self) -> list[str]:
        return list(self.manifest()["agents"])

    def task_metas(self) -> dict[str, TaskMeta]:
        return {
            tid: TaskMeta(tid, meta["n_classes"], meta["input_dim"])
            for tid, meta in self.manifest()["tasks"].items()
        }

    def search_space(self) -> SearchSpace:
        return SearchSpace.from_record(self.manifest()["space"])

    def cost_norms(self) -> CostNorms:
        rec = self.manifest()["cost_norms"]
        return CostNorms(rec["params_norm"], rec["flops_norm"])

    # -- components ----------------------------------------------------------

    def publish_component(self, comp: Component) -> str:
        """Write a component blob once; idempotent for identical content.

        When the address already exists the stored blob is hash-verified
        against it: matching content (the provenance metadata of the first
        writer wins) is an idempotent success, anything else is corruption
        or a hash collision and aborts the experiment.
        """
        expected = component_id(comp.kind, comp.in_dim, comp.out_dim, comp.params)
        if expected != comp.id:
            raise IntegrityViolation(
                f"component carries id {comp.id[:12]} but hashes to "
                f"{expected[:12]}"
            )
        data = serialize_component(comp)
        target = self._component_path(comp.id)
        if not self._write_once(target, data):
            existing = _retry(lambda: target.read_bytes(), f"read blob {comp.id[:12]}")
            deserialize_component(existing, expected_id=comp.id)
        return comp.id

    def has_component(self, cid: str) -> bool:
        return self._component_path(cid).exists()

    def load_component(self, cid: str) -> Component:
        try:
            raw = _retry(lambda: self._component_path(cid).read_bytes(),
                         f"read blob {cid[:12]}")
        except FileNotFoundError:
            raise DanglingComponent(cid) from None
        return deserialize_component(raw, expected_id=cid)

    # -- best-path records ---------------------------------------------------

    def read_best(
        self,
        task_id: str,
        max_iteration: int | None = None,
    ) -> tuple[ModelPath | None, str | None, int]:
        """(path, record fingerprint, seq) of the current best; seq 0 if none.

        With ``max_iteration`` set, records published by later task
        iterations are skipped; this gives agents a deterministic image at a
        barrier horizon regardless of how far faster peers have raced ahead.
        """
        best_dir = self._best_dir(task_id)
        try:
            names = _retry(lambda: os.listdir(best_dir), f"list best of {task_id}")
        except FileNotFoundError:
            return None, None, 0
        seqs = sorted(
            (int(m.group(1)) for m in map(_VERSION_RE.match, names) if m),
            reverse=True,
        )
        for seq in seqs:
            raw = _retry(lambda: (best_dir / f"{seq:06d}.json").read_bytes(),
                         f"read best of {task_id}")
            try:
                rec = loads(raw)
                path = ModelPath.from_record(rec)
            except (ValueError, KeyError, TypeError) as exc:
                raise IntegrityViolation(
                    f"best record {task_id}/{seq:06d} unreadable: {exc}"
                ) from exc
            if (max_iteration is not None
                    and int(rec.get("iteration", -1)) > max_iteration):
                continue
            return path, fingerprint(raw), seq
        return None, None, 0

    def best_history(self, task_id: str) -> list[tuple[int, ModelPath]]:
        """All retained best versions, oldest first (provenance audits)."""
        best_dir = self._best_dir(task_id)
        out = []
        try:
            names = os.listdir(best_dir)
        except FileNotFoundError:
            return out
        for name in sorted(names):
            m = _VERSION_RE.match(name)
            if not m:
                continue
            raw = (best_dir / name).read_bytes()
            out.append((int(m.group(1)), ModelPath.from_record(loads(raw))))
        return out

    def publish_best(
        self,
        task_id: str,
        path: ModelPath,
        expected_prev_fingerprint: str | None,
        iteration: int = -1,
    ) -> str:
        """Compare-and-swap the per-task best record.

        Raises Conflict when another writer advanced the record after the
        caller read ``expected_prev_fingerprint``; the caller re-reads and
        re-compares rewards before retrying.  ``iteration`` tags the record
        with the task iteration that produced it (horizon reads key on it).
        """
        for cid in path.all_ids():
            if not self.has_component(cid):
                raise DanglingComponent(cid)
        data = canonical_bytes({**path.to_record(), "iteration": iteration})
        while True:
            _, cur_fp, cur_seq = self.read_best(task_id)
            if cur_fp != expected_prev_fingerprint:
                raise Conflict(
                    f"best record for {task_id} moved past the expected state"
                )
            target = self._best_dir(task_id) / f"{cur_seq + 1:06d}.json"
            target.parent.mkdir(parents=True, exist_ok=True)
            if self._write_once(target, data):
                return fingerprint(data)
            # Lost the claim on seq+1: loop to observe the winner, which
            # surfaces as a Conflict on the fingerprint check above.

    # -- system image ----------------------------------------------------------

    def load_system_image(self, max_iteration: int | None = None) -> SystemState:
        """Self-consistent snapshot of the shared system.

        Every referenced component is loaded and hash-verified.  Per-task
        bests are individually consistent; cross-task staleness is allowed.
        ``max_iteration`` restricts the snapshot to records published by
        task iterations up to that index (see ``read_best``).
        """
        tasks = self.task_metas()
        root_path, _, _ = self.read_best(ROOT_TASK)
        if root_path is None:
            raise StoreError("store has no root path; not initialized?")
        bests: dict[str, ModelPath] = {}
        for tid in tasks:
            path, _, _ = self.read_best(tid, max_iteration=max_iteration)
            if path is not None:
                bests[tid] = path
        components: dict[str, Component] = {}
        for path in [root_path, *bests.values()]:
            for cid in path.all_ids():
                if cid not in components:
                    components[cid] = self.load_component(cid)
        space = self.search_space()
        return SystemState(
            tasks=tasks,
            components=components,
            bests=bests,
            root=root_path,
            layer_bounds=(space.min_layers, space.max_layers),
            cost_norms=self.cost_norms(),
            progress=self.iteration_progress(),
        )

    # -- barrier ----------------------------------------------------------------

    def _marker_path(self, agent_id: str, n: int) -> Path:
        return self._iter_dir(agent_id) / f"{agent_id}.{n}.done"

    def mark_iteration_complete(self, agent_id: str, n: int) -> None:
        if agent_id not in self.registered_agents():
            raise StoreError(f"agent {agent_id!r} is not registered in the manifest")
        marker = self._marker_path(agent_id, n)
        marker.parent.mkdir(parents=True, exist_ok=True)
        if not self._write_once(marker, b""):
            raise DuplicateMarker(f"marker {marker.name} already exists")

    def wait_for_barrier(self, n: int, timeout_s: float = 600.0) -> None:
        """Block until every registered agent completed iteration n-1."""
        if n <= 0:
            return
        agents = self.registered_agents()
        deadline = time.monotonic() + timeout_s
        delay = _POLL_MIN_S
        while True:
            missing = tuple(
                a for a in agents if not self._marker_path(a, n - 1).exists()
            )
            if not missing:
                return
            if time.monotonic() >= deadline:
                raise BarrierTimeout(n, missing)
            time.sleep(delay * (0.5 + random.random()))
            delay = min(delay * 1.5, _POLL_MAX_S)

    def iteration_progress(self) -> dict[str, int]:
        """Highest completed iteration per agent, -1 when none."""
        progress = {a: -1 for a in self.registered_agents()}
        tasks_dir = self.root / "tasks"
        if not tasks_dir.exists():
            return progress
        for iter_dir in tasks_dir.glob("*/iter"):
            for name in os.listdir(iter_dir):
                m = _MARKER_RE.match(name)
                if not m:
                    continue
                agent = m.group("agent")
                n = int(m.group("n"))
                if agent in progress:
                    progress[agent] = max(progress[agent], n)
        return progress

    # -- audits and offline maintenance -----------------------------------------

    def audit(self) -> list[str]:
        """Full-store scan; returns human-readable problems (empty = clean)."""
        problems: list[str] = []
        try:
            self.manifest()
        except (StoreError, IntegrityViolation) as exc:
            return [str(exc)]
        for blob in sorted(self._components_dir().glob("*.bin")):
            cid = blob.stem
            try:
                deserialize_component(blob.read_bytes(), expected_id=cid)
            except IntegrityViolation as exc:
                problems.append(f"component {cid[:12]}: {exc}")
        for best_dir in sorted((self.root / "tasks").glob("*/best")):
            task_id = best_dir.parent.name
            for rec in sorted(best_dir.glob("*.json")):
                if not _VERSION_RE.match(rec.name):
                    problems.append(f"{task_id}: stray record {rec.name}")
                    continue
                try:
                    path = ModelPath.from_record(loads(rec.read_bytes()))
                except (ValueError, KeyError, TypeError) as exc:
                    problems.append(f"{task_id}/{rec.name}: unreadable: {exc}")
                    continue
                for cid in path.all_ids():
                    if not self.has_component(cid):
                        problems.append(
                            f"{task_id}/{rec.name}: dangling component {cid[:12]}"
                        )
        return problems

    def gc(self) -> dict:
        """Offline cleanup: drop superseded best versions, unreferenced
        component blobs, and writer scratch files.  Never run concurrently
        with agents."""
        removed_records = 0
        referenced: set[str] = set()
        for best_dir in sorted((self.root / "tasks").glob("*/best")):
            versions = []
            for rec in best_dir.glob("*.json"):
                m = _VERSION_RE.match(rec.name)
                if m:
                    versions.append((int(m.group(1)), rec))
            versions.sort()
            for _, rec in versions[:-1]:
                rec.unlink()
                removed_records += 1
            if versions:
                path = ModelPath.from_record(loads(versions[-1][1].read_bytes()))
                referenced.update(path.all_ids())
        removed_components = 0
        bytes_freed = 0
        for blob in self._components_dir().glob("*.bin"):
            if blob.stem not in referenced:
                bytes_freed += blob.stat().st_size
                blob.unlink()
                removed_components += 1
        removed_tmp = 0
        tmp_dir = self.root / "tmp"
        if tmp_dir.exists():
            for stray in tmp_dir.iterdir():
                stray.unlink()
                removed_tmp += 1
        return {
            "removed_records": removed_records,
            "removed_components": removed_components,
            "removed_tmp": removed_tmp,
            "bytes_freed": bytes_freed,
        }
