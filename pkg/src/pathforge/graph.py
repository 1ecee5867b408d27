"""Shared multitask model representation.

A model for one task is a *path*: an ordered list of immutable, content-
addressed layer components plus a task-private head.  Components are the unit
of cross-task sharing; they are never modified after publication, so training
always produces new components with new ids.  This module owns the component
wire format, path validation, and the two cost measures consumed by the
reward: share-amortized parameter counts and per-sample inference flops.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DanglingComponent,
    InvalidComponent,
    UnsupportedComponentKind,
)
from .jsonio import fingerprint_obj

ROOT_TASK = "__root__"

_HASH_DOMAIN = b"pathforge.component\0"


class ComponentKind(IntEnum):
    DENSE = 1
    ACTIVATION = 2
    EMBEDDING_STUB = 3


_KIND_NAMES = {
    ComponentKind.DENSE: "dense",
    ComponentKind.ACTIVATION: "activation",
    ComponentKind.EMBEDDING_STUB: "embedding_stub",
}


def param_count(kind: ComponentKind, in_dim: int, out_dim: int) -> int:
    """Parameter count implied by kind and dims."""
    if kind in (ComponentKind.DENSE, ComponentKind.EMBEDDING_STUB):
        return in_dim * out_dim + out_dim
    if kind == ComponentKind.ACTIVATION:
        return 0
    raise UnsupportedComponentKind(f"unknown component kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Component:
    """One immutable trainable layer; the unit of sharing across tasks."""

    id: str
    kind: ComponentKind
    in_dim: int
    out_dim: int
    params: np.ndarray  # float32, little-endian canonical, read-only
    origin_task: str | None = None
    depth_hint: int = 0

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Component) and other.id == self.id

    def __hash__(self) -> int:
        return hash(self.id)

    def __repr__(self) -> str:
        return (
            f"Component({_KIND_NAMES[self.kind]} {self.in_dim}->{self.out_dim}, "
            f"{self.params.size} params, id={self.id[:12]})"
        )


def _canonical_params(params: Iterable[float] | np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(params, dtype=np.float64).ravel())
    if arr.size and not np.all(np.isfinite(arr)):
        raise InvalidComponent("component params must be finite")
    out = arr.astype("<f4")
    out.flags.writeable = False
    return out


def _id_payload(kind: ComponentKind, in_dim: int, out_dim: int, params: np.ndarray) -> bytes:
    # Declaration-order little-endian encoding of the id-relevant fields.
    # origin_task and depth_hint are provenance metadata and do not
    # participate in the content address.
    head = struct.pack("<BIIQ", int(kind), in_dim, out_dim, params.size)
    return _HASH_DOMAIN + head + params.tobytes()


def component_id(
    kind: ComponentKind,
    in_dim: int,
    out_dim: int,
    params: Iterable[float] | np.ndarray,
) -> str:
    """Content-hash identifier of a component.

    Deterministic in (kind, in_dim, out_dim, params); any parameter
    perturbation that survives float32 rounding yields a different id.
    """
    arr = _canonical_params(params)
    _check_dims(kind, in_dim, out_dim, arr.size)
    return hashlib.sha256(_id_payload(kind, in_dim, out_dim, arr)).hexdigest()


def _check_dims(kind: ComponentKind, in_dim: int, out_dim: int, n_params: int) -> None:
    if in_dim <= 0 or out_dim <= 0:
        raise InvalidComponent(f"dims must be positive, got {in_dim}x{out_dim}")
    if kind == ComponentKind.ACTIVATION and in_dim != out_dim:
        raise InvalidComponent("activation components must preserve width")
    expected = param_count(kind, in_dim, out_dim)
    if n_params != expected:
        raise InvalidComponent(
            f"{_KIND_NAMES[kind]} {in_dim}x{out_dim} requires {expected} params, "
            f"got {n_params}"
        )


def make_component(
    kind: ComponentKind,
    in_dim: int,
    out_dim: int,
    params: Iterable[float] | np.ndarray,
    origin_task: str | None = None,
    depth_hint: int = 0,
) -> Component:
    """Build a component, rounding params to the canonical float32 encoding."""
    arr = _canonical_params(params)
    _check_dims(kind, in_dim, out_dim, arr.size)
    cid = hashlib.sha256(_id_payload(kind, in_dim, out_dim, arr)).hexdigest()
    return Component(
        id=cid,
        kind=kind,
        in_dim=in_dim,
        out_dim=out_dim,
        params=arr,
        origin_task=origin_task,
        depth_hint=depth_hint,
    )


# ---------------------------------------------------------------------------
# Component wire format (shared with the on-disk store)
#
# header: kind u8 | in_dim u32 | out_dim u32 | param_count u64 |
#         origin_len u32 + origin UTF-8 bytes (len 0 when absent) |
#         depth_hint u32
# body:   param_count little-endian float32
# ---------------------------------------------------------------------------

def serialize_component(comp: Component) -> bytes:
    origin = (comp.origin_task or "").encode("utf-8")
    header = struct.pack("<BIIQ", int(comp.kind), comp.in_dim, comp.out_dim, comp.params.size)
    header += struct.pack("<I", len(origin)) + origin
    header += struct.pack("<I", comp.depth_hint)
    return header + comp.params.tobytes()


def deserialize_component(blob: bytes, expected_id: str | None = None) -> Component:
    from .errors import IntegrityViolation  # local import to keep module deps flat

    try:
        kind_code, in_dim, out_dim, n_params = struct.unpack_from("<BIIQ", blob, 0)
        offset = struct.calcsize("<BIIQ")
        (origin_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        origin = blob[offset:offset + origin_len].decode("utf-8")
        offset += origin_len
        (depth_hint,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        body = blob[offset:]
        if len(body) != 4 * n_params:
            raise ValueError("truncated parameter body")
        kind = ComponentKind(kind_code)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IntegrityViolation(f"unreadable component blob: {exc}") from exc
    params = np.frombuffer(body, dtype="<f4").copy()
    params.flags.writeable = False
    _check_dims(kind, in_dim, out_dim, params.size)
    cid = hashlib.sha256(_id_payload(kind, in_dim, out_dim, params)).hexdigest()
    if expected_id is not None and cid != expected_id:
        raise IntegrityViolation(
            f"component blob hash {cid[:12]} does not match its address "
            f"{expected_id[:12]}"
        )
    return Component(
        id=cid,
        kind=kind,
        in_dim=in_dim,
        out_dim=out_dim,
        params=params,
        origin_task=origin or None,
        depth_hint=depth_hint,
    )


# ---------------------------------------------------------------------------
# Hyperparameters and per-path mutation-probability tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    momentum: float
    batch_size: int
    epochs: int
    input_resolution: int

    def to_record(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "input_resolution": self.input_resolution,
        }

    @staticmethod
    def from_record(rec: Mapping) -> "HyperParams":
        return HyperParams(
            learning_rate=float(rec["learning_rate"]),
            momentum=float(rec["momentum"]),
            batch_size=int(rec["batch_size"]),
            epochs=int(rec["epochs"]),
            input_resolution=int(rec["input_resolution"]),
        )


# Per-path learned mutation probabilities, keyed by action descriptor string
# (see mutation.action_key).  Values live in [prob_min, prob_max].
MutationProbs = dict


@dataclass(frozen=True)
class ModelPath:
    """One candidate or retained model for one task."""

    task_id: str
    component_ids: tuple[str, ...]
    head_id: str
    hyperparams: HyperParams
    mutation_probs: dict[str, float]
    score: float = 0.0
    val_accuracy: float = 0.0
    test_accuracy: float = 0.0
    generation_born: int = 0
    parent_fingerprint: str | None = None
    # Positions (indices into component_ids) marked trainable for the next
    # training round.  Cleared once the path is trained/published; the head
    # is always trainable and is not listed here.
    unfrozen: tuple[int, ...] = ()

    def to_record(self) -> dict:
        return {
            "schema": 1,
            "task_id": self.task_id,
            "component_ids": list(self.component_ids),
            "head_id": self.head_id,
            "hyperparams": self.hyperparams.to_record(),
            "mutation_probs": {k: float(v) for k, v in sorted(self.mutation_probs.items())},
            "score": float(self.score),
            "val_accuracy": float(self.val_accuracy),
            "test_accuracy": float(self.test_accuracy),
            "generation_born": int(self.generation_born),
            "parent_fingerprint": self.parent_fingerprint,
        }

    @staticmethod
    def from_record(rec: Mapping) -> "ModelPath":
        return ModelPath(
            task_id=rec["task_id"],
            component_ids=tuple(rec["component_ids"]),
            head_id=rec["head_id"],
            hyperparams=HyperParams.from_record(rec["hyperparams"]),
            mutation_probs=dict(rec["mutation_probs"]),
            score=float(rec["score"]),
            val_accuracy=float(rec["val_accuracy"]),
            test_accuracy=float(rec["test_accuracy"]),
            generation_born=int(rec["generation_born"]),
            parent_fingerprint=rec.get("parent_fingerprint"),
        )

    def all_ids(self) -> tuple[str, ...]:
        return self.component_ids + (self.head_id,)


def path_fingerprint(path: ModelPath) -> str:
    """Content identity of a path value (training state excluded)."""
    return fingerprint_obj(path.to_record())


# ---------------------------------------------------------------------------
# System state image
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskMeta:
    task_id: str
    n_classes: int
    input_dim: int


@dataclass
class SystemState:
    """An agent's working image of the shared multitask system.

    Loaded from disk at iteration start; agents may extend their local image
    with candidate components (content-addressed, append-only) and locally
    retained bests.  Component and path values themselves stay immutable.
    """

    tasks: dict[str, TaskMeta]
    components: dict[str, Component]
    bests: dict[str, ModelPath]
    root: ModelPath
    layer_bounds: tuple[int, int]
    cost_norms: "CostNorms"
    progress: dict[str, int] = field(default_factory=dict)

    def resolve(self, component_id_: str) -> Component:
        try:
            return self.components[component_id_]
        except KeyError:
            raise DanglingComponent(component_id_) from None

    def best_for(self, task_id: str) -> ModelPath | None:
        return self.bests.get(task_id)

    def add_component(self, comp: Component) -> None:
        # Append-only: content addressing makes double insertion idempotent.
        self.components.setdefault(comp.id, comp)

    def set_local_best(self, path: ModelPath) -> None:
        self.bests[path.task_id] = path

    def copy(self) -> "SystemState":
        return SystemState(
            tasks=dict(self.tasks),
            components=dict(self.components),
            bests=dict(self.bests),
            root=self.root,
            layer_bounds=self.layer_bounds,
            cost_norms=self.cost_norms,
            progress=dict(self.progress),
        )


@dataclass(frozen=True)
class CostNorms:
    """Reward normalizers; default to the root model's costs."""

    params_norm: float
    flops_norm: float


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    code: str  # "dangling_component" | "dim_mismatch" | "layer_count" | "head_classes"
    position: int | None = None
    component_id: str | None = None
    message: str = ""


def validate_path(path: ModelPath, state: SystemState) -> list[Violation]:
    """Collect every invariant violation of ``path`` against ``state``.

    Returns an empty list when the path is well formed.  Dimension checks
    that would require an unresolved component are skipped (the dangling id
    itself is reported).
    """
    out: list[Violation] = []
    lo, hi = state.layer_bounds
    n = len(path.component_ids)
    if n == 0 or not (lo <= n <= hi):
        out.append(Violation(
            code="layer_count",
            message=f"path has {n} components, bounds are [{lo}, {hi}]",
        ))

    resolved: list[Component | None] = []
    for cid in path.all_ids():
        comp = state.components.get(cid)
        if comp is None:
            out.append(Violation(code="dangling_component", component_id=cid))
        resolved.append(comp)
    head = resolved[-1]
    body = resolved[:-1]

    prev: Component | None = None
    for pos, comp in enumerate(body):
        if comp is None:
            prev = None
            continue
        if prev is not None and prev.out_dim != comp.in_dim:
            out.append(Violation(
                code="dim_mismatch",
                position=pos,
                message=f"layer {pos - 1} out_dim {prev.out_dim} != layer {pos} "
                        f"in_dim {comp.in_dim}",
            ))
        prev = comp
    if head is not None and body and body[-1] is not None:
        if body[-1].out_dim != head.in_dim:
            out.append(Violation(
                code="dim_mismatch",
                position=n,
                message=f"last layer out_dim {body[-1].out_dim} != head in_dim "
                        f"{head.in_dim}",
            ))
    meta = state.tasks.get(path.task_id)
    if head is not None and meta is not None and head.out_dim != meta.n_classes:
        out.append(Violation(
            code="head_classes",
            position=n,
            message=f"head out_dim {head.out_dim} != task class count "
                    f"{meta.n_classes}",
        ))
    return out


# ---------------------------------------------------------------------------
# Cost measures
# ---------------------------------------------------------------------------

def _share_counts(state: SystemState) -> dict[str, int]:
    counts: dict[str, int] = {}
    for best in state.bests.values():
        for cid in set(best.all_ids()):
            counts[cid] = counts.get(cid, 0) + 1
    return counts


def accounted_parameters(path: ModelPath, state: SystemState) -> float:
    """Parameter cost of a path with shared components amortized.

    Each distinct component contributes |params| divided by the number of
    current best paths (across all tasks) that use it; components used by no
    best path count in full.
    """
    counts = _share_counts(state)
    total = 0.0
    for cid in set(path.all_ids()):
        comp = state.resolve(cid)
        total += comp.params.size / max(counts.get(cid, 1), 1)
    return total


def layer_flops(comp: Component, input_resolution: int) -> float:
    """Per-sample flops of one layer: multiply-adds count 2, elementwise 1."""
    if comp.kind == ComponentKind.DENSE:
        return 2.0 * comp.in_dim * comp.out_dim
    if comp.kind == ComponentKind.ACTIVATION:
        return float(comp.out_dim)
    if comp.kind == ComponentKind.EMBEDDING_STUB:
        return 2.0 * min(input_resolution, comp.in_dim) * comp.out_dim
    raise UnsupportedComponentKind(f"unknown component kind {comp.kind!r}")


def inference_flops(path: ModelPath, state: SystemState) -> float:
    """Flops to produce inference for one input sample along ``path``."""
    res = path.hyperparams.input_resolution
    total = 0.0
    for cid in path.component_ids:
        total += layer_flops(state.resolve(cid), res)
    head = state.resolve(path.head_id)
    total += 2.0 * head.in_dim * head.out_dim
    return total
