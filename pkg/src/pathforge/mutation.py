"""Evolutionary operators: parent sampling, mutation sampling and
application, and the per-path mutation-probability updates.

Mutations only ever touch references and fresh unfrozen copies; published
components are immutable by construction.  A cloned position keeps its
content (and therefore its content address) until training produces new
parameters, at which point the child references a fresh id and the parent's
component is untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .config import SearchSpace
from .errors import IllegalMutation, NoParentAvailable
from .graph import (
    ComponentKind,
    ModelPath,
    SystemState,
    make_component,
    path_fingerprint,
)
from .nnet import init_affine, init_square_layer
from .tasks import Task


@dataclass(frozen=True)
class CloneLayer:
    position: int


@dataclass(frozen=True)
class RemoveTopLayer:
    pass


@dataclass(frozen=True)
class AddLayerOnTop:
    pass


@dataclass(frozen=True)
class HyperparamStep:
    field: str
    direction: str  # "up" | "down"


@dataclass(frozen=True)
class SwapTransferSource:
    position: int


MutationAction = Union[
    CloneLayer, RemoveTopLayer, AddLayerOnTop, HyperparamStep, SwapTransferSource
]


def action_key(action: MutationAction) -> str:
    """Stable descriptor used as key in a path's mutation-probability table."""
    if isinstance(action, CloneLayer):
        return f"clone:{action.position}"
    if isinstance(action, RemoveTopLayer):
        return "remove_top"
    if isinstance(action, AddLayerOnTop):
        return "add_top"
    if isinstance(action, HyperparamStep):
        return f"hp:{action.field}:{action.direction}"
    if isinstance(action, SwapTransferSource):
        return f"swap:{action.position}"
    raise IllegalMutation(f"unknown action {action!r}")


def action_prob(probs: dict[str, float], action: MutationAction,
                space: SearchSpace) -> float:
    return probs.get(action_key(action), space.action_prob_init)


# ---------------------------------------------------------------------------
# Parent sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParentChoice:
    path: ModelPath         # already headed for the target task
    source_task: str        # task whose best supplied the layers
    from_root: bool


def _rehead(
    source: ModelPath,
    task: Task,
    state: SystemState,
    gen: np.random.Generator,
) -> ModelPath:
    """Copy a foreign path for ``task``: fresh random head, layers frozen."""
    last = state.resolve(source.component_ids[-1])
    head = make_component(
        ComponentKind.DENSE,
        last.out_dim,
        task.n_classes,
        init_affine(last.out_dim, task.n_classes, gen),
        origin_task=None,
        depth_hint=len(source.component_ids),
    )
    state.add_component(head)
    return ModelPath(
        task_id=task.task_id,
        component_ids=source.component_ids,
        head_id=head.id,
        hyperparams=source.hyperparams,
        mutation_probs=dict(source.mutation_probs),
        parent_fingerprint=path_fingerprint(source),
    )


def sample_parent(
    state: SystemState,
    task: Task,
    space: SearchSpace,
    gen: np.random.Generator,
) -> ParentChoice:
    """Pick the parent for a new child.

    With probability ``own_parent_prob`` the task's own lineage is used (its
    current best, or the root before a best exists); otherwise a uniformly
    chosen other task's best is re-headed for this task with every
    transferred layer frozen.
    """
    if state.root is None:
        raise NoParentAvailable("system image has no root path")
    own = state.best_for(task.task_id)
    others = [state.bests[tid] for tid in sorted(state.bests)
              if tid != task.task_id]

    use_own = True
    if others:
        use_own = gen.random() < space.own_parent_prob
    if use_own:
        if own is not None:
            return ParentChoice(path=own, source_task=task.task_id, from_root=False)
        return ParentChoice(
            path=_rehead(state.root, task, state, gen),
            source_task=state.root.task_id,
            from_root=True,
        )
    source = others[int(gen.integers(len(others)))]
    return ParentChoice(
        path=_rehead(source, task, state, gen),
        source_task=source.task_id,
        from_root=False,
    )


# ---------------------------------------------------------------------------
# Legality and sampling of mutation actions
# ---------------------------------------------------------------------------

def _swap_candidates(
    parent: ModelPath, position: int, state: SystemState
) -> list[str]:
    """Ids usable as a same-depth transfer source at ``position``."""
    current = state.components.get(parent.component_ids[position])
    if current is None:
        return []
    out: list[str] = []
    sources = [state.root] + [state.bests[tid] for tid in sorted(state.bests)]
    for source in sources:
        if source.task_id == parent.task_id:
            continue
        if position >= len(source.component_ids):
            continue
        cand = state.components.get(source.component_ids[position])
        if cand is None or cand.id == current.id:
            continue
        if (cand.depth_hint == current.depth_hint
                and cand.in_dim == current.in_dim
                and cand.out_dim == current.out_dim
                and cand.kind == current.kind):
            out.append(cand.id)
    # Dedupe preserving order so the rng choice is well defined.
    seen: set[str] = set()
    return [cid for cid in out if not (cid in seen or seen.add(cid))]


def legal_actions(
    parent: ModelPath, state: SystemState, space: SearchSpace
) -> list[MutationAction]:
    """All actions applicable to the parent's shape, in canonical order.

    The order (clones, remove, add, hyperparameter steps, swaps) fixes the
    sampling rng's draw sequence and therefore the determinism contract.
    """
    actions: list[MutationAction] = []
    comps = [state.components.get(cid) for cid in parent.component_ids]
    head = state.components.get(parent.head_id)

    for pos, comp in enumerate(comps):
        if comp is not None and comp.params.size > 0:
            actions.append(CloneLayer(pos))
    n = len(comps)
    if n > space.min_layers and n >= 2 and head is not None:
        below = comps[-2]
        if below is not None and below.out_dim == head.in_dim:
            actions.append(RemoveTopLayer())
    if n < space.max_layers:
        actions.append(AddLayerOnTop())
    for field in space.hyperparam_fields():
        current = getattr(parent.hyperparams, field)
        for direction in ("down", "up"):
            if space.step(field, current, direction) is not None:
                actions.append(HyperparamStep(field, direction))
    for pos in range(n):
        if _swap_candidates(parent, pos, state):
            actions.append(SwapTransferSource(pos))
    return actions


def sample_mutations(
    parent: ModelPath,
    state: SystemState,
    space: SearchSpace,
    gen: np.random.Generator,
) -> list[MutationAction]:
    """Independently include each legal action with its learned probability.

    RemoveTopLayer takes precedence over AddLayerOnTop when both are drawn;
    an empty result produces a pure retrain child.
    """
    drawn: list[MutationAction] = []
    for action in legal_actions(parent, state, space):
        if gen.random() < action_prob(parent.mutation_probs, action, space):
            drawn.append(action)
    if any(isinstance(a, RemoveTopLayer) for a in drawn):
        drawn = [a for a in drawn if not isinstance(a, AddLayerOnTop)]
    return drawn


# ---------------------------------------------------------------------------
# Application
# ---------------------------------------------------------------------------

def apply_mutations(
    parent: ModelPath,
    actions: list[MutationAction],
    state: SystemState,
    space: SearchSpace,
    gen: np.random.Generator,
    root_derived: bool = False,
) -> ModelPath:
    """Build the untrained child resulting from ``actions`` on ``parent``.

    Application order is fixed (swaps, clones, remove, add, hyperparameter
    steps) so that any action set sampled against the parent's shape is
    applicable.  The child inherits the parent's mutation probabilities and
    hyperparameters (as stepped), records the parent fingerprint, and starts
    with an unfrozen head; fresh components are added to the local image.
    """
    ids = list(parent.component_ids)
    unfrozen: set[int] = set()
    hp = parent.hyperparams

    swaps = sorted((a for a in actions if isinstance(a, SwapTransferSource)),
                   key=lambda a: a.position)
    clones = sorted((a for a in actions if isinstance(a, CloneLayer)),
                    key=lambda a: a.position)
    removes = [a for a in actions if isinstance(a, RemoveTopLayer)]
    adds = [a for a in actions if isinstance(a, AddLayerOnTop)]
    steps = [a for a in actions if isinstance(a, HyperparamStep)]
    known = len(swaps) + len(clones) + len(removes) + len(adds) + len(steps)
    if known != len(actions):
        raise IllegalMutation("unknown action type in mutation set")
    if removes and adds:
        raise IllegalMutation("RemoveTopLayer and AddLayerOnTop are exclusive")

    for action in swaps:
        if not 0 <= action.position < len(ids):
            raise IllegalMutation(f"swap position {action.position} out of range")
        candidates = _swap_candidates(parent, action.position, state)
        if not candidates:
            raise IllegalMutation(
                f"no same-depth transfer source at position {action.position}"
            )
        ids[action.position] = candidates[int(gen.integers(len(candidates)))]

    for action in clones:
        if not 0 <= action.position < len(ids):
            raise IllegalMutation(f"clone position {action.position} out of range")
        comp = state.resolve(ids[action.position])
        if comp.params.size == 0:
            raise IllegalMutation(
                f"position {action.position} has no parameters to fine-tune"
            )
        # Cloning is unfreezing: identical content keeps the same address
        # until training rounds out new parameters under a new id.
        unfrozen.add(action.position)

    if removes:
        if len(ids) <= space.min_layers:
            raise IllegalMutation("cannot remove below the layer-count floor")
        head = state.resolve(parent.head_id)
        if len(ids) < 2 or state.resolve(ids[-2]).out_dim != head.in_dim:
            raise IllegalMutation("removal would break the head's input width")
        dropped = len(ids) - 1
        ids.pop()
        unfrozen.discard(dropped)

    if adds:
        if len(ids) >= space.max_layers:
            raise IllegalMutation("cannot add above the layer-count ceiling")
        width = state.resolve(ids[-1]).out_dim
        comp = make_component(
            ComponentKind.DENSE,
            width,
            width,
            init_square_layer(width, gen),
            origin_task=None,
            depth_hint=len(ids),
        )
        state.add_component(comp)
        ids.append(comp.id)
        unfrozen.add(len(ids) - 1)

    for action in sorted(steps, key=lambda a: (a.field, a.direction)):
        moved = space.step(action.field, getattr(hp, action.field), action.direction)
        if moved is None:
            raise IllegalMutation(
                f"hyperparameter {action.field} cannot step {action.direction}"
            )
        hp = replace(hp, **{action.field: moved})

    return ModelPath(
        task_id=parent.task_id,
        component_ids=tuple(ids),
        head_id=parent.head_id,
        hyperparams=hp,
        mutation_probs=dict(parent.mutation_probs),
        parent_fingerprint=None if root_derived else path_fingerprint(parent),
        unfrozen=tuple(sorted(unfrozen)),
    )


# ---------------------------------------------------------------------------
# Probability-table updates
# ---------------------------------------------------------------------------

def update_action_probs(
    parent_probs: dict[str, float],
    applied: set[str],
    child_won: bool,
    space: SearchSpace,
) -> dict[str, float]:
    """Multiplicative-on-win update of a mutation-probability table.

    Applied actions scale by (1 + gain), the table's other entries by
    (1 - gain), everything clamped to the configured probability bounds.
    Losing children are discarded along with their tables, so a loss leaves
    the parent table unchanged.
    """
    if not child_won:
        return dict(parent_probs)
    probs = dict(parent_probs)
    for key in applied:
        probs.setdefault(key, space.action_prob_init)
    gain = space.action_prob_gain
    out = {}
    for key, value in probs.items():
        scaled = value * (1 + gain) if key in applied else value * (1 - gain)
        out[key] = min(max(scaled, space.action_prob_min), space.action_prob_max)
    return out
