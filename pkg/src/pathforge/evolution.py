"""The per-task agent: task iterations of sample/mutate/train/score, reward
computation, retention of the per-task best, and publication to the shared
store.

An agent loads a fresh system image once per task iteration (multiagent mode
reads it as of the barrier horizon, so results do not depend on peer timing),
runs a fixed number of generations where each generation's winner may seed
the next, and publishes the iteration's best candidate only when it strictly
beats the stored best's reward.  Losing candidates and their components stay
agent-local.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

from .config import SearchSpace
from .errors import Conflict, InvalidReward, PathforgeError
from .graph import (
    Component,
    CostNorms,
    ModelPath,
    SystemState,
    accounted_parameters,
    inference_flops,
)
from .mutation import (
    action_key,
    apply_mutations,
    sample_mutations,
    sample_parent,
    update_action_probs,
)
from . import nnet
from .rng import stream, stream_key
from .store import SystemStore
from .tasks import Task

logger = logging.getLogger(__name__)

# Cost ratios saturate here: beyond half the normalizer a cost factor stops
# discriminating and the clamp keeps the factor at 1 - scale * 0.5.
COST_RATIO_CLAMP = 0.5

_PUBLISH_RETRIES = 8


@dataclass(frozen=True)
class TrainBudget:
    epochs: int
    samples_cap: int

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("budget epochs must be >= 1")
        if self.samples_cap < 1:
            raise ValueError("budget samples_cap must be >= 1")


@dataclass(frozen=True)
class AgentConfig:
    task_id: str
    generations_per_iteration: int
    samples_per_generation: int
    budget: TrainBudget
    cost_scale: float
    rng_seed: int
    # Worker threads for concurrent child training inside a generation;
    # results merge by (reward, -sample_index) so the count never changes
    # the outcome.
    sample_workers: int = 1


@dataclass
class IterationResult:
    task_id: str
    iteration: int
    best_changed: bool
    best_score: float
    val_accuracy: float
    test_accuracy: float
    accounted_params: float
    inference_flops: float
    wall_time_s: float
    barrier_wait_s: float = 0.0
    candidates: int = 0

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "iteration": self.iteration,
            "best_changed": self.best_changed,
            "best_score": self.best_score,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "accounted_params": self.accounted_params,
            "inference_flops": self.inference_flops,
            "wall_time_s": self.wall_time_s,
            "barrier_wait_s": self.barrier_wait_s,
            "candidates": self.candidates,
        }


@dataclass
class Candidate:
    """A scored child plus everything needed to publish it if it wins."""

    path: ModelPath                 # trained, unfrozen cleared
    sample_index: int
    reward: float
    applied_keys: frozenset[str]
    fresh_components: tuple[Component, ...]  # new layers + head


def reward(
    val_accuracy: float,
    acc_params: float,
    flops: float,
    norms: CostNorms,
    scale: float,
) -> float:
    """Accuracy discounted multiplicatively by size and compute cost.

    r = acc * (1 - scale*min(params/params_norm, 0.5))
            * (1 - scale*min(flops/flops_norm, 0.5))

    Equals the validation accuracy at scale 0 and is strictly decreasing in
    each cost below the clamp.
    """
    values = (val_accuracy, acc_params, flops, norms.params_norm,
              norms.flops_norm, scale)
    if not all(math.isfinite(v) for v in values):
        raise InvalidReward(f"non-finite reward input in {values}")
    if norms.params_norm <= 0 or norms.flops_norm <= 0:
        raise InvalidReward("cost normalizers must be positive")
    size_factor = 1.0 - scale * min(acc_params / norms.params_norm,
                                    COST_RATIO_CLAMP)
    compute_factor = 1.0 - scale * min(flops / norms.flops_norm,
                                       COST_RATIO_CLAMP)
    return val_accuracy * size_factor * compute_factor


def _train_and_score(
    cfg: AgentConfig,
    task: Task,
    state: SystemState,
    space: SearchSpace,
    iteration: int,
    generation: int,
    sample_index: int,
) -> Candidate:
    base = (cfg.rng_seed, cfg.task_id, iteration, generation, sample_index)
    choice = sample_parent(state, task, space, stream("parent", *base))
    actions = sample_mutations(choice.path, state, space, stream("mutate", *base))
    child = apply_mutations(
        choice.path, actions, state, space, stream("apply", *base),
        root_derived=choice.from_root,
    )
    child = replace(
        child,
        generation_born=iteration * cfg.generations_per_iteration + generation,
    )
    outcome = nnet.train_child(child, state, task, cfg.budget,
                               stream_key("train", *base))

    ids = list(child.component_ids)
    for pos, comp in zip(outcome.unfrozen_positions, outcome.new_components):
        ids[pos] = comp.id
    fresh = outcome.new_components + (outcome.new_head,)
    for comp in fresh:
        state.add_component(comp)
    trained = replace(
        child,
        component_ids=tuple(ids),
        head_id=outcome.new_head.id,
        unfrozen=(),
    )
    val_acc = nnet.evaluate(trained, state, task.val)
    score = reward(
        val_acc,
        accounted_parameters(trained, state),
        inference_flops(trained, state),
        state.cost_norms,
        cfg.cost_scale,
    )
    trained = replace(trained, score=score, val_accuracy=val_acc)
    return Candidate(
        path=trained,
        sample_index=sample_index,
        reward=score,
        applied_keys=frozenset(action_key(a) for a in actions),
        fresh_components=fresh,
    )


def run_generation(
    cfg: AgentConfig,
    task: Task,
    state: SystemState,
    space: SearchSpace,
    iteration: int,
    generation: int,
) -> list[Candidate]:
    """Sample, mutate, train, and score one generation of children.

    A child that fails to train is dropped, not fatal.  The image is not
    modified during the generation except for append-only component
    insertion, so children are independent and may train concurrently.
    """
    def one(i: int) -> Candidate | None:
        try:
            return _train_and_score(cfg, task, state, space, iteration,
                                    generation, i)
        except PathforgeError as exc:
            logger.warning("dropping child %s/%d.%d.%d: %s",
                           cfg.task_id, iteration, generation, i, exc)
            return None

    indices = range(cfg.samples_per_generation)
    if cfg.sample_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.sample_workers) as pool:
            raw = list(pool.map(one, indices))
    else:
        raw = [one(i) for i in indices]
    return [c for c in raw if c is not None]


def _beats(candidate: Candidate, incumbent: Candidate | None,
           stored_score: float | None) -> bool:
    floor = stored_score if stored_score is not None else float("-inf")
    if incumbent is not None:
        floor = max(floor, incumbent.reward)
    return candidate.reward > floor


def run_task_iteration(
    cfg: AgentConfig,
    task: Task,
    store: SystemStore,
    iteration: int,
    horizon: int | None = None,
) -> IterationResult:
    """One task iteration: refresh image, evolve, publish on improvement.

    ``horizon`` caps the image at publishes from iterations <= horizon
    (multiagent mode passes iteration-1 so the image matches what the
    barrier guarantees complete, independent of peer timing); sequential
    mode passes None and reads everything.
    """
    t0 = time.perf_counter()
    space = store.search_space()
    state = load_image(store, horizon)
    stored_best, stored_fp, _ = store.read_best(cfg.task_id)
    stored_score = stored_best.score if stored_best is not None else None

    winner: Candidate | None = None
    n_candidates = 0
    for generation in range(cfg.generations_per_iteration):
        candidates = run_generation(cfg, task, state, space, iteration,
                                    generation)
        n_candidates += len(candidates)
        if not candidates:
            continue
        gen_best = max(candidates, key=lambda c: (c.reward, -c.sample_index))
        if _beats(gen_best, winner, stored_score):
            winner = gen_best
            # Intra-iteration hill climb: the incumbent seeds later
            # generations through the local image's best entry.
            state.set_local_best(gen_best.path)

    best_changed = False
    if winner is not None:
        published = _publish_winner(cfg, task, store, state, winner,
                                    stored_fp, stored_score, iteration)
        best_changed = published is not None
        if best_changed:
            state.set_local_best(published)

    current = state.best_for(cfg.task_id) or stored_best
    wall = time.perf_counter() - t0
    if current is None:
        return IterationResult(
            task_id=cfg.task_id, iteration=iteration, best_changed=False,
            best_score=float("nan"), val_accuracy=float("nan"),
            test_accuracy=float("nan"), accounted_params=float("nan"),
            inference_flops=float("nan"), wall_time_s=wall,
            candidates=n_candidates,
        )
    return IterationResult(
        task_id=cfg.task_id,
        iteration=iteration,
        best_changed=best_changed,
        best_score=current.score,
        val_accuracy=current.val_accuracy,
        test_accuracy=current.test_accuracy,
        accounted_params=accounted_parameters(current, state),
        inference_flops=inference_flops(current, state),
        wall_time_s=wall,
        candidates=n_candidates,
    )


def load_image(store: SystemStore, horizon: int | None) -> SystemState:
    if horizon is None:
        return store.load_system_image()
    return store.load_system_image(max_iteration=horizon)


def _publish_winner(
    cfg: AgentConfig,
    task: Task,
    store: SystemStore,
    state: SystemState,
    winner: Candidate,
    stored_fp: str | None,
    stored_score: float | None,
    iteration: int,
) -> ModelPath | None:
    """Publish the winning candidate's closure and CAS the best record.

    On Conflict the stored record is re-read and rewards re-compared; the
    publish is abandoned if the store moved past us with a better score.
    """
    test_acc = nnet.evaluate(winner.path, state, task.test)
    final = replace(
        winner.path,
        test_accuracy=test_acc,
        mutation_probs=update_action_probs(
            winner.path.mutation_probs, set(winner.applied_keys), True,
            store.search_space(),
        ),
    )
    # The winner may chain off earlier local winners: publish every
    # component of its closure that the store does not hold yet.
    for cid in final.all_ids():
        if not store.has_component(cid):
            store.publish_component(state.resolve(cid))

    expected = stored_fp
    floor = stored_score
    for _ in range(_PUBLISH_RETRIES):
        if floor is not None and final.score <= floor:
            return None
        try:
            store.publish_best(cfg.task_id, final, expected, iteration=iteration)
            return final
        except Conflict:
            fresh, expected, _ = store.read_best(cfg.task_id)
            floor = fresh.score if fresh is not None else None
    logger.warning("gave up publishing best for %s after %d CAS conflicts",
                   cfg.task_id, _PUBLISH_RETRIES)
    return None


def run_agent(
    cfg: AgentConfig,
    task: Task,
    store: SystemStore,
    num_iterations: int,
    barrier_timeout_s: float = 600.0,
    on_event: Callable[[str, int], None] | None = None,
) -> list[IterationResult]:
    """Drive one agent through barriered task iterations.

    Iteration n starts only after every registered agent completed n-1
    (waiting costs no training compute); each iteration refreshes the system
    image from disk as of that horizon.
    """
    results: list[IterationResult] = []
    for n in range(num_iterations):
        wait_start = time.perf_counter()
        store.wait_for_barrier(n, timeout_s=barrier_timeout_s)
        waited = time.perf_counter() - wait_start
        if on_event is not None:
            on_event("start", n)
        result = run_task_iteration(cfg, task, store, n, horizon=n - 1)
        result.barrier_wait_s = waited
        store.mark_iteration_complete(cfg.task_id, n)
        if on_event is not None:
            on_event("complete", n)
        results.append(result)
    return results
