"""Minimal differentiable execution engine for component paths.

Forward evaluation, softmax cross-entropy backpropagation restricted to
unfrozen positions, mini-batch SGD with momentum, and accuracy scoring.
Components store float32 parameters; all compute runs in float64 and results
are rounded back to the canonical float32 encoding only when new components
are built.  Gradient isolation holds by construction: frozen positions never
receive a gradient buffer.

Flat parameter layout of affine components: weight [in_dim, out_dim] in row-
major order, then bias [out_dim].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimMismatch,
    EmptyBatch,
    EmptySplit,
    InvalidBudget,
    InvalidComponent,
    TrainingDiverged,
)
from .graph import (
    Component,
    ComponentKind,
    ModelPath,
    SystemState,
    make_component,
)

if TYPE_CHECKING:
    from .evolution import TrainBudget
    from .tasks import Split, Task

# Gradient-key for the task head, which is always trainable.
HEAD = -1


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # [n, in_dim] float64
    labels: np.ndarray  # [n] int64

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("batch inputs must be [n, d], labels [n]")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("batch inputs/labels length mismatch")
        if self.inputs.size and not np.all(np.isfinite(self.inputs)):
            raise ValueError("batch inputs contain NaN/Inf")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class TrainOutcome:
    """Result of one child training run.

    ``new_components`` aligns one-to-one with ``unfrozen_positions`` (sorted);
    the retrained head is reported separately since it is always trainable.
    """

    unfrozen_positions: tuple[int, ...]
    new_components: tuple[Component, ...]
    new_head: Component
    final_train_loss: float
    steps_executed: int


# ---------------------------------------------------------------------------
# Compilation: immutable path -> float64 work representation
# ---------------------------------------------------------------------------

@dataclass
class _Layer:
    kind: ComponentKind
    in_dim: int
    out_dim: int
    weight: np.ndarray | None
    bias: np.ndarray | None
    position: int  # index in component_ids; HEAD for the head


def _split_affine(comp: Component) -> tuple[np.ndarray, np.ndarray]:
    flat = comp.params.astype(np.float64)
    w = flat[: comp.in_dim * comp.out_dim].reshape(comp.in_dim, comp.out_dim)
    b = flat[comp.in_dim * comp.out_dim:]
    return w, b


def _to_layer(comp: Component, position: int) -> _Layer:
    if comp.kind == ComponentKind.ACTIVATION:
        return _Layer(comp.kind, comp.in_dim, comp.out_dim, None, None, position)
    w, b = _split_affine(comp)
    return _Layer(comp.kind, comp.in_dim, comp.out_dim, w, b, position)


class CompiledPath:
    """Float64 working copy of a path's layers, including the head."""

    def __init__(self, layers: list[_Layer], resolution: int):
        self.layers = layers
        self.resolution = resolution

    @property
    def head(self) -> _Layer:
        return self.layers[-1]

    @property
    def n_classes(self) -> int:
        return self.head.out_dim

    def trainable(self, positions: Iterable[int]) -> list[_Layer]:
        wanted = set(positions) | {HEAD}
        chosen = []
        for layer in self.layers:
            if layer.position in wanted:
                if layer.weight is None:
                    raise InvalidComponent(
                        f"position {layer.position} has no trainable parameters"
                    )
                chosen.append(layer)
        missing = wanted - {l.position for l in chosen}
        if missing:
            raise ValueError(f"unfrozen positions {sorted(missing)} not in path")
        return chosen

    # -- parameter vector view over selected layers (used by tests' finite-
    #    difference oracle; forward code is shared, backward code is not) --

    def param_vector(self, positions: Iterable[int]) -> np.ndarray:
        parts = []
        for layer in self.trainable(positions):
            parts.append(layer.weight.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_param_vector(self, positions: Iterable[int], vec: np.ndarray) -> None:
        offset = 0
        for layer in self.trainable(positions):
            n_w = layer.weight.size
            layer.weight = vec[offset:offset + n_w].reshape(layer.weight.shape).copy()
            offset += n_w
            n_b = layer.bias.size
            layer.bias = vec[offset:offset + n_b].copy()
            offset += n_b
        if offset != vec.size:
            raise ValueError("parameter vector length mismatch")


def compile_path(path: ModelPath, state: SystemState) -> CompiledPath:
    layers = [
        _to_layer(state.resolve(cid), pos)
        for pos, cid in enumerate(path.component_ids)
    ]
    layers.append(_to_layer(state.resolve(path.head_id), HEAD))
    return CompiledPath(layers, path.hyperparams.input_resolution)


def _layer_forward(layer: _Layer, x: np.ndarray, resolution: int) -> np.ndarray:
    if layer.kind == ComponentKind.ACTIVATION:
        return np.tanh(x)
    if layer.kind == ComponentKind.EMBEDDING_STUB:
        width = min(resolution, layer.in_dim)
        return x[:, :width] @ layer.weight[:width] + layer.bias
    return x @ layer.weight + layer.bias  # dense and head


def run_forward(compiled: CompiledPath, inputs: np.ndarray) -> np.ndarray:
    x = inputs
    for layer in compiled.layers:
        x = _layer_forward(layer, x, compiled.resolution)
    return x


def forward(path: ModelPath, state: SystemState, batch: Batch) -> np.ndarray:
    """Logits [batch_size, classes] for ``batch`` along ``path``."""
    compiled = compile_path(path, state)
    first = compiled.layers[0]
    if batch.inputs.shape[1] != first.in_dim:
        raise DimMismatch(
            f"batch width {batch.inputs.shape[1]} != first layer in_dim "
            f"{first.in_dim}"
        )
    return run_forward(compiled, batch.inputs)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    if logits.shape[0] == 0:
        raise EmptyBatch("loss over zero samples")
    log_probs = _log_softmax(logits)
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def loss_on(compiled: CompiledPath, batch: Batch) -> float:
    """Forward-only loss; the finite-difference oracle evaluates this."""
    return mean_cross_entropy(run_forward(compiled, batch.inputs), batch.labels)


def _backward(
    compiled: CompiledPath,
    batch: Batch,
    positions: set[int],
) -> tuple[float, dict[int, tuple[np.ndarray, np.ndarray]]]:
    n = len(batch)
    if n == 0:
        raise EmptyBatch("cannot differentiate an empty batch")
    if batch.labels.min() < 0 or batch.labels.max() >= compiled.n_classes:
        raise ValueError("batch labels outside the head's class range")

    cache: list[np.ndarray] = []
    x = batch.inputs
    for layer in compiled.layers:
        cache.append(x)
        x = _layer_forward(layer, x, compiled.resolution)

    log_probs = _log_softmax(x)
    loss = float(-log_probs[np.arange(n), batch.labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), batch.labels] -= 1.0
    grad /= n

    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for idx in range(len(compiled.layers) - 1, -1, -1):
        layer = compiled.layers[idx]
        x_in = cache[idx]
        if layer.kind == ComponentKind.ACTIVATION:
            grad = grad * (1.0 - np.tanh(x_in) ** 2)
            continue
        if layer.position in positions or layer.position == HEAD:
            if layer.kind == ComponentKind.EMBEDDING_STUB:
                # Masked-out input columns cannot influence the loss, so
                # their weight rows carry an exactly-zero gradient.
                width = min(compiled.resolution, layer.in_dim)
                d_w = np.zeros_like(layer.weight)
                d_w[:width] = x_in[:, :width].T @ grad
            else:
                d_w = x_in.T @ grad
            grads[layer.position] = (d_w, grad.sum(axis=0))
        if idx == 0:
            break
        if layer.kind == ComponentKind.EMBEDDING_STUB:
            width = min(compiled.resolution, layer.in_dim)
            nxt = np.zeros((n, layer.in_dim))
            nxt[:, :width] = grad @ layer.weight[:width].T
            grad = nxt
        else:
            grad = grad @ layer.weight.T
    return loss, grads


def loss_and_grads(
    path: ModelPath,
    state: SystemState,
    batch: Batch,
    unfrozen_positions: Iterable[int] = (),
) -> tuple[float, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy and gradients for unfrozen params only.

    The returned dict maps component position -> (d_weight, d_bias); the head
    appears under the ``HEAD`` key.  Frozen positions get no entry at all.
    """
    compiled = compile_path(path, state)
    positions = set(unfrozen_positions)
    compiled.trainable(positions)  # validates positions
    return _backward(compiled, batch, positions)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def steps_for_budget(train_size: int, batch_size: int, epochs: int,
                     samples_cap: int) -> tuple[int, int]:
    """(epochs, steps_per_epoch) actually executed under a budget."""
    per_epoch = min(train_size, samples_cap) // batch_size
    return epochs, per_epoch


def train_child(
    path: ModelPath,
    state: SystemState,
    task: "Task",
    budget: "TrainBudget",
    seed: int,
) -> TrainOutcome:
    """SGD-train the path's unfrozen components plus head on ``task``.

    Deterministic in (path, state, task, budget, seed): ``seed`` is a 128-bit
    Philox key governing epoch shuffling.  Stored components are never
    touched; retrained parameters come back as fresh components.
    """
    hp = path.hyperparams
    epochs = min(hp.epochs, budget.epochs)
    epochs, steps_per_epoch = steps_for_budget(
        task.train.inputs.shape[0], hp.batch_size, epochs, budget.samples_cap
    )
    if epochs < 1 or steps_per_epoch < 1:
        raise InvalidBudget(
            f"budget resolves to zero steps (epochs={epochs}, "
            f"steps/epoch={steps_per_epoch})"
        )

    compiled = compile_path(path, state)
    positions = set(path.unfrozen)
    work = compiled.trainable(positions)
    velocity = {l.position: (np.zeros_like(l.weight), np.zeros_like(l.bias))
                for l in work}

    gen = np.random.Generator(np.random.Philox(key=seed))
    inputs, labels = task.train.inputs, task.train.labels
    train_size = inputs.shape[0]
    last_loss = float("nan")
    steps = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = gen.permutation(train_size)[: steps_per_epoch * hp.batch_size]
            for s in range(steps_per_epoch):
                sel = order[s * hp.batch_size:(s + 1) * hp.batch_size]
                batch = Batch(inputs=inputs[sel], labels=labels[sel])
                last_loss, grads = _backward(compiled, batch, positions)
                if not np.isfinite(last_loss):
                    raise TrainingDiverged(
                        f"non-finite loss at step {steps} "
                        f"(lr={hp.learning_rate}, momentum={hp.momentum})"
                    )
                for layer in work:
                    d_w, d_b = grads[layer.position]
                    v_w, v_b = velocity[layer.position]
                    v_w *= hp.momentum
                    v_w += d_w
                    v_b *= hp.momentum
                    v_b += d_b
                    layer.weight = layer.weight - hp.learning_rate * v_w
                    layer.bias = layer.bias - hp.learning_rate * v_b
                steps += 1

    new_components = []
    for layer in work:
        if layer.position == HEAD:
            continue
        flat = np.concatenate([layer.weight.ravel(), layer.bias])
        new_components.append(make_component(
            layer.kind, layer.in_dim, layer.out_dim, flat,
            origin_task=task.task_id, depth_hint=layer.position,
        ))
    head_layer = compiled.head
    head_flat = np.concatenate([head_layer.weight.ravel(), head_layer.bias])
    new_head = make_component(
        ComponentKind.DENSE, head_layer.in_dim, head_layer.out_dim, head_flat,
        origin_task=task.task_id, depth_hint=len(path.component_ids),
    )
    return TrainOutcome(
        unfrozen_positions=tuple(sorted(positions)),
        new_components=tuple(new_components),
        new_head=new_head,
        final_train_loss=last_loss,
        steps_executed=steps,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(path: ModelPath, state: SystemState, split: "Split") -> float:
    """Argmax accuracy on a split; ties resolve to the lowest class index."""
    if split.inputs.shape[0] == 0:
        raise EmptySplit("cannot evaluate an empty split")
    compiled = compile_path(path, state)
    logits = run_forward(compiled, split.inputs)
    predictions = logits.argmax(axis=1)
    return float((predictions == split.labels).mean())


# ---------------------------------------------------------------------------
# Fresh-parameter initialization
# ---------------------------------------------------------------------------

def init_square_layer(dim: int, gen: np.random.Generator) -> np.ndarray:
    """Near-identity init for a layer added on top of a trained stack.

    Identity plus small uniform noise keeps the incoming representation
    intact in expectation, so new depth does not wreck transferred knowledge
    before training.
    """
    scale = 0.1 / np.sqrt(dim)
    w = np.eye(dim) + gen.uniform(-scale, scale, size=(dim, dim))
    b = np.zeros(dim)
    return np.concatenate([w.ravel(), b])


def init_affine(in_dim: int, out_dim: int, gen: np.random.Generator) -> np.ndarray:
    """Scaled-uniform init for fresh heads and root layers."""
    bound = 1.0 / np.sqrt(in_dim)
    w = gen.uniform(-bound, bound, size=(in_dim, out_dim))
    b = np.zeros(out_dim)
    return np.concatenate([w.ravel(), b])
