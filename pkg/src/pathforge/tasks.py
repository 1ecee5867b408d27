"""Deterministic synthetic benchmark families.

Each family draws class prototypes in a latent space, samples Gaussian
clusters around them, and pushes the latents through a fixed random
nonlinear map into feature space.  Sibling tasks share the per-sample latent
draws and differ by (a) a latent-space rotation composed of seeded Givens
rotations whose angles scale with (1 - relatedness), (b) a seeded label
permutation, and (c) task-private feature noise.  At relatedness 1 and zero
noise every sibling's dataset is bit-identical to the base task up to its
label permutation.

All randomness flows through counter-based Philox streams (see ``rng``), so
dataset bytes are a pure function of the spec.  Features are standardized to
zero mean / unit variance using train-split statistics.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FamilyConfig
from .errors import EmptySplit, InvalidSpec
from .graph import TaskMeta
from .rng import stream

# Generator shape constants.  Fixed (not searchable) so that a TaskSpec alone
# pins the dataset bytes.  The saturating multi-stage map is deliberately
# hard for a linear probe on random features (~0.6 accuracy at the default
# spec) while trained hidden layers recover most of the structure; that gap
# is what makes cross-task transfer measurable at desk scale.
_MIN_LATENT = 4
_PROTO_SCALE = 0.9        # spread of class prototypes in latent space
_CLUSTER_STD = 0.6        # within-class latent standard deviation
_MAP_HIDDEN_FACTOR = 2    # hidden width of each feature-map stage
_MAP_STAGES = 3           # tanh stages in the random feature map
_MAP_GAIN = 3.0           # pre-activation gain (controls warping)
_ROT_PAIRS_FACTOR = 2     # Givens rotations per latent dimension
_ROT_MAX_ANGLE = np.pi / 3.0  # per-rotation angle at relatedness 0
_STD_FLOOR = 1e-6

_SPLITS = ("train", "val", "test")


def latent_dim_for(input_dim: int) -> int:
    return max(_MIN_LATENT, input_dim // 2)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family_seed: int
    task_index: int
    n_classes: int
    input_dim: int
    train_size: int
    val_size: int
    test_size: int
    relatedness: float
    noise_level: float

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidSpec("need at least 2 classes")
        if self.input_dim < 2:
            raise InvalidSpec("need input_dim >= 2")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if not (0.0 <= self.relatedness <= 1.0):
            raise InvalidSpec("relatedness must be in [0, 1]")
        if self.noise_level < 0:
            raise InvalidSpec("noise_level must be >= 0")

    def size_of(self, split: str) -> int:
        return {"train": self.train_size, "val": self.val_size,
                "test": self.test_size}[split]


@dataclass(frozen=True)
class Split:
    inputs: np.ndarray  # float64 [n, input_dim]
    labels: np.ndarray  # int64 [n]

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Task:
    spec: TaskSpec
    train: Split
    val: Split
    test: Split

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def meta(self) -> TaskMeta:
        return TaskMeta(self.task_id, self.n_classes, self.input_dim)

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _feature_map(family_seed: int, input_dim: int):
    """Fixed random nonlinear map from latent space to feature space."""
    latent = latent_dim_for(input_dim)
    hidden = _MAP_HIDDEN_FACTOR * input_dim
    gen = stream("family", family_seed, "feature_map")
    stages = []
    d_in = latent
    for _ in range(_MAP_STAGES):
        w = gen.normal(size=(d_in, hidden)) / np.sqrt(d_in)
        b = gen.normal(size=hidden) * 0.3
        stages.append((w, b))
        d_in = hidden
    w_out = gen.normal(size=(d_in, input_dim)) / np.sqrt(d_in)

    def apply(z: np.ndarray) -> np.ndarray:
        h = z
        for w, b in stages:
            h = np.tanh(_MAP_GAIN * (h @ w + b))
        return h @ w_out

    return apply


def _prototypes(family_seed: int, n_classes: int, latent: int) -> np.ndarray:
    gen = stream("family", family_seed, "prototypes")
    return gen.normal(size=(n_classes, latent)) * _PROTO_SCALE


def _task_rotation(spec: TaskSpec, latent: int) -> np.ndarray | None:
    """Latent rotation for a sibling task; None means identity."""
    alpha = 1.0 - spec.relatedness
    if spec.task_index == 0 or alpha == 0.0:
        return None
    gen = stream("family", spec.family_seed, "transform", spec.task_index)
    rot = np.eye(latent)
    for _ in range(_ROT_PAIRS_FACTOR * latent):
        i, j = gen.choice(latent, size=2, replace=False)
        theta = alpha * _ROT_MAX_ANGLE * gen.uniform(-1.0, 1.0)
        c, s = np.cos(theta), np.sin(theta)
        col_i, col_j = rot[:, i].copy(), rot[:, j].copy()
        rot[:, i] = c * col_i + s * col_j
        rot[:, j] = -s * col_i + c * col_j
    return rot


def _label_permutation(spec: TaskSpec) -> np.ndarray | None:
    if spec.task_index == 0:
        return None
    gen = stream("family", spec.family_seed, "labelperm", spec.task_index)
    return gen.permutation(spec.n_classes)


def generate_task(spec: TaskSpec) -> Task:
    latent = latent_dim_for(spec.input_dim)
    if spec.n_classes > 4 * latent:
        raise InvalidSpec(
            f"{spec.n_classes} classes exceed the feasible cluster count "
            f"for latent dim {latent}"
        )
    protos = _prototypes(spec.family_seed, spec.n_classes, latent)
    feature_map = _feature_map(spec.family_seed, spec.input_dim)
    rot = _task_rotation(spec, latent)
    perm = _label_permutation(spec)

    raw: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for split_name in _SPLITS:
        n = spec.size_of(split_name)
        # Latents are shared across siblings (no task_index in the key) so
        # that relatedness-1 families coincide sample for sample.
        gen = stream("family", spec.family_seed, "latents", split_name)
        base_labels = np.arange(n, dtype=np.int64) % spec.n_classes
        z = protos[base_labels] + _CLUSTER_STD * gen.normal(size=(n, latent))
        if rot is not None:
            z = z @ rot
        x = feature_map(z)
        if spec.noise_level > 0:
            noise_gen = stream("family", spec.family_seed, "noise",
                               spec.task_index, split_name)
            x = x + spec.noise_level * noise_gen.normal(size=x.shape)
        labels = perm[base_labels] if perm is not None else base_labels
        raw[split_name] = (x, labels)

    mu = raw["train"][0].mean(axis=0)
    sigma = raw["train"][0].std(axis=0)
    sigma = np.maximum(sigma, _STD_FLOOR)

    splits = {
        name: Split(inputs=(x - mu) / sigma, labels=labels)
        for name, (x, labels) in raw.items()
    }
    return Task(spec=spec, **splits)


def generate_family(
    family_seed: int,
    n_tasks: int,
    relatedness: float,
    sizes: tuple[int, int, int],
    n_classes: int,
    input_dim: int,
    noise_level: float = 0.0,
    task_prefix: str = "task",
    train_sizes: tuple[int, ...] | None = None,
) -> list[Task]:
    """Materialize ``n_tasks`` sibling tasks of one family."""
    if n_tasks < 1:
        raise InvalidSpec("n_tasks must be >= 1")
    if train_sizes is not None and len(train_sizes) != n_tasks:
        raise InvalidSpec("train_sizes must have one entry per task")
    train, val, test = sizes
    tasks = []
    for idx in range(n_tasks):
        spec = TaskSpec(
            task_id=f"{task_prefix}{idx:02d}",
            family_seed=family_seed,
            task_index=idx,
            n_classes=n_classes,
            input_dim=input_dim,
            train_size=train_sizes[idx] if train_sizes is not None else train,
            val_size=val,
            test_size=test,
            relatedness=relatedness,
            noise_level=noise_level,
        )
        tasks.append(generate_task(spec))
    return tasks


def family_from_config(cfg: FamilyConfig) -> list[Task]:
    return generate_family(
        family_seed=cfg.family_seed,
        n_tasks=cfg.n_tasks,
        relatedness=cfg.relatedness,
        sizes=(cfg.train_size, cfg.val_size, cfg.test_size),
        n_classes=cfg.n_classes,
        input_dim=cfg.input_dim,
        noise_level=cfg.noise_level,
        task_prefix=cfg.task_prefix,
        train_sizes=cfg.train_sizes,
    )


def dataset_stats(task: Task | TaskSpec) -> dict:
    """Read-only summary used by tests: balance, sizes, feature moments."""
    if isinstance(task, TaskSpec):
        task = generate_task(task)
    stats: dict = {"split_sizes": {}, "class_counts": {}}
    for name in _SPLITS:
        split = task.split(name)
        stats["split_sizes"][name] = len(split)
        counts = np.bincount(split.labels, minlength=task.n_classes)
        stats["class_counts"][name] = counts.tolist()
    stats["feature_mean"] = task.train.inputs.mean(axis=0).tolist()
    stats["feature_var"] = task.train.inputs.var(axis=0).tolist()
    return stats


def task_digest(task: Task) -> str:
    """Hash of the materialized dataset bytes (determinism checks)."""
    h = hashlib.sha256()
    for name in _SPLITS:
        split = task.split(name)
        h.update(np.ascontiguousarray(split.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(split.labels, dtype="<i8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# CSV ingestion: header row, label column named `label`, features as decimals
# ---------------------------------------------------------------------------

def _read_csv_split(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidSpec(f"{path}: empty CSV") from None
        if "label" not in header:
            raise InvalidSpec(f"{path}: no column named 'label'")
        label_col = header.index("label")
        feat_cols = [i for i in range(len(header)) if i != label_col]
        xs, ys = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InvalidSpec(f"{path}:{row_no}: expected {len(header)} fields")
            try:
                xs.append([float(row[i]) for i in feat_cols])
                ys.append(int(row[label_col]))
            except ValueError as exc:
                raise InvalidSpec(f"{path}:{row_no}: {exc}") from exc
    if not xs:
        raise EmptySplit(f"{path}: no data rows")
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


def load_csv_task(
    task_id: str,
    train_csv: str | Path,
    val_csv: str | Path,
    test_csv: str | Path,
) -> Task:
    """Build a Task from three CSV files, standardized with train statistics."""
    parts = {name: _read_csv_split(p) for name, p in
             (("train", train_csv), ("val", val_csv), ("test", test_csv))}
    dims = {x.shape[1] for x, _ in parts.values()}
    if len(dims) != 1:
        raise InvalidSpec(f"{task_id}: splits disagree on feature count {dims}")
    labels = np.concatenate([y for _, y in parts.values()])
    if labels.min() < 0:
        raise InvalidSpec(f"{task_id}: labels must be non-negative integers")
    n_classes = int(labels.max()) + 1
    if n_classes < 2:
        raise InvalidSpec(f"{task_id}: need at least 2 classes")

    mu = parts["train"][0].mean(axis=0)
    sigma = np.maximum(parts["train"][0].std(axis=0), _STD_FLOOR)
    splits = {name: Split(inputs=(x - mu) / sigma, labels=y)
              for name, (x, y) in parts.items()}
    input_dim = dims.pop()
    spec = TaskSpec(
        task_id=task_id,
        family_seed=0,
        task_index=0,
        n_classes=n_classes,
        input_dim=input_dim,
        train_size=len(splits["train"]),
        val_size=len(splits["val"]),
        test_size=len(splits["test"]),
        relatedness=0.0,
        noise_level=0.0,
    )
    return Task(spec=spec, **splits)
