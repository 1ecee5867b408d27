"""Search-space and experiment configuration.

Config files use the same canonical JSON dialect as the store manifest.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .graph import HyperParams
from .jsonio import loads


@dataclass(frozen=True)
class SearchSpace:
    """Discrete hyperparameter grids plus evolutionary-method knobs.

    Stored in the store manifest so every agent process agrees on legality
    and probability bounds.
    """

    learning_rates: tuple[float, ...] = (0.03, 0.1, 0.3)
    momenta: tuple[float, ...] = (0.0, 0.5, 0.9)
    batch_sizes: tuple[int, ...] = (16, 32, 64)
    epochs_choices: tuple[int, ...] = (2, 4, 8)
    input_resolutions: tuple[int, ...] = (16, 32)
    min_layers: int = 2
    max_layers: int = 9
    hidden_dim: int = 32
    # Per-action inclusion probabilities (learned per path).
    action_prob_init: float = 0.2
    action_prob_min: float = 0.05
    action_prob_max: float = 0.9
    action_prob_gain: float = 0.2
    # Probability of choosing the task's own best as parent (vs another
    # task's best re-headed for this task).
    own_parent_prob: float = 0.5

    def __post_init__(self):
        if not (0 < self.action_prob_min < self.action_prob_max < 1):
            raise ConfigError("need 0 < action_prob_min < action_prob_max < 1")
        if not (self.action_prob_min <= self.action_prob_init <= self.action_prob_max):
            raise ConfigError("action_prob_init outside probability bounds")
        if not (0.0 <= self.own_parent_prob <= 1.0):
            raise ConfigError("own_parent_prob must be in [0, 1]")
        if not (1 <= self.min_layers <= self.max_layers):
            raise ConfigError("need 1 <= min_layers <= max_layers")
        for name in ("learning_rates", "momenta", "batch_sizes",
                     "epochs_choices", "input_resolutions"):
            grid = getattr(self, name)
            if len(grid) == 0:
                raise ConfigError(f"{name} grid is empty")
            if list(grid) != sorted(grid) or len(set(grid)) != len(grid):
                raise ConfigError(f"{name} grid must be strictly increasing")

    def grid_for(self, field_name: str) -> tuple:
        grids = {
            "learning_rate": self.learning_rates,
            "momentum": self.momenta,
            "batch_size": self.batch_sizes,
            "epochs": self.epochs_choices,
            "input_resolution": self.input_resolutions,
        }
        try:
            return grids[field_name]
        except KeyError:
            raise ConfigError(f"unknown hyperparameter field {field_name!r}") from None

    def hyperparam_fields(self) -> tuple[str, ...]:
        return ("learning_rate", "momentum", "batch_size", "epochs",
                "input_resolution")

    def default_hyperparams(self) -> HyperParams:
        # Middle of each grid (upper middle for even lengths).
        pick = lambda g: g[len(g) // 2]
        return HyperParams(
            learning_rate=pick(self.learning_rates),
            momentum=pick(self.momenta),
            batch_size=pick(self.batch_sizes),
            epochs=pick(self.epochs_choices),
            input_resolution=pick(self.input_resolutions),
        )

    def step(self, field_name: str, value, direction: str):
        """Neighboring grid value one step up/down, or None at the boundary."""
        grid = self.grid_for(field_name)
        try:
            idx = grid.index(value)
        except ValueError:
            raise ConfigError(
                f"{field_name} value {value!r} is not on its grid {grid}"
            ) from None
        idx += 1 if direction == "up" else -1
        if 0 <= idx < len(grid):
            return grid[idx]
        return None

    def validate_hyperparams(self, hp: HyperParams) -> bool:
        return all(
            getattr(hp, name) in self.grid_for(name)
            for name in self.hyperparam_fields()
        )

    def to_record(self) -> dict:
        rec = {}
        for f in dc_fields(self):
            value = getattr(self, f.name)
            rec[f.name] = list(value) if isinstance(value, tuple) else value
        return rec

    @staticmethod
    def from_record(rec: Mapping) -> "SearchSpace":
        return SearchSpace(**{
            f.name: tuple(rec[f.name]) if isinstance(rec[f.name], list) else rec[f.name]
            for f in dc_fields(SearchSpace) if f.name in rec
        })


@dataclass(frozen=True)
class FamilyConfig:
    """Synthetic task-family parameters."""

    family_seed: int = 7
    n_tasks: int = 8
    relatedness: float = 0.9
    n_classes: int = 12
    input_dim: int = 32
    train_size: int = 1024
    val_size: int = 256
    test_size: int = 256
    noise_level: float = 0.05
    task_prefix: str = "task"
    # Optional per-task train sizes (index-aligned); used for
    # budget-proportional experiments.  Overrides train_size when set.
    train_sizes: tuple[int, ...] | None = None

    def to_record(self) -> dict:
        rec = {
            "family_seed": self.family_seed,
            "n_tasks": self.n_tasks,
            "relatedness": self.relatedness,
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "noise_level": self.noise_level,
            "task_prefix": self.task_prefix,
        }
        if self.train_sizes is not None:
            rec["train_sizes"] = list(self.train_sizes)
        return rec


@dataclass(frozen=True)
class AgentTemplate:
    """Per-agent evolutionary budget shared by all tasks of an experiment."""

    generations_per_iteration: int = 4
    samples_per_generation: int = 8
    budget_epochs: int = 4
    budget_samples_cap: int = 2048
    cost_scale: float = 1.0

    def __post_init__(self):
        if self.generations_per_iteration < 1 or self.samples_per_generation < 1:
            raise ConfigError("generations and samples per generation must be >= 1")
        if self.budget_epochs < 1 or self.budget_samples_cap < 1:
            raise ConfigError("training budget must be positive")
        if self.cost_scale < 0:
            raise ConfigError("cost_scale must be >= 0")

    def to_record(self) -> dict:
        return {
            "generations_per_iteration": self.generations_per_iteration,
            "samples_per_generation": self.samples_per_generation,
            "budget_epochs": self.budget_epochs,
            "budget_samples_cap": self.budget_samples_cap,
            "cost_scale": self.cost_scale,
        }


@dataclass(frozen=True)
class CsvTaskConfig:
    task_id: str
    train_csv: str
    val_csv: str
    test_csv: str


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "sequential"  # "sequential" | "multiagent"
    seed: int = 0
    repetitions: int = 1
    iterations: int = 10
    equal_budget: bool = False
    processes: bool = False
    workspace: str = "runs/experiment"
    barrier_timeout_s: float = 600.0
    # Reward normalizers are this multiple of the root model's costs.  At
    # desk scale paths can shrink far below the root, and normalizing at the
    # root itself lets the cost discounts outweigh accuracy entirely; a wide
    # margin keeps cost a tie-breaker, matching the near-root-sized regime
    # the reward was designed for.
    cost_norm_margin: float = 32.0
    family: FamilyConfig = field(default_factory=FamilyConfig)
    csv_tasks: tuple[CsvTaskConfig, ...] = ()
    agent: AgentTemplate = field(default_factory=AgentTemplate)
    space: SearchSpace = field(default_factory=SearchSpace)

    def __post_init__(self):
        if self.mode not in ("sequential", "multiagent"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.cost_norm_margin <= 0:
            raise ConfigError("cost_norm_margin must be positive")

    def to_record(self) -> dict:
        rec = {
            "mode": self.mode,
            "seed": self.seed,
            "repetitions": self.repetitions,
            "iterations": self.iterations,
            "equal_budget": self.equal_budget,
            "processes": self.processes,
            "workspace": self.workspace,
            "barrier_timeout_s": self.barrier_timeout_s,
            "cost_norm_margin": self.cost_norm_margin,
            "family": self.family.to_record(),
            "agent": self.agent.to_record(),
            "space": self.space.to_record(),
        }
        if self.csv_tasks:
            rec["csv_tasks"] = [
                {"task_id": t.task_id, "train_csv": t.train_csv,
                 "val_csv": t.val_csv, "test_csv": t.test_csv}
                for t in self.csv_tasks
            ]
        return rec


def _build(cls, data: Mapping, context: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{context}: expected an object")
    known = {f.name for f in dc_fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for f in dc_fields(cls):
        if f.name in data:
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def experiment_from_record(rec: Mapping) -> ExperimentConfig:
    if not isinstance(rec, Mapping):
        raise ConfigError("config root must be an object")
    top_known = {f.name for f in dc_fields(ExperimentConfig)}
    unknown = set(rec) - top_known
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {k: v for k, v in rec.items()
                              if k not in ("family", "agent", "space", "csv_tasks")}
    if "family" in rec:
        kwargs["family"] = _build(FamilyConfig, rec["family"], "family")
    if "agent" in rec:
        kwargs["agent"] = _build(AgentTemplate, rec["agent"], "agent")
    if "space" in rec:
        kwargs["space"] = SearchSpace.from_record(rec["space"])
        extra = set(rec["space"]) - {f.name for f in dc_fields(SearchSpace)}
        if extra:
            raise ConfigError(f"space: unknown keys {sorted(extra)}")
    if "csv_tasks" in rec:
        kwargs["csv_tasks"] = tuple(
            _build(CsvTaskConfig, item, "csv_tasks") for item in rec["csv_tasks"]
        )
    return ExperimentConfig(**kwargs)


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        rec = loads(text)
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return experiment_from_record(rec)
