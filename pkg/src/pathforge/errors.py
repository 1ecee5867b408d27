"""Exception taxonomy shared across the package."""

from __future__ import annotations


class PathforgeError(Exception):
    """Base class for all pathforge errors."""


class InvalidComponent(PathforgeError):
    """Component fields are inconsistent (param count, dims, kind)."""


class DimMismatch(PathforgeError):
    """Adjacent layers (or batch and first layer) disagree on feature width."""


class DanglingComponent(PathforgeError):
    """A path references a component id that does not resolve."""

    def __init__(self, component_id: str):
        super().__init__(f"unresolved component id {component_id!r}")
        self.component_id = component_id


class UnsupportedComponentKind(PathforgeError):
    """Component kind unknown to the cost/execution model."""


class EmptyBatch(PathforgeError):
    """Training batch contains zero samples."""


class EmptySplit(PathforgeError):
    """Evaluation split contains zero samples."""


class InvalidBudget(PathforgeError):
    """Training budget resolves to zero SGD steps."""


class TrainingDiverged(PathforgeError):
    """Loss became non-finite during SGD; the child is discarded."""


class NoParentAvailable(PathforgeError):
    """System image holds no path to sample a parent from."""


class IllegalMutation(PathforgeError):
    """Mutation action is not applicable to the parent's shape."""


class InvalidReward(PathforgeError):
    """Reward inputs are non-finite or normalizers are non-positive."""


class InvalidSpec(PathforgeError):
    """Task specification is degenerate or a requested split is empty."""


class StoreError(PathforgeError):
    """Store unavailable or an operation failed after bounded retries."""


class IntegrityViolation(PathforgeError):
    """Stored bytes disagree with their content address.

    Indicates corruption or a hash collision; the experiment must abort.
    """


class Conflict(PathforgeError):
    """Compare-and-swap on a best-path record lost to another writer."""


class DuplicateMarker(PathforgeError):
    """An iteration-completion marker was written twice."""


class BarrierTimeout(PathforgeError):
    """Barrier wait expired; carries the set of laggard agents."""

    def __init__(self, iteration: int, missing: tuple[str, ...]):
        super().__init__(
            f"barrier for iteration {iteration} timed out; "
            f"missing completions from: {', '.join(missing)}"
        )
        self.iteration = iteration
        self.missing = missing


class ReportError(PathforgeError):
    """Run records passed to the reporter have mismatched shapes."""


class ConfigError(PathforgeError):
    """Experiment configuration file is invalid."""
