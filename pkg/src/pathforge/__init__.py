"""pathforge: asynchronous multiagent evolution of a shared modular
multitask ML system, with a sequential single-program baseline.

Independent per-task agents mutate, train, and score candidate model paths
over a shared graph of immutable, content-addressed layer components,
synchronizing only through a sharded on-disk system state.
"""

from .config import (
    AgentTemplate,
    ExperimentConfig,
    FamilyConfig,
    SearchSpace,
    load_experiment_config,
)
from .errors import (
    BarrierTimeout,
    Conflict,
    DanglingComponent,
    DuplicateMarker,
    IllegalMutation,
    IntegrityViolation,
    InvalidBudget,
    InvalidComponent,
    InvalidReward,
    InvalidSpec,
    PathforgeError,
    StoreError,
)
from .evolution import (
    AgentConfig,
    IterationResult,
    TrainBudget,
    reward,
    run_agent,
    run_generation,
    run_task_iteration,
)
from .graph import (
    Component,
    ComponentKind,
    CostNorms,
    HyperParams,
    ModelPath,
    ROOT_TASK,
    SystemState,
    TaskMeta,
    Violation,
    accounted_parameters,
    component_id,
    inference_flops,
    make_component,
    path_fingerprint,
    validate_path,
)
from .mutation import (
    AddLayerOnTop,
    CloneLayer,
    HyperparamStep,
    MutationAction,
    RemoveTopLayer,
    SwapTransferSource,
    action_key,
    apply_mutations,
    sample_mutations,
    sample_parent,
    update_action_probs,
)
from .nnet import Batch, TrainOutcome, evaluate, forward, loss_and_grads, train_child
from .store import SystemStore
from .tasks import (
    Split,
    Task,
    TaskSpec,
    dataset_stats,
    generate_family,
    generate_task,
    load_csv_task,
)

__version__ = "0.1.0"
