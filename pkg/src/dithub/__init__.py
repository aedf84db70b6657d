"""dithub: a version-control-style library of class-specific low-rank adapters.

The package trains one low-rank A factor per object class on top of a frozen
base scorer, shares a single B projection across classes, and manages the
growing collection of experts through branch / fetch / merge / commit
operations backed by an on-disk registry.  Synthetic incremental task streams,
evaluation metrics (ranking AP, zero-shot retention, forgetting), sweeps, and
training-free unlearning by weight subtraction round out the toolkit.
"""

from dithub.lowrank import (
    DimensionError,
    ExpertModule,
    MergeConfig,
    RankConfig,
    SharedProjection,
    apply_adaptation,
    average_experts,
    compose_delta,
    merge_expert,
    merge_shared,
    param_count,
)
from dithub.registry import (
    CommitRecord,
    CorruptModuleError,
    ModuleLibrary,
    RegistryError,
    UnknownVersionError,
    WorkingCopy,
    branch,
    checkout,
    commit_expert,
    commit_shared,
    fetch,
    fetch_shared,
    init_library,
    log,
    open_library,
)
from dithub.rng import Rng, derive_seed
from dithub.taskgen import (
    GenConfig,
    Sample,
    TaskSpec,
    TaskStream,
    fewshot_subsample,
    generate_stream,
    stream_digest,
)
from dithub.toydetect import (
    AdaptState,
    BaseModel,
    OptimHyper,
    PretrainError,
    loss_and_grads,
    pretrain_base,
    score,
    sgd_step,
)
from dithub.trainer import RunRecord, TrainConfig, run_stream, run_task, run_variant
from dithub.evalkit import (
    EvalReport,
    ForgettingReport,
    average_precision,
    eval_snapshot,
    forgetting,
    harmonic_sweep,
    normalized_curve,
    rank_sweep,
    unlearn_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptState",
    "BaseModel",
    "CommitRecord",
    "CorruptModuleError",
    "DimensionError",
    "EvalReport",
    "ExpertModule",
    "ForgettingReport",
    "GenConfig",
    "MergeConfig",
    "ModuleLibrary",
    "OptimHyper",
    "PretrainError",
    "RankConfig",
    "RegistryError",
    "Rng",
    "RunRecord",
    "Sample",
    "SharedProjection",
    "TaskSpec",
    "TaskStream",
    "TrainConfig",
    "UnknownVersionError",
    "WorkingCopy",
    "apply_adaptation",
    "average_experts",
    "average_precision",
    "branch",
    "checkout",
    "commit_expert",
    "commit_shared",
    "compose_delta",
    "derive_seed",
    "eval_snapshot",
    "fetch",
    "fetch_shared",
    "fewshot_subsample",
    "forgetting",
    "generate_stream",
    "harmonic_sweep",
    "init_library",
    "log",
    "loss_and_grads",
    "merge_expert",
    "merge_shared",
    "normalized_curve",
    "open_library",
    "param_count",
    "pretrain_base",
    "rank_sweep",
    "run_stream",
    "run_task",
    "run_variant",
    "score",
    "sgd_step",
    "stream_digest",
    "unlearn_matrix",
]
