"""End-to-end incremental training: warmup, branch, specialize, merge, commit.

Per task the pipeline (variant ``dithub``) is:

1. **warmup** - a fresh small-Gaussian A factor and the library's current
   shared projection are trained jointly on all of the task's data with full
   multi-label presence terms;
2. **branch** - every task class gets a working copy: returning classes blend
   their stored expert with the warmup factor, new classes start from the
   warmup factor itself;
3. **specialize** - for each training sample one class is drawn uniformly
   from the classes present in it, and the gradient of that class's label
   term flows into its branch and into the shared projection (batches share
   one evolving projection, sequentially);
4. **commit** - every branch becomes a new expert version and the shared
   projection is blended with its previous checkpoint before being stored.

Variants: ``ene`` draws the trained module uniformly from all task classes
and keeps every label term; ``base`` drops warmup and both merges (fresh
random branches, raw projection overwrite); ``full_lora`` gives every class
its own projection factor and runs the same pipeline on both factors;
``naive_seq`` fine-tunes a single (A, B) pair across all tasks with no
library.  The ablation flags (``use_warmup``, ``use_expert_merge``,
``use_shared_merge``) can also be toggled individually.

One run owns its library and model mutably; independent runs on distinct
library directories may execute in parallel.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dithub import registry
from dithub.evalkit import EvalReport, eval_snapshot, forgetting, normalized_curve
from dithub.lowrank import MergeConfig, RankConfig, merge_shared
from dithub.rng import Rng, derive_seed
from dithub.taskgen import TaskSpec, TaskStream
from dithub.toydetect import (
    AdaptState,
    BaseModel,
    OptimHyper,
    init_expert_factor,
    loss_and_grads,
    pretrain_base,
    sgd_step,
    zero_projection,
)

VARIANTS = ("dithub", "ene", "base", "full_lora", "naive_seq")
PAIR_SUFFIX = "#B"


@dataclass
class TrainConfig:
    merge: MergeConfig = field(default_factory=MergeConfig)
    rank: int = 4
    warmup_epochs: int = 10
    spec_epochs: int = 10
    batch_size: int = 32
    optim: OptimHyper = field(default_factory=OptimHyper)
    variant: str = "dithub"
    seed: int = 0
    use_warmup: bool = True
    use_expert_merge: bool = True
    use_shared_merge: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "base":
            self.use_warmup = False
            self.use_expert_merge = False
            self.use_shared_merge = False
        for label, value in (
            ("rank", self.rank),
            ("batch_size", self.batch_size),
        ):
            if value < 1:
                raise ValueError(f"{label} must be positive, got {value}")
        if self.warmup_epochs < 0 or self.spec_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class RunRecord:
    variant: str
    seed: int
    learn_order: list[str]
    checkpoints: list[dict]
    forgetting: dict
    normalized: dict[str, list[float]]
    wall_clock_s: float
    config: dict
    library_root: str | None
    metadata: dict
    history: list[EvalReport] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "learn_order": list(self.learn_order),
            "checkpoints": self.checkpoints,
            "forgetting": self.forgetting,
            "normalized": self.normalized,
            "wall_clock_s": self.wall_clock_s,
            "config": self.config,
            "library_root": self.library_root,
            "metadata": self.metadata,
        }


def pretrain_for(stream: TaskStream, cfg: TrainConfig) -> BaseModel:
    """Pretrain the frozen base scorer for a stream.

    Seeded by the stream's own seed, so every variant and run seed sees the
    same frozen weights.
    """
    dims = RankConfig(r=cfg.rank, d=stream.config.d)
    return pretrain_base(stream, dims, seed=stream.config.seed)


def _batches(order: list[int], batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def _select_class(cfg: TrainConfig, task: TaskSpec, epoch: int, sample_idx: int, pool) -> str:
    u = derive_seed(cfg.seed, "select", task.task_id, epoch, sample_idx)
    return pool[u % len(pool)]


def warmup(
    task: TaskSpec,
    lib: registry.ModuleLibrary,
    model: BaseModel,
    cfg: TrainConfig,
    *,
    paired: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Train the class-agnostic warmup factor jointly with the projection.

    The projection continues from the library's latest shared checkpoint
    (zeros on the first task); in paired mode it starts from zeros instead,
    since paired libraries keep per-class projections.
    """
    rng = Rng(derive_seed(cfg.seed, "warmup-init", task.task_id))
    a = init_expert_factor(model.dims, rng)
    if paired:
        b = zero_projection(model.dims)
    else:
        shared = registry.fetch_shared(lib)
        b = shared.b.copy() if shared is not None else zero_projection(model.dims)
    state = AdaptState.fresh(a, b, cfg.optim)
    classes = list(task.class_ids)
    n = len(task.train)
    for epoch in range(cfg.warmup_epochs):
        order = Rng(derive_seed(cfg.seed, "warmup-order", task.task_id, epoch)).shuffle(list(range(n)))
        for batch in _batches(order, cfg.batch_size):
            samples = [task.train[i] for i in batch]
            _, ga, gb = loss_and_grads(model, state.a, state.b, samples, classes)
            state = sgd_step(state, (ga, gb), "both")
    registry.commit_warmup(lib, state.a, task_id=task.task_id)
    return state.a, state.b


def _branch_copies(
    task: TaskSpec,
    lib: registry.ModuleLibrary,
    model: BaseModel,
    cfg: TrainConfig,
    a_wu: np.ndarray | None,
    *,
    suffix: str = "",
    merge_lambda: float | None = None,
    fallback_b: bool = False,
) -> dict[str, registry.WorkingCopy]:
    """Branch initialization honoring the warmup / expert-merge flags."""
    classes = sorted(task.class_ids)
    lam = cfg.merge.lambda_a if merge_lambda is None else merge_lambda

    def fresh(class_id: str) -> np.ndarray:
        rng = Rng(derive_seed(cfg.seed, "branch-init", task.task_id, class_id + suffix))
        if fallback_b:
            return zero_projection(model.dims)
        return init_expert_factor(model.dims, rng)

    if a_wu is None:
        return {
            c + suffix: registry.WorkingCopy(c + suffix, fresh(c), None, None) for c in classes
        }
    if cfg.use_expert_merge:
        return registry.branch(lib, task.task_id, [c + suffix for c in classes], a_wu, lam)
    return {
        c + suffix: registry.WorkingCopy(c + suffix, a_wu.copy(), None, None) for c in classes
    }


def specialize(
    task: TaskSpec,
    a_wu: np.ndarray | None,
    b_opt: np.ndarray,
    lib: registry.ModuleLibrary,
    model: BaseModel,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], np.ndarray, dict[str, int]]:
    """Per-class branch training with stochastic single-class selection.

    Returns the committed expert matrices, the projection after the phase,
    and how many sample draws each class received.
    """
    classes = sorted(task.class_ids)
    copies = _branch_copies(task, lib, model, cfg, a_wu)
    states = {c: AdaptState.fresh(copies[c].a, b_opt, cfg.optim) for c in classes}
    dummy_a = np.zeros((model.dims.r, model.dims.d))
    b_state = AdaptState.fresh(dummy_a, b_opt, cfg.optim)
    sel_counts = {c: 0 for c in classes}
    n = len(task.train)
    ene = cfg.variant == "ene"
    for epoch in range(cfg.spec_epochs):
        order = Rng(derive_seed(cfg.seed, "spec-order", task.task_id, epoch)).shuffle(list(range(n)))
        for batch in _batches(order, cfg.batch_size):
            groups: dict[str, list[int]] = {}
            for i in batch:
                pool = classes if ene else task.train[i].present_classes
                c = _select_class(cfg, task, epoch, i, pool)
                sel_counts[c] += 1
                groups.setdefault(c, []).append(i)
            gb_total = np.zeros_like(b_state.b)
            ga_parts: dict[str, np.ndarray] = {}
            for c in sorted(groups):
                samples = [task.train[i] for i in groups[c]]
                if ene:
                    _, ga, gb = loss_and_grads(model, states[c].a, b_state.b, samples, classes)
                else:
                    _, ga, gb = loss_and_grads(
                        model, states[c].a, b_state.b, samples, classes, active_class=c
                    )
                weight = len(samples) / len(batch)
                ga_parts[c] = ga * weight
                gb_total += gb * weight
            for c in sorted(ga_parts):
                states[c] = sgd_step(states[c], (ga_parts[c], None), "a_only")
            b_state = sgd_step(b_state, (None, gb_total), "b_only")
    experts = {}
    for c in classes:
        copy = copies[c]
        parents = [copy.parent_version] if copy.parent_version is not None else []
        registry.commit_expert(
            lib, c, states[c].a, task_id=task.task_id, lambda_used=copy.lambda_used, parent_versions=parents
        )
        experts[c] = states[c].a
    return experts, b_state.b, sel_counts


def _specialize_paired(
    task: TaskSpec,
    a_wu: np.ndarray,
    b_wu: np.ndarray,
    lib: registry.ModuleLibrary,
    model: BaseModel,
    cfg: TrainConfig,
) -> dict[str, int]:
    """Specialization with class-specific projection factors (no shared B)."""
    classes = sorted(task.class_ids)
    a_copies = _branch_copies(task, lib, model, cfg, a_wu)
    b_copies = _branch_copies(task, lib, model, cfg, b_wu, suffix=PAIR_SUFFIX, fallback_b=True)
    states = {
        c: AdaptState.fresh(a_copies[c].a, b_copies[c + PAIR_SUFFIX].a, cfg.optim) for c in classes
    }
    sel_counts = {c: 0 for c in classes}
    n = len(task.train)
    for epoch in range(cfg.spec_epochs):
        order = Rng(derive_seed(cfg.seed, "spec-order", task.task_id, epoch)).shuffle(list(range(n)))
        for batch in _batches(order, cfg.batch_size):
            groups: dict[str, list[int]] = {}
            for i in batch:
                c = _select_class(cfg, task, epoch, i, task.train[i].present_classes)
                sel_counts[c] += 1
                groups.setdefault(c, []).append(i)
            for c in sorted(groups):
                samples = [task.train[i] for i in groups[c]]
                _, ga, gb = loss_and_grads(
                    model, states[c].a, states[c].b, samples, classes, active_class=c
                )
                weight = len(samples) / len(batch)
                states[c] = sgd_step(states[c], (ga * weight, gb * weight), "both")
    for c in classes:
        a_copy, b_copy = a_copies[c], b_copies[c + PAIR_SUFFIX]
        registry.commit_expert(
            lib,
            c,
            states[c].a,
            task_id=task.task_id,
            lambda_used=a_copy.lambda_used,
            parent_versions=[a_copy.parent_version] if a_copy.parent_version is not None else [],
        )
        registry.commit_expert(
            lib,
            c + PAIR_SUFFIX,
            states[c].b,
            task_id=task.task_id,
            lambda_used=b_copy.lambda_used,
            parent_versions=[b_copy.parent_version] if b_copy.parent_version is not None else [],
        )
    return sel_counts


def run_task(
    task: TaskSpec,
    lib: registry.ModuleLibrary,
    model: BaseModel,
    cfg: TrainConfig,
    *,
    tasks_seen: list[TaskSpec],
    zero_shot_set,
) -> tuple[EvalReport, dict]:
    """One full task: warmup, specialization, commits, evaluation snapshot."""
    paired = cfg.variant == "full_lora"
    if cfg.use_warmup:
        a_wu, b_opt = warmup(task, lib, model, cfg, paired=paired)
    else:
        a_wu = None
        if paired:
            b_opt = zero_projection(model.dims)
        else:
            shared = registry.fetch_shared(lib)
            b_opt = shared.b.copy() if shared is not None else zero_projection(model.dims)

    if paired:
        sel_counts = _specialize_paired(task, a_wu, b_opt, lib, model, cfg)
    else:
        _, b_final, sel_counts = specialize(task, a_wu, b_opt, lib, model, cfg)
        if cfg.use_shared_merge:
            prev = registry.fetch_shared(lib)
            b_prev = prev.b if prev is not None else zero_projection(model.dims)
            b_next = merge_shared(b_prev, b_final, cfg.merge.lambda_b)
        else:
            b_next = b_final
        # the library keeps one shared projection per task it has ever seen,
        # so reuse across runs keeps appending rather than colliding
        registry.commit_shared(lib, b_next, len(lib.shared_indices), task_id=task.task_id)

    report = eval_snapshot(
        model, lib, tasks_seen + [task], zero_shot_set, paired_b=paired
    )
    entry = {
        "task_id": task.task_id,
        "avg": report.avg,
        "zero_shot": report.zero_shot,
        "zero_shot_pristine": report.zero_shot_pristine,
        "per_task_ap": dict(report.per_task_ap),
        "composed_modules": list(report.composed_modules),
        "selection_counts": sel_counts,
    }
    return report, entry


def _run_naive(stream: TaskStream, model: BaseModel, cfg: TrainConfig) -> RunRecord:
    """Sequential fine-tuning of one global (A, B) pair; no library at all."""
    started = time.perf_counter()
    rng = Rng(derive_seed(cfg.seed, "naive-init"))
    state = AdaptState.fresh(init_expert_factor(model.dims, rng), zero_projection(model.dims), cfg.optim)
    epochs = cfg.warmup_epochs + cfg.spec_epochs
    history: list[EvalReport] = []
    checkpoints: list[dict] = []
    learn_order: list[str] = []
    for idx, task in enumerate(stream.tasks):
        classes = list(task.class_ids)
        n = len(task.train)
        for epoch in range(epochs):
            order = Rng(derive_seed(cfg.seed, "naive-order", task.task_id, epoch)).shuffle(list(range(n)))
            for batch in _batches(order, cfg.batch_size):
                samples = [task.train[i] for i in batch]
                _, ga, gb = loss_and_grads(model, state.a, state.b, samples, classes)
                state = sgd_step(state, (ga, gb), "both")
        report = eval_snapshot(
            model, None, stream.tasks[: idx + 1], stream.zero_shot_set,
            adapter_override=(state.a, state.b),
        )
        history.append(report)
        learn_order.append(task.task_id)
        checkpoints.append(
            {
                "task_id": task.task_id,
                "avg": report.avg,
                "zero_shot": report.zero_shot,
                "zero_shot_pristine": report.zero_shot_pristine,
                "per_task_ap": dict(report.per_task_ap),
                "composed_modules": [],
                "selection_counts": {},
            }
        )
    forget = forgetting(history, learn_order)
    return RunRecord(
        variant=cfg.variant,
        seed=cfg.seed,
        learn_order=learn_order,
        checkpoints=checkpoints,
        forgetting=forget.to_dict(),
        normalized=normalized_curve(history, learn_order),
        wall_clock_s=time.perf_counter() - started,
        config=asdict(cfg),
        library_root=None,
        metadata=_run_metadata(),
        history=history,
    )


def _run_metadata() -> dict:
    return {
        "projection_carry": "b_opt carries through branches within a task",
        "selection_rng": "derive(seed, 'select', task_id, epoch, sample_index)",
        "phase_shuffles": "warmup and specialization use independent epoch shuffles",
    }


def run_stream(
    stream: TaskStream,
    lib: registry.ModuleLibrary | None,
    model: BaseModel,
    cfg: TrainConfig,
) -> RunRecord:
    """Run every task in order, evaluating all seen tasks after each one."""
    if cfg.variant == "naive_seq":
        return _run_naive(stream, model, cfg)
    if lib is None:
        raise ValueError(f"variant {cfg.variant!r} needs a module library")
    started = time.perf_counter()
    history: list[EvalReport] = []
    checkpoints: list[dict] = []
    learn_order: list[str] = []
    for idx, task in enumerate(stream.tasks):
        report, entry = run_task(
            task,
            lib,
            model,
            cfg,
            tasks_seen=stream.tasks[:idx],
            zero_shot_set=stream.zero_shot_set,
        )
        history.append(report)
        checkpoints.append(entry)
        learn_order.append(task.task_id)
    forget = forgetting(history, learn_order)
    return RunRecord(
        variant=cfg.variant,
        seed=cfg.seed,
        learn_order=learn_order,
        checkpoints=checkpoints,
        forgetting=forget.to_dict(),
        normalized=normalized_curve(history, learn_order),
        wall_clock_s=time.perf_counter() - started,
        config=asdict(cfg),
        library_root=str(lib.root),
        metadata=_run_metadata(),
        history=history,
    )


def run_variant(
    stream: TaskStream,
    cfg: TrainConfig,
    *,
    model: BaseModel | None = None,
    lib_root=None,
) -> RunRecord:
    """Convenience entry point: pretrain (or reuse) a model, open or create
    the library when the variant needs one, and run the full stream.

    An existing initialized library at ``lib_root`` is opened and extended
    (new expert versions, appended shared projections); an absent path is
    initialized fresh.
    """
    if model is None:
        model = pretrain_for(stream, cfg)
    if cfg.variant == "naive_seq":
        return run_stream(stream, None, model, cfg)
    if lib_root is None:
        import tempfile

        lib_root = tempfile.mkdtemp(prefix="dithub-lib-")
        lib = registry.init_library(Path(lib_root) / "lib")
    else:
        root = Path(lib_root)
        if (root / registry.MANIFEST_NAME).is_file():
            lib = registry.open_library(root)
        else:
            lib = registry.init_library(root)
    return run_stream(stream, lib, model, cfg)
