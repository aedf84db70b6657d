"""Quantitative instruments: ranking AP, snapshots, forgetting, sweeps, unlearning.

Detection quality is reduced to per-class presence ranking: for one class,
every evaluation sample gets a score and AP is the mean of precision-at-rank
over the positions of the positive samples (descending scores, ties broken by
stable input order, which keeps AP reproducible across implementations).

Snapshot evaluation mirrors the two inference strategies of the module
library: a composite adapter averaged from the prompted classes' experts
applied in a single forward pass, or one directly selected class module.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dithub import registry
from dithub.lowrank import MergeConfig, RankConfig, apply_adaptation, average_experts, param_count
from dithub.taskgen import Sample, TaskSpec, TaskStream
from dithub.toydetect import BaseModel

PAIR_SUFFIX = "#B"

SWEEP_CSV_HEADER = ["lambda_a", "lambda_b", "avg", "zero_shot", "harmonic"]


@dataclass
class EvalReport:
    per_task_ap: dict[str, float]
    avg: float
    zero_shot: float
    composed_modules: list[str]
    zero_shot_pristine: float
    zero_shot_pristine_per_class: dict[str, float]
    per_task_class_ap: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "per_task_ap": dict(self.per_task_ap),
            "avg": self.avg,
            "zero_shot": self.zero_shot,
            "composed_modules": list(self.composed_modules),
            "zero_shot_pristine": self.zero_shot_pristine,
            "zero_shot_pristine_per_class": dict(self.zero_shot_pristine_per_class),
            "per_task_class_ap": {t: dict(v) for t, v in self.per_task_class_ap.items()},
        }


@dataclass
class ForgettingReport:
    per_task: dict[str, float]
    avg: float

    def to_dict(self) -> dict:
        return {"per_task": dict(self.per_task), "avg": self.avg}


def average_precision(scores: list[float], positives: list[bool]) -> float:
    """Mean precision at the rank of each positive, scores sorted descending.

    Ties are broken by stable input order.  Raises if the two lists disagree
    in length or there is no positive at all.
    """
    if len(scores) != len(positives):
        raise ValueError(f"{len(scores)} scores vs {len(positives)} labels")
    flags = np.asarray(positives, dtype=bool)
    if not flags.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    ranked = flags[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float(np.mean(hits[ranked] / ranks[ranked]))


def class_aps(model: BaseModel, wp: np.ndarray, samples: list[Sample], class_ids) -> dict[str, float]:
    """Per-class AP over one sample list; classes without positives are skipped."""
    x = np.stack([s.features for s in samples])
    q = np.stack([model.query(c) for c in class_ids])
    scores = (q @ wp) @ x.T
    out: dict[str, float] = {}
    for j, c in enumerate(class_ids):
        flags = [c in s.present_classes for s in samples]
        if not any(flags):
            continue
        out[c] = average_precision(list(scores[j]), flags)
    return out


def composite_weight(
    model: BaseModel,
    lib: registry.ModuleLibrary,
    prompt_classes,
    paired_b: bool,
) -> tuple[np.ndarray, list[str]]:
    """Adapted weight for one prompt: experts averaged, shared B applied once."""
    factors = []
    used: list[str] = []
    deltas = []
    for c in sorted(prompt_classes):
        mod = registry.fetch(lib, c)
        if mod is None:
            continue
        used.append(c)
        if paired_b:
            pair = registry.fetch(lib, c + PAIR_SUFFIX)
            if pair is None:
                raise registry.RegistryError(f"class {c!r} has no stored projection factor")
            deltas.append(pair.a @ mod.a)
        else:
            factors.append(mod.a)
    if not used:
        return model.w, used
    if paired_b:
        return model.w + average_experts(deltas), used
    shared = registry.fetch_shared(lib)
    if shared is None:
        return model.w, used
    return model.w + shared.b @ average_experts(factors), used


def eval_snapshot(
    model: BaseModel,
    lib: registry.ModuleLibrary | None,
    tasks_seen: list[TaskSpec],
    zero_shot_set: list[Sample],
    mode: str = "composed",
    single_class: str | None = None,
    paired_b: bool = False,
    adapter_override: tuple[np.ndarray, np.ndarray] | None = None,
) -> EvalReport:
    """Evaluate every seen task plus the zero-shot set.

    ``mode='composed'`` fetches the prompted classes' modules per task and
    averages them; ``mode='single'`` restricts the prompt to ``single_class``;
    ``mode='none'`` scores with base weights everywhere.  ``adapter_override``
    applies one fixed (a, b) pair to every prompt, bypassing the library.
    """
    if mode not in ("composed", "single", "none"):
        raise ValueError(f"mode must be 'composed', 'single', or 'none', got {mode!r}")
    if mode == "single" and single_class is None:
        raise ValueError("mode='single' needs single_class")

    used_any: set[str] = set()

    def weight_for(prompt):
        if adapter_override is not None:
            a, b = adapter_override
            return model.w + b @ a
        if mode == "none" or lib is None:
            return model.w
        wp, used = composite_weight(model, lib, prompt, paired_b)
        used_any.update(used)
        return wp

    per_task: dict[str, float] = {}
    per_task_class: dict[str, dict[str, float]] = {}
    for task in tasks_seen:
        prompt = [single_class] if mode == "single" else list(task.class_ids)
        if mode == "single" and single_class not in task.class_ids:
            continue
        wp = weight_for(prompt)
        aps = class_aps(model, wp, task.test, prompt)
        if not aps:
            continue
        per_task_class[task.task_id] = aps
        per_task[task.task_id] = float(np.mean(list(aps.values())))

    zero_classes = sorted({c for s in zero_shot_set for c in s.present_classes})
    pristine = class_aps(model, model.w, zero_shot_set, zero_classes) if zero_shot_set else {}
    if zero_shot_set:
        prompt = [single_class] if mode == "single" else zero_classes
        if mode == "single" and single_class not in zero_classes:
            zero_shot = float(np.mean(list(pristine.values())))
        else:
            wz = weight_for(prompt)
            z_aps = class_aps(model, wz, zero_shot_set, prompt)
            zero_shot = float(np.mean(list(z_aps.values()))) if z_aps else 0.0
    else:
        zero_shot = 0.0

    avg = float(np.mean(list(per_task.values()))) if per_task else 0.0
    pristine_avg = float(np.mean(list(pristine.values()))) if pristine else 0.0
    return EvalReport(
        per_task_ap=per_task,
        avg=avg,
        zero_shot=zero_shot,
        composed_modules=sorted(used_any),
        zero_shot_pristine=pristine_avg,
        zero_shot_pristine_per_class=pristine,
        per_task_class_ap=per_task_class,
    )


def forgetting(history: list[EvalReport], learn_order: list[str]) -> ForgettingReport:
    """Final-checkpoint AP minus at-learning AP, per task.

    ``history[i]`` is the snapshot taken right after learning
    ``learn_order[i]``; the last-learned task's delta is 0 by construction.
    """
    if len(history) != len(learn_order):
        raise ValueError(f"{len(history)} checkpoints vs {len(learn_order)} learned tasks")
    if not history:
        return ForgettingReport(per_task={}, avg=0.0)
    final = history[-1].per_task_ap
    per_task: dict[str, float] = {}
    for i, task_id in enumerate(learn_order):
        if task_id not in history[i].per_task_ap:
            raise ValueError(f"checkpoint {i} is missing the task just learned: {task_id}")
        per_task[task_id] = final[task_id] - history[i].per_task_ap[task_id]
    avg = float(np.mean(list(per_task.values())))
    return ForgettingReport(per_task=per_task, avg=avg)


def normalized_curve(history: list[EvalReport], learn_order: list[str]) -> dict[str, list[float]]:
    """Each task's AP trace divided by its at-learning value (1.0 at learning).

    Tasks whose at-learning AP is zero are omitted: the ratio is undefined.
    """
    curves: dict[str, list[float]] = {}
    for i, task_id in enumerate(learn_order):
        at_learning = history[i].per_task_ap.get(task_id)
        if at_learning is None or at_learning == 0.0:
            continue
        curves[task_id] = [
            history[j].per_task_ap[task_id] / at_learning for j in range(i, len(history))
        ]
    return curves


def harmonic_mean(avg: float, zero_shot: float) -> float:
    if avg + zero_shot == 0.0:
        return 0.0
    return 2.0 * avg * zero_shot / (avg + zero_shot)


def harmonic_sweep(
    stream: TaskStream,
    cfg,
    grid: list[tuple[float, float]],
    model: BaseModel | None = None,
    work_dir=None,
) -> list[dict]:
    """Run the full pipeline per (lambda_a, lambda_b) grid point.

    Returns one row per point with the final average AP, zero-shot AP, and
    their harmonic mean.  Each point runs in its own fresh library, placed
    under ``work_dir`` when given.
    """
    from dithub import trainer

    if model is None:
        model = trainer.pretrain_for(stream, cfg)
    rows = []
    for i, (lambda_a, lambda_b) in enumerate(grid):
        point_cfg = replace(cfg, merge=MergeConfig(lambda_a=lambda_a, lambda_b=lambda_b))
        root = None if work_dir is None else Path(work_dir) / f"point-{i:03d}"
        record = trainer.run_variant(stream, point_cfg, model=model, lib_root=root)
        final = record.checkpoints[-1]
        rows.append(
            {
                "lambda_a": lambda_a,
                "lambda_b": lambda_b,
                "avg": final["avg"],
                "zero_shot": final["zero_shot"],
                "harmonic": harmonic_mean(final["avg"], final["zero_shot"]),
            }
        )
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in SWEEP_CSV_HEADER})


def rank_sweep(
    stream: TaskStream,
    cfg,
    ranks: list[int],
    model: BaseModel | None = None,
    work_dir=None,
) -> list[dict]:
    """Final performance and parameter count at each adapter rank."""
    from dithub import trainer

    if model is None:
        model = trainer.pretrain_for(stream, cfg)
    num_classes = len(stream.task_class_union())
    rows = []
    for r in ranks:
        dims = RankConfig(r=r, d=model.dims.d, k=model.dims.k, num_layers=model.dims.num_layers)
        rank_model = BaseModel(w=model.w, queries=model.queries, dims=dims)
        rank_cfg = replace(cfg, rank=r)
        root = None if work_dir is None else Path(work_dir) / f"rank-{r:02d}"
        record = trainer.run_variant(stream, rank_cfg, model=rank_model, lib_root=root)
        final = record.checkpoints[-1]
        _, total = param_count(dims, num_classes, shared_b=True)
        rows.append(
            {
                "rank": r,
                "param_count": total,
                "avg": final["avg"],
                "zero_shot": final["zero_shot"],
            }
        )
    return rows


def unlearn_row(
    model: BaseModel,
    lib: registry.ModuleLibrary,
    eval_samples: list[Sample],
    class_id: str,
    alpha: float,
    eval_classes: list[str] | None = None,
) -> dict[str, float]:
    """AP delta per evaluated class after subtracting one class's expert."""
    mod = registry.fetch(lib, class_id)
    if mod is None:
        raise registry.RegistryError(f"class {class_id!r} has no committed expert to subtract")
    shared = registry.fetch_shared(lib)
    if shared is None:
        raise registry.RegistryError("library has no shared projection; nothing to subtract with")
    if eval_classes is None:
        eval_classes = _library_classes(lib)
    baseline = class_aps(model, model.w, eval_samples, eval_classes)
    w_prime = apply_adaptation(model.w, mod.a, shared.b, -alpha)
    after = class_aps(model, w_prime, eval_samples, eval_classes)
    return {c: after[c] - baseline[c] for c in baseline}


def unlearn_matrix(
    model: BaseModel,
    lib: registry.ModuleLibrary,
    eval_samples: list[Sample],
    alpha: float,
) -> tuple[list[str], np.ndarray]:
    """Entry (i, j): AP change of class j after subtracting class i's expert.

    Rows and columns are the library's classes in sorted order, restricted to
    classes that have at least one positive among ``eval_samples``.
    """
    classes = _library_classes(lib)
    present = {c for s in eval_samples for c in s.present_classes}
    classes = [c for c in classes if c in present]
    matrix = np.zeros((len(classes), len(classes)))
    for i, removed in enumerate(classes):
        row = unlearn_row(model, lib, eval_samples, removed, alpha, eval_classes=classes)
        for j, c in enumerate(classes):
            matrix[i, j] = row[c]
    return classes, matrix


def _library_classes(lib: registry.ModuleLibrary) -> list[str]:
    return sorted(c for c in lib.manifest if not c.endswith(PAIR_SUFFIX))
