"""Deterministic generator of incremental detection-like task streams.

Each class gets a unit-norm prototype vector, each task gets a domain
transform, and every sample is the transformed sum of the prototypes of the
1-3 classes it contains plus isotropic Gaussian noise.  Two regimes are
supported:

* ``disjoint_like``: tasks introduce mostly fresh classes (pairwise class
  overlap stays at zero, plus an optional slice of base classes re-used in
  single tasks);
* ``overlapped``: every class appears in at least two tasks, each time under
  that task's own domain transform, so per-class knowledge must survive
  domain shift.

A configurable fraction of the zero-shot base classes also appears inside
tasks, which is the channel through which incremental training can move the
zero-shot evaluation away from its pristine value.

All draws run through :mod:`dithub.rng` substreams (``prototypes``,
``transform/<task>``, ``samples/<task>``, ...) so equal configs produce
byte-identical streams and exports.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from dithub.rng import Rng, derive_seed

REGIME_DISJOINT = "disjoint_like"
REGIME_OVERLAPPED = "overlapped"
TRANSFORM_KINDS = ("rotation", "diagonal_scale", "identity")


@dataclass
class Sample:
    features: np.ndarray
    present_classes: tuple[str, ...]
    domain_id: str


@dataclass
class TaskSpec:
    task_id: str
    class_ids: tuple[str, ...]
    domain_id: str
    train: list[Sample]
    test: list[Sample]
    rare_class_ids: tuple[str, ...] = ()


@dataclass
class TaskStream:
    tasks: list[TaskSpec]
    zero_shot_set: list[Sample]
    regime: str
    base_class_ids: tuple[str, ...]
    base_train: list[Sample]
    prototypes: dict[str, np.ndarray]
    transforms: dict[str, np.ndarray]
    config: "GenConfig"

    def all_class_ids(self) -> tuple[str, ...]:
        seen = set(self.base_class_ids)
        for task in self.tasks:
            seen.update(task.class_ids)
        return tuple(sorted(seen))

    def task_class_union(self) -> tuple[str, ...]:
        seen: set[str] = set()
        for task in self.tasks:
            seen.update(task.class_ids)
        return tuple(sorted(seen))


@dataclass
class GenConfig:
    d: int = 32
    num_base_classes: int = 8
    num_task_classes: int = 4
    num_tasks: int = 6
    samples_per_class: int = 200
    rare_class_fraction: float = 0.2
    rare_multiplier: float = 0.1
    noise_sigma: float = 0.1
    domain_transform: str = "rotation"
    overlap_fraction_with_base: float = 0.25
    max_pairwise_overlap: float = 0.0
    regime: str = REGIME_DISJOINT
    test_fraction: float = 0.25
    zero_shot_samples_per_class: int = 50
    max_classes_per_sample: int = 3
    task_order_seed: int | None = None
    seed: int = 0

    def __post_init__(self):
        positives = {
            "d": self.d,
            "num_base_classes": self.num_base_classes,
            "num_task_classes": self.num_task_classes,
            "num_tasks": self.num_tasks,
            "samples_per_class": self.samples_per_class,
            "zero_shot_samples_per_class": self.zero_shot_samples_per_class,
            "max_classes_per_sample": self.max_classes_per_sample,
        }
        for label, value in positives.items():
            if value < 1:
                raise ValueError(f"{label} must be positive, got {value}")
        fractions = {
            "rare_class_fraction": self.rare_class_fraction,
            "rare_multiplier": self.rare_multiplier,
            "overlap_fraction_with_base": self.overlap_fraction_with_base,
            "max_pairwise_overlap": self.max_pairwise_overlap,
            "test_fraction": self.test_fraction,
        }
        for label, value in fractions.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{label} must lie in [0, 1], got {value}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.domain_transform not in TRANSFORM_KINDS:
            raise ValueError(f"domain_transform must be one of {TRANSFORM_KINDS}")
        if self.regime not in (REGIME_DISJOINT, REGIME_OVERLAPPED):
            raise ValueError(f"regime must be '{REGIME_DISJOINT}' or '{REGIME_OVERLAPPED}'")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _make_transform(kind: str, d: int, rng: Rng) -> np.ndarray:
    if kind == "identity":
        return np.eye(d)
    if kind == "rotation":
        m = rng.normal((d, d))
        q, r = np.linalg.qr(m)
        # sign-fix so the decomposition (and thus the stream) is deterministic
        return q * np.sign(np.diag(r))
    scales = np.exp(rng.uniform(d) * (np.log(2.0) - np.log(0.5)) + np.log(0.5))
    return np.diag(scales)


def _assign_overlapped(cfg: GenConfig, overlap_base: list[str]) -> list[list[str]]:
    """Class lists per task where every class lands in >= 2 distinct tasks."""
    tasks, per_task = cfg.num_tasks, cfg.num_task_classes
    if tasks < 2:
        raise ValueError("overlapped regime needs at least two tasks")
    if per_task % 2 == 1 and tasks % 2 == 1:
        raise ValueError(
            "overlapped regime requires num_task_classes or num_tasks to be even "
            f"(got {per_task} classes over {tasks} tasks)"
        )
    pairs: list[tuple[int, int]] = []
    full_blocks = per_task // 2
    if full_blocks > tasks - 1:
        raise ValueError(
            f"overlapped regime cannot place {per_task} classes per task across {tasks} tasks"
        )
    for block in range(full_blocks):
        delta = block + 1
        for t in range(tasks):
            pairs.append((t, (t + delta) % tasks))
    if per_task % 2 == 1:
        for t in range(0, tasks, 2):
            pairs.append((t, t + 1))
    names = list(overlap_base[: len(pairs)])
    names += [f"ovc{i:02d}" for i in range(len(names), len(pairs))]
    assignments: list[list[str]] = [[] for _ in range(tasks)]
    for name, (t1, t2) in zip(names, pairs):
        assignments[t1].append(name)
        assignments[t2].append(name)
    return assignments


def _assign_disjoint(cfg: GenConfig, overlap_base: list[str]) -> list[list[str]]:
    assignments = [
        [f"t{t:02d}c{j}" for j in range(cfg.num_task_classes)] for t in range(cfg.num_tasks)
    ]
    for i, name in enumerate(overlap_base):
        t = i % cfg.num_tasks
        slot = cfg.num_task_classes - 1 - (i // cfg.num_tasks)
        if slot < 0:
            break
        assignments[t][slot] = name
    return assignments


def _synthesize(
    rng: Rng,
    count: int,
    anchor: str,
    class_pool: tuple[str, ...],
    moved: dict[str, np.ndarray],
    sigma: float,
    domain_id: str,
    max_present: int,
) -> list[Sample]:
    out = []
    limit = min(max_present, len(class_pool))
    others = [c for c in class_pool if c != anchor]
    for _ in range(count):
        k = 1 + rng.integers(limit)
        present = [anchor] + rng.sample(others, k - 1)
        present = tuple(sorted(present))
        x = moved[present[0]].copy()
        for c in present[1:]:
            x += moved[c]
        if sigma > 0.0:
            x = x + rng.normal(x.shape[0], sigma)
        out.append(Sample(features=x, present_classes=present, domain_id=domain_id))
    return out


def _per_class_counts(cfg: GenConfig, classes: list[str], rare: set[str]) -> dict[str, tuple[int, int]]:
    counts = {}
    for c in classes:
        n_train = cfg.samples_per_class
        if c in rare:
            n_train = max(1, int(round(cfg.samples_per_class * cfg.rare_multiplier)))
        n_test = max(1, int(round(n_train * cfg.test_fraction)))
        counts[c] = (n_train, n_test)
    return counts


def generate_stream(cfg: GenConfig) -> TaskStream:
    """Build the full stream for a config; equal configs give equal streams."""
    rng = Rng(cfg.seed)
    base_ids = tuple(f"base{i:02d}" for i in range(cfg.num_base_classes))

    n_ov = int(round(cfg.overlap_fraction_with_base * cfg.num_base_classes))
    overlap_base = rng.spawn("overlap").sample(list(base_ids), n_ov)

    if cfg.regime == REGIME_OVERLAPPED:
        assignments = _assign_overlapped(cfg, overlap_base)
    else:
        assignments = _assign_disjoint(cfg, overlap_base)

    all_ids = sorted(set(base_ids) | {c for cls in assignments for c in cls})
    proto_rng = rng.spawn("prototypes")
    prototypes = {c: _unit(proto_rng.normal(cfg.d)) for c in all_ids}

    task_ids = [f"task{t:02d}" for t in range(cfg.num_tasks)]
    transforms: dict[str, np.ndarray] = {}
    tasks: list[TaskSpec] = []
    for t, task_id in enumerate(task_ids):
        classes = sorted(assignments[t])
        transform = _make_transform(cfg.domain_transform, cfg.d, rng.spawn("transform", task_id))
        transforms[task_id] = transform
        moved = {c: transform @ prototypes[c] for c in classes}
        rare_count = int(round(cfg.rare_class_fraction * len(classes)))
        rare = set(rng.spawn("rare", task_id).sample(classes, rare_count))
        counts = _per_class_counts(cfg, classes, rare)
        domain_id = f"dom-{task_id}"
        train_rng = rng.spawn("samples", task_id)
        test_rng = rng.spawn("test-samples", task_id)
        train: list[Sample] = []
        test: list[Sample] = []
        pool = tuple(classes)
        for c in classes:
            n_train, n_test = counts[c]
            train += _synthesize(
                train_rng, n_train, c, pool, moved, cfg.noise_sigma, domain_id, cfg.max_classes_per_sample
            )
            test += _synthesize(
                test_rng, n_test, c, pool, moved, cfg.noise_sigma, domain_id, cfg.max_classes_per_sample
            )
        tasks.append(
            TaskSpec(
                task_id=task_id,
                class_ids=pool,
                domain_id=domain_id,
                train=train,
                test=test,
                rare_class_ids=tuple(sorted(rare)),
            )
        )

    if cfg.task_order_seed is not None:
        tasks = Rng(cfg.task_order_seed).shuffle(tasks)

    identity_moved = {c: prototypes[c] for c in base_ids}
    zero_shot = []
    zs_rng = rng.spawn("zeroshot")
    for c in base_ids:
        zero_shot += _synthesize(
            zs_rng, cfg.zero_shot_samples_per_class, c, base_ids, identity_moved,
            cfg.noise_sigma, "base", cfg.max_classes_per_sample,
        )
    base_train = []
    bt_rng = rng.spawn("basetrain")
    for c in base_ids:
        base_train += _synthesize(
            bt_rng, cfg.samples_per_class, c, base_ids, identity_moved,
            cfg.noise_sigma, "base", cfg.max_classes_per_sample,
        )

    stream = TaskStream(
        tasks=tasks,
        zero_shot_set=zero_shot,
        regime=cfg.regime,
        base_class_ids=base_ids,
        base_train=base_train,
        prototypes=prototypes,
        transforms=transforms,
        config=cfg,
    )
    _validate_stream(stream)
    return stream


def _validate_stream(stream: TaskStream):
    counts: dict[str, int] = {}
    for task in stream.tasks:
        for c in task.class_ids:
            counts[c] = counts.get(c, 0) + 1
    if stream.regime == REGIME_OVERLAPPED:
        short = [c for c, n in counts.items() if n < 2]
        if short:
            raise ValueError(f"overlapped stream has classes in fewer than two tasks: {short}")
    else:
        cap = stream.config.max_pairwise_overlap * stream.config.num_task_classes
        for i, ta in enumerate(stream.tasks):
            for tb in stream.tasks[i + 1 :]:
                shared = set(ta.class_ids) & set(tb.class_ids)
                if len(shared) > cap:
                    raise ValueError(
                        f"tasks {ta.task_id} and {tb.task_id} share {sorted(shared)}, "
                        f"exceeding the configured overlap bound"
                    )


def fewshot_subsample(task: TaskSpec, k: int, seed: int) -> TaskSpec:
    """Keep at most k train samples per class; test data is untouched.

    A sample counts toward every class it contains, so the cap is enforced
    jointly: a sample is kept only while all of its classes are below k.  A
    final pass tries to cover classes the shuffled scan missed, again without
    breaking the cap.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts: dict[str, int] = {c: 0 for c in task.class_ids}
    kept: set[int] = set()

    def fits(sample: Sample) -> bool:
        return all(counts.get(c, 0) < k for c in sample.present_classes)

    def keep(idx: int):
        kept.add(idx)
        for c in task.train[idx].present_classes:
            counts[c] = counts.get(c, 0) + 1

    # coverage first, rarest classes first: their few samples are the hardest
    # to place without bumping another class over the cap
    availability = {
        c: sum(1 for s in task.train if c in s.present_classes) for c in task.class_ids
    }
    for c in sorted(task.class_ids, key=lambda c: (availability[c], c)):
        if counts.get(c, 0) > 0:
            continue
        candidates = sorted(
            (len(task.train[i].present_classes), i)
            for i in range(len(task.train))
            if c in task.train[i].present_classes
        )
        for _, idx in candidates:
            if idx not in kept and fits(task.train[idx]):
                keep(idx)
                break
    order = Rng(derive_seed(seed, "fewshot", task.task_id)).shuffle(list(range(len(task.train))))
    for idx in order:
        if idx not in kept and fits(task.train[idx]):
            keep(idx)
    train = [task.train[i] for i in sorted(kept)]
    return TaskSpec(
        task_id=task.task_id,
        class_ids=task.class_ids,
        domain_id=task.domain_id,
        train=train,
        test=task.test,
        rare_class_ids=task.rare_class_ids,
    )


def stream_digest(stream: TaskStream) -> dict:
    """Summary record: class frequencies, overlap matrix, sizes, transform bounds."""
    union = stream.task_class_union()
    counts = {c: 0 for c in union}
    for task in stream.tasks:
        for c in task.class_ids:
            counts[c] += 1
    overlap = [
        [len(set(a.class_ids) & set(b.class_ids)) for b in stream.tasks] for a in stream.tasks
    ]
    per_task = {}
    for task in stream.tasks:
        norms = [float(np.linalg.norm(stream.transforms[task.task_id] @ stream.prototypes[c])) for c in task.class_ids]
        per_task[task.task_id] = {
            "classes": list(task.class_ids),
            "rare_classes": list(task.rare_class_ids),
            "train_samples": len(task.train),
            "test_samples": len(task.test),
            "min_scale": min(norms),
            "max_scale": max(norms),
        }
    return {
        "regime": stream.regime,
        "class_task_counts": counts,
        "overlap_matrix": overlap,
        "per_task": per_task,
        "zero_shot_samples": len(stream.zero_shot_set),
        "base_train_samples": len(stream.base_train),
        "base_classes_in_tasks": sorted(set(stream.base_class_ids) & set(union)),
    }


def _sample_line(sample: Sample, split: str, task_id: str | None) -> str:
    return json.dumps(
        {
            "type": "sample",
            "split": split,
            "task": task_id,
            "features": [float(v) for v in sample.features],
            "classes": list(sample.present_classes),
            "domain": sample.domain_id,
        },
        sort_keys=True,
    )


def stream_to_jsonl(stream: TaskStream, path) -> None:
    """Line-delimited JSON export: one meta line, then one line per sample."""
    meta = {
        "type": "meta",
        "schema": 1,
        "regime": stream.regime,
        "config": asdict(stream.config),
        "base_class_ids": list(stream.base_class_ids),
        "tasks": [
            {
                "task_id": t.task_id,
                "class_ids": list(t.class_ids),
                "rare_class_ids": list(t.rare_class_ids),
                "domain_id": t.domain_id,
            }
            for t in stream.tasks
        ],
        "prototypes": {c: [float(v) for v in p] for c, p in sorted(stream.prototypes.items())},
        "transforms": {
            tid: [[float(v) for v in row] for row in m] for tid, m in sorted(stream.transforms.items())
        },
    }
    lines = [json.dumps(meta, sort_keys=True)]
    for sample in stream.base_train:
        lines.append(_sample_line(sample, "base_train", None))
    for sample in stream.zero_shot_set:
        lines.append(_sample_line(sample, "zero_shot", None))
    for task in stream.tasks:
        for sample in task.train:
            lines.append(_sample_line(sample, "train", task.task_id))
        for sample in task.test:
            lines.append(_sample_line(sample, "test", task.task_id))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stream_from_jsonl(path) -> TaskStream:
    """Rebuild a stream from its JSONL export (exact float round-trip)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path} is empty")
    meta = json.loads(lines[0])
    if meta.get("type") != "meta":
        raise ValueError(f"{path} does not start with a meta line")
    cfg = GenConfig(**meta["config"])
    task_meta = {t["task_id"]: t for t in meta["tasks"]}
    task_order = [t["task_id"] for t in meta["tasks"]]
    buckets: dict[str, dict[str, list[Sample]]] = {tid: {"train": [], "test": []} for tid in task_order}
    zero_shot: list[Sample] = []
    base_train: list[Sample] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        raw = json.loads(line)
        sample = Sample(
            features=np.asarray(raw["features"], dtype=np.float64),
            present_classes=tuple(raw["classes"]),
            domain_id=raw["domain"],
        )
        split = raw["split"]
        if split == "zero_shot":
            zero_shot.append(sample)
        elif split == "base_train":
            base_train.append(sample)
        else:
            buckets[raw["task"]][split].append(sample)
    tasks = [
        TaskSpec(
            task_id=tid,
            class_ids=tuple(task_meta[tid]["class_ids"]),
            domain_id=task_meta[tid]["domain_id"],
            train=buckets[tid]["train"],
            test=buckets[tid]["test"],
            rare_class_ids=tuple(task_meta[tid]["rare_class_ids"]),
        )
        for tid in task_order
    ]
    return TaskStream(
        tasks=tasks,
        zero_shot_set=zero_shot,
        regime=meta["regime"],
        base_class_ids=tuple(meta["base_class_ids"]),
        base_train=base_train,
        prototypes={c: np.asarray(p, dtype=np.float64) for c, p in meta["prototypes"].items()},
        transforms={tid: np.asarray(m, dtype=np.float64) for tid, m in meta["transforms"].items()},
        config=cfg,
    )
