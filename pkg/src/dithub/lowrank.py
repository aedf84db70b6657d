"""Dense/low-rank matrix values and the merge, compose, and subtract arithmetic.

All matrices are 2-D float64 numpy arrays with explicit shape checks on every
operation, and every function here is pure: inputs are never mutated, so the
whole module is safe to call from any number of threads.

Floating-point contracts worth knowing:

* ``merge_expert``/``merge_shared`` are computed as ``old + lam * (new - old)``
  with the endpoints ``lam == 0`` and ``lam == 1`` special-cased to copies.
  This makes merging a matrix with itself exact for every ``lam`` (the naive
  ``(1-lam)*old + lam*new`` does not: ``0.7 + 0.3 != 1.0`` in doubles).
* ``average_experts`` averages around the elementwise minimum and sums the
  offsets in sorted order, so the result is independent of module order and a
  list of identical matrices averages to itself bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PHASE_WARMUP = "warmup"
PHASE_SPECIALIZED = "specialized"


class DimensionError(ValueError):
    """Shapes do not conform for the requested operation."""


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 matrix with finite entries."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass
class RankConfig:
    """Dimensions of the adapted layer: rank r, output dim d, input dim k."""

    r: int
    d: int
    k: int | None = None
    num_layers: int = 1

    def __post_init__(self):
        if self.k is None:
            self.k = self.d
        for label, value in (("r", self.r), ("d", self.d), ("k", self.k), ("num_layers", self.num_layers)):
            if value < 1:
                raise ValueError(f"{label} must be positive, got {value}")
        if self.r > min(self.d, self.k):
            raise ValueError(f"rank r={self.r} exceeds min(d, k)={min(self.d, self.k)}")


@dataclass
class MergeConfig:
    """Blend coefficients for expert (lambda_a) and shared (lambda_b) merges."""

    lambda_a: float = 0.3
    lambda_b: float = 0.7

    def __post_init__(self):
        for label, value in (("lambda_a", self.lambda_a), ("lambda_b", self.lambda_b)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{label} must lie in [0, 1], got {value}")


@dataclass
class ExpertModule:
    """A per-class low-rank A factor plus its version metadata."""

    class_id: str
    a: np.ndarray
    version: int
    task_id: str
    parent_version: int | None = None
    phase_tag: str = PHASE_SPECIALIZED


@dataclass
class SharedProjection:
    """The task-shared B factor, keyed by the task index that produced it."""

    b: np.ndarray
    task_index: int


def compose_delta(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Weight update b @ a from an expert factor a (r x d) and projection b (d x r)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if b.shape[1] != a.shape[0]:
        raise DimensionError(
            f"cannot compose: b has shape {b.shape}, a has shape {a.shape}; "
            f"inner dimensions {b.shape[1]} and {a.shape[0]} differ"
        )
    return b @ a


def apply_adaptation(w: np.ndarray, a: np.ndarray, b: np.ndarray, scale: float) -> np.ndarray:
    """w + scale * (b @ a) as a fresh matrix; w itself is never touched.

    ``scale=1`` adapts, negative scales subtract an expert (unlearning), and
    ``scale=0`` returns a bit-identical copy of w.
    """
    w = as_matrix(w, "w")
    if scale == 0.0:
        return w.copy()
    delta = compose_delta(a, b)
    if delta.shape != w.shape:
        raise DimensionError(f"w has shape {w.shape} but b @ a has shape {delta.shape}")
    return w + scale * delta


def _affine_merge(old: np.ndarray, new: np.ndarray, lam: float, label: str) -> np.ndarray:
    old = as_matrix(old, f"{label} (previous)")
    new = as_matrix(new, f"{label} (incoming)")
    if old.shape != new.shape:
        raise DimensionError(f"{label} shapes differ: {old.shape} vs {new.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"merge coefficient must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return old.copy()
    if lam == 1.0:
        return new.copy()
    return old + lam * (new - old)


def merge_expert(a_old: np.ndarray, a_wu: np.ndarray, lambda_a: float) -> np.ndarray:
    """Blend a stored expert with the current warmup factor: (1-lam)*old + lam*new."""
    return _affine_merge(a_old, a_wu, lambda_a, "expert factor")


def merge_shared(b_prev: np.ndarray, b_opt: np.ndarray, lambda_b: float) -> np.ndarray:
    """Blend the previous shared projection with the newly optimized one."""
    return _affine_merge(b_prev, b_opt, lambda_b, "shared projection")


def average_experts(modules: list[np.ndarray]) -> np.ndarray:
    """Unweighted elementwise mean of equally shaped factors.

    Order-independent and exactly idempotent: the mean is taken around the
    elementwise minimum with offsets summed in sorted order.
    """
    if len(modules) == 0:
        raise ValueError("cannot average an empty list of modules")
    mats = [as_matrix(m, f"module[{i}]") for i, m in enumerate(modules)]
    shape = mats[0].shape
    for i, m in enumerate(mats[1:], start=1):
        if m.shape != shape:
            raise DimensionError(f"module[{i}] has shape {m.shape}, expected {shape}")
    if len(mats) == 1:
        return mats[0].copy()
    stack = np.stack(mats)
    lo = stack.min(axis=0)
    offsets = np.sort(stack - lo, axis=0)
    return lo + offsets.sum(axis=0) / len(mats)


def param_count(rank_cfg: RankConfig, num_classes: int, shared_b: bool) -> tuple[int, int]:
    """(per-class, total) trainable parameter counts for a library.

    With a shared projection each class stores only its r x k factor and one
    d x r projection is kept for the whole library; without sharing every
    class stores a full (r x k, d x r) pair.
    """
    if num_classes < 0:
        raise ValueError(f"num_classes must be >= 0, got {num_classes}")
    layers = rank_cfg.num_layers
    a_params = rank_cfg.r * rank_cfg.k
    b_params = rank_cfg.d * rank_cfg.r
    if shared_b:
        per_class = layers * a_params
        total = layers * (num_classes * a_params + b_params)
    else:
        per_class = layers * (a_params + b_params)
        total = layers * num_classes * (a_params + b_params)
    return per_class, total
