"""Frozen bilinear base scorer with a low-rank adaptation slot.

The model scores class c on feature vector x as ``q_c @ (W + B A) @ x`` where
W is a frozen d x d matrix learned once on base-class data and q_c is a frozen
unit-norm query vector per class.  Presence is treated as a per-(sample,
class) binary classification under a logistic loss; the gradients returned by
:func:`loss_and_grads` are the exact analytic derivatives of that loss with
respect to the two low-rank factors.

Scoring is pure and thread-safe.  Training state (:class:`AdaptState`) is
owned by a single caller at a time; :func:`sgd_step` never mutates its input.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from dithub import kernels
from dithub.lowrank import RankConfig, as_matrix
from dithub.rng import Rng, derive_seed
from dithub.taskgen import Sample, TaskStream


class PretrainError(RuntimeError):
    """Base pretraining could not reach its target score within the epoch cap."""


@dataclass
class OptimHyper:
    learning_rate: float = 0.5
    momentum: float = 0.9
    epochs: int = 10


@dataclass
class AdaptState:
    """Trainable low-rank factors plus heavy-ball velocities."""

    a: np.ndarray
    b: np.ndarray
    v_a: np.ndarray
    v_b: np.ndarray
    hyper: OptimHyper

    @classmethod
    def fresh(cls, a: np.ndarray, b: np.ndarray, hyper: OptimHyper) -> "AdaptState":
        return cls(a=a, b=b, v_a=np.zeros_like(a), v_b=np.zeros_like(b), hyper=hyper)


@dataclass
class BaseModel:
    """Frozen weight matrix and class query vectors."""

    w: np.ndarray
    queries: dict[str, np.ndarray]
    dims: RankConfig

    def query(self, class_id: str) -> np.ndarray:
        if class_id not in self.queries:
            raise KeyError(f"unknown class {class_id!r}: no query vector")
        return self.queries[class_id]

    def weight_digest(self) -> str:
        return hashlib.sha256(self.w.tobytes()).hexdigest()


def init_expert_factor(dims: RankConfig, rng: Rng, scale: float = 0.02) -> np.ndarray:
    """Small Gaussian init for an A factor; pairs with a zero B so the initial delta is zero."""
    return rng.normal((dims.r, dims.d), sigma=scale)


def zero_projection(dims: RankConfig) -> np.ndarray:
    return np.zeros((dims.d, dims.r))


def _stack_features(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.features for s in samples])


def _presence_matrix(samples: list[Sample], class_ids: list[str]) -> np.ndarray:
    y = np.zeros((len(samples), len(class_ids)))
    for i, sample in enumerate(samples):
        present = set(sample.present_classes)
        for j, c in enumerate(class_ids):
            if c in present:
                y[i, j] = 1.0
    return y


def _query_matrix(model: BaseModel, class_ids: list[str]) -> np.ndarray:
    return np.stack([model.query(c) for c in class_ids])


def score(model: BaseModel, a: np.ndarray | None, b: np.ndarray | None, x: np.ndarray, class_id: str) -> float:
    """q_c @ (W + B A) @ x; with both factors absent this is the zero-shot score."""
    q = model.query(class_id)
    if (a is None) != (b is None):
        raise ValueError("provide both low-rank factors or neither")
    if a is None:
        return float(q @ (model.w @ x))
    wp = model.w + as_matrix(b, "b") @ as_matrix(a, "a")
    return float(q @ (wp @ x))


def score_many(
    model: BaseModel,
    a: np.ndarray | None,
    b: np.ndarray | None,
    features: np.ndarray,
    class_ids: list[str],
) -> np.ndarray:
    """Score matrix of shape (classes, samples) in one adapted forward pass."""
    q = _query_matrix(model, class_ids)
    if a is None:
        wp = model.w
    else:
        wp = model.w + b @ a
    return (q @ wp) @ features.T


def loss_and_grads(
    model: BaseModel,
    a: np.ndarray,
    b: np.ndarray,
    samples: list[Sample],
    class_ids: list[str],
    active_class: str | None = None,
):
    """Mean logistic presence loss and its exact factor gradients.

    The loss averages over every (sample, class) pair; passing ``active_class``
    restricts the pairs to that single class's label terms, which is the
    stochastic single-expert training path.
    """
    if len(samples) == 0:
        raise ValueError("batch must be non-empty")
    if active_class is not None:
        if active_class not in class_ids:
            raise KeyError(f"active class {active_class!r} not among the scored classes")
        class_ids = [active_class]
    x = _stack_features(samples)
    y = _presence_matrix(samples, class_ids)
    q = _query_matrix(model, class_ids)
    loss_sum, ga, gb = kernels.loss_grads_pairs(model.w, a, b, q, x, y)
    n_pairs = len(samples) * len(class_ids)
    return loss_sum / n_pairs, ga / n_pairs, gb / n_pairs


def sgd_step(state: AdaptState, grads: tuple[np.ndarray, np.ndarray], which: str = "both") -> AdaptState:
    """Heavy-ball update v <- momentum*v + g; theta <- theta - lr*v on selected factors."""
    if which not in ("a_only", "b_only", "both"):
        raise ValueError(f"which must be 'a_only', 'b_only', or 'both', got {which!r}")
    lr = state.hyper.learning_rate
    if lr == 0.0:
        return state
    mom = state.hyper.momentum
    ga, gb = grads
    a, v_a, b, v_b = state.a, state.v_a, state.b, state.v_b
    if which in ("a_only", "both"):
        v_a = mom * v_a + ga
        a = a - lr * v_a
    if which in ("b_only", "both"):
        v_b = mom * v_b + gb
        b = b - lr * v_b
    return replace(state, a=a, b=b, v_a=v_a, v_b=v_b)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def pretrain_base(
    stream: TaskStream,
    dims: RankConfig,
    seed: int,
    *,
    target_ap: float = 0.9,
    max_epochs: int = 400,
    learning_rate: float = 5.0,
    momentum: float = 0.9,
) -> BaseModel:
    """Train and freeze the base weight matrix on base-class data.

    Full-batch heavy-ball descent on the multi-label presence loss over the
    stream's base classes, stopped once mean ranking AP on a held-out slice
    reaches ``target_ap``.  Failing to get there within ``max_epochs`` raises
    :class:`PretrainError` (the config is too hard for the base scorer).
    """
    if not stream.base_train:
        raise ValueError("stream has no base training data")
    rng = Rng(derive_seed(seed, "pretrain"))
    class_ids = list(stream.all_class_ids())
    queries = {c: _freeze(_unit_query(rng.spawn("query", c).normal(dims.d))) for c in class_ids}

    base_ids = list(stream.base_class_ids)
    order = rng.spawn("holdout-split").shuffle(list(range(len(stream.base_train))))
    cut = max(1, len(order) // 5)
    holdout = [stream.base_train[i] for i in order[:cut]]
    train = [stream.base_train[i] for i in order[cut:]]

    x = _stack_features(train)
    y = _presence_matrix(train, base_ids)
    q = np.stack([queries[c] for c in base_ids])
    hx = _stack_features(holdout)
    hy = _presence_matrix(holdout, base_ids)

    w = np.zeros((dims.d, dims.d))
    velocity = np.zeros_like(w)
    n_pairs = len(train) * len(base_ids)
    reached = False
    for _ in range(max_epochs):
        _, gw = kernels.base_loss_grads(w, q, x, y)
        velocity = momentum * velocity + gw / n_pairs
        w = w - learning_rate * velocity
        if _holdout_map(w, q, hx, hy) >= target_ap:
            reached = True
            break
    if not reached and _holdout_map(w, q, hx, hy) < target_ap:
        raise PretrainError(
            f"base scorer did not reach AP {target_ap} within {max_epochs} epochs; "
            "the generator config is too hard"
        )
    return BaseModel(w=_freeze(w), queries=queries, dims=dims)


def _unit_query(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _holdout_map(w: np.ndarray, q: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    from dithub.evalkit import average_precision

    scores = (q @ w) @ x.T
    aps = []
    for j in range(q.shape[0]):
        positives = y[:, j] > 0.5
        if not positives.any():
            continue
        aps.append(average_precision(list(scores[j]), list(positives)))
    return float(np.mean(aps)) if aps else 0.0
