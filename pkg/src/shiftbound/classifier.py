"""Downstream tasks, the mean classifier, and the task distributions used by the bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .encoder import LinearEncoder, encode
from .latent_model import (
    ClassPrior,
    LatentModel,
    draw_classes,
    draw_classes_no_collision,
    tuple_table,
)
from .losses import MarginLossKind, loss_values
from .rng import Estimate, make_rng, monte_carlo

if TYPE_CHECKING:
    from .io import EmbeddingSet


@dataclass(frozen=True, eq=False)
class Task:
    """A set of distinct classes with a label distribution (uniform by default).

    ``anchor`` records the anchor class when the task came from a contrastive tuple.
    """

    classes: tuple
    label_dist: np.ndarray | None = None
    anchor: object = None

    def __post_init__(self):
        classes = tuple(self.classes)
        if len(classes) < 2:
            raise ValueError("a task needs at least two classes")
        if len(set(classes)) != len(classes):
            raise ValueError("task classes must be distinct")
        if self.label_dist is None:
            dist = np.full(len(classes), 1.0 / len(classes))
        else:
            dist = np.array(self.label_dist, dtype=float)
            if dist.shape != (len(classes),) or np.any(dist < 0) or abs(dist.sum() - 1) > 1e-12:
                raise ValueError("label_dist must be a probability vector over the task classes")
        dist.setflags(write=False)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "label_dist", dist)

    @property
    def size(self) -> int:
        return len(self.classes)

    @property
    def p_max(self) -> float:
        return float(self.label_dist.max())


@dataclass(frozen=True, eq=False)
class MeanClassifier:
    """One row per class; predicts the class whose row has the largest inner product."""

    labels: tuple
    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        labels = tuple(self.labels)
        if rows.ndim != 2 or rows.shape[0] != len(labels):
            raise ValueError("need exactly one row per class label")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_means(cls, means: dict, labels=None) -> "MeanClassifier":
        labels = tuple(means) if labels is None else tuple(labels)
        missing = [c for c in labels if c not in means]
        if missing:
            raise KeyError(f"no mean for classes {missing}")
        return cls(labels, np.stack([np.asarray(means[c], dtype=float) for c in labels]))

    def scores(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.rows.shape[1]:
            raise ValueError(f"query dimension {z.shape[-1]} != classifier dimension {self.rows.shape[1]}")
        return z @ self.rows.T

    def predict_index(self, z: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.scores(z), axis=-1)


def class_means(source, encoder: LinearEncoder | None = None, labels=None) -> dict:
    """Class means of ``f(x)``: exact for a :class:`LatentModel`, empirical for an EmbeddingSet.

    Model classes are keyed by integer index, dataset classes by label string.
    """
    if isinstance(source, LatentModel):
        keys = range(source.n_classes) if labels is None else labels
        return {c: encode(encoder, source.classes[c].mean) for c in keys}
    keys = source.classes if labels is None else labels
    out = {}
    for c in keys:
        rows = source.rows_for(c)
        if rows.shape[0] == 0:
            raise ValueError(f"class {c!r} has no samples")
        out[c] = encode(encoder, rows).mean(axis=0)
    return out


def mean_classify(clf: MeanClassifier, z) -> object:
    """Predicted class label for a single query vector."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError("mean_classify takes one vector; use MeanClassifier.predict_index for batches")
    return clf.labels[int(clf.predict_index(z))]


def accuracy_mean(dataset: "EmbeddingSet", clf: MeanClassifier, encoder: LinearEncoder | None = None) -> float:
    index = {c: i for i, c in enumerate(clf.labels)}
    unknown = sorted(set(dataset.labels) - set(index))
    if unknown:
        raise ValueError(f"labels {unknown} are not classifier classes")
    truth = np.array([index[c] for c in dataset.labels])
    pred = clf.predict_index(encode(encoder, dataset.vectors))
    return float(np.mean(pred == truth))


def _task_margins(fx: np.ndarray, rows: np.ndarray, label_pos: np.ndarray) -> np.ndarray:
    """Margins ``<f(x), mu_c - mu_c'>`` against every other task class, in task order."""
    t = rows.shape[0]
    scores = fx @ rows.T
    own = scores[np.arange(fx.shape[0]), label_pos]
    others = np.ones((fx.shape[0], t), dtype=bool)
    others[np.arange(fx.shape[0]), label_pos] = False
    return (own[:, None] - scores)[others].reshape(fx.shape[0], t - 1)


def sup_loss_mean(
    source,
    task: Task,
    means: dict,
    kind: MarginLossKind,
    draws: int = 100_000,
    seed: int = 0,
    encoder: LinearEncoder | None = None,
) -> Estimate:
    """Margin loss of the mean classifier built from ``means`` on ``task``.

    For a model, ``x`` is drawn from the model's class distributions; for an
    EmbeddingSet the loss is averaged exhaustively over the task's rows.
    """
    missing = [c for c in task.classes if c not in means]
    if missing:
        raise KeyError(f"no mean for task classes {missing}")
    rows = np.stack([np.asarray(means[c], dtype=float) for c in task.classes])
    lk = kind.with_ways(task.size - 1)

    if isinstance(source, LatentModel):
        def draw(rng, n):
            pos = rng.choice(task.size, size=n, p=task.label_dist)
            labels = np.asarray(task.classes)[pos]
            fx = encode(encoder, source.sample_labels(labels, rng))
            return loss_values(lk, _task_margins(fx, rows, pos))

        return monte_carlo(draw, draws, seed, "sup_loss_mean").estimate()

    total = var = 0.0
    for i, c in enumerate(task.classes):
        fx = encode(encoder, source.rows_for(c))
        if fx.shape[0] == 0:
            raise ValueError(f"class {c!r} has no samples")
        losses = loss_values(lk, _task_margins(fx, rows, np.full(fx.shape[0], i)))
        w = task.label_dist[i]
        total += w * losses.mean()
        if losses.size > 1:
            var += w * w * losses.var(ddof=1) / losses.size
    return Estimate(float(total), math.sqrt(var))


def _check_tasks_possible(prior: ClassPrior, k: int):
    if prior.n_classes < k + 1:
        raise ValueError(f"cannot draw {k + 1} distinct classes from {prior.n_classes}")


def sample_tasks_distinct(prior: ClassPrior, k: int, n: int, seed: int) -> tuple[np.ndarray, int]:
    """``n`` tuples of ``k+1`` distinct classes by rejection from ``prior^(k+1)``.

    Returns the accepted class arrays (first column is the drawn label order)
    and the total number of raw tuples drawn.
    """
    _check_tasks_possible(prior, k)
    rng = make_rng(seed, "tasks_distinct")
    kept, have, attempts = [], 0, 0
    while have < n:
        m = max(n - have, 64)
        cls = draw_classes(prior, k, m, rng)
        s = np.sort(cls, axis=1)
        ok = np.all(s[:, 1:] != s[:, :-1], axis=1)
        # count attempts up to the n-th acceptance only
        idx = np.flatnonzero(ok)
        need = n - have
        if idx.size >= need:
            attempts += int(idx[need - 1]) + 1
            kept.append(cls[idx[:need]])
            have = n
        else:
            attempts += m
            kept.append(cls[idx])
            have += idx.size
    return np.concatenate(kept), attempts


def sample_task_distinct(prior: ClassPrior, k: int, seed: int) -> Task:
    cls, _ = sample_tasks_distinct(prior, k, 1, seed)
    return Task(tuple(sorted(int(c) for c in cls[0])))


def sample_tasks_D(prior: ClassPrior, k: int, n: int, seed: int) -> np.ndarray:
    """``(n, k+1)`` tuples from ``prior^(k+1)`` conditioned on no anchor collision."""
    return draw_classes_no_collision(prior, k, n, make_rng(seed, "tasks_D"))


def sample_task_D(prior: ClassPrior, k: int, seed: int) -> Task:
    """Task = distinct classes of a collision-free tuple; may have fewer than k+1 classes."""
    row = sample_tasks_D(prior, k, 1, seed)[0]
    return Task(tuple(sorted(set(int(c) for c in row))), anchor=int(row[0]))


def task_distribution_D(prior: ClassPrior, k: int) -> dict:
    """Exact law of the task (as a frozenset) under the collision-free tuple distribution."""
    classes, probs = tuple_table(prior, k)
    ok = np.all(classes[:, 1:] != classes[:, :1], axis=1)
    z = probs[ok].sum()
    out: dict = {}
    for row, p in zip(classes[ok].tolist(), probs[ok].tolist()):
        key = frozenset(row)
        out[key] = out.get(key, 0.0) + p / z
    return out


def anchor_given_task(prior: ClassPrior, k: int, task) -> dict:
    """Exact ``P[c+ = c | Q = task, no collision]`` for each class in the task."""
    target = frozenset(task.classes if isinstance(task, Task) else task)
    classes, probs = tuple_table(prior, k)
    ok = np.all(classes[:, 1:] != classes[:, :1], axis=1)
    match = np.array([frozenset(r) == target for r in classes.tolist()]) & ok
    z = probs[match].sum()
    if z <= 0:
        raise ValueError(f"task {sorted(target)} has zero probability under the collision-free law")
    return {c: float(probs[match & (classes[:, 0] == c)].sum() / z) for c in sorted(target)}


def task_weights(prior: ClassPrior, k: int, task: Task) -> tuple[float, float]:
    """``(rho_min_plus, p_max)`` for a task, by exact enumeration."""
    cond = anchor_given_task(prior, k, task)
    return min(cond.values()), task.p_max


def avg_sup_loss_pairs(
    model: LatentModel,
    encoder: LinearEncoder | None,
    means: dict,
    kind: MarginLossKind,
    draws: int,
    seed: int,
) -> Estimate:
    """Mean-classifier loss averaged over distinct class pairs, via ordered-pair sampling.

    ``x`` comes from the model's class distribution of ``c+``; the classifier
    rows are ``means`` (which may be shifted downstream means).
    """
    rows = np.stack([np.asarray(means[c], dtype=float) for c in range(model.n_classes)])
    lk = kind.with_ways(1)

    def draw(rng, n):
        cls = draw_classes_no_collision(model.prior, 1, n, rng)
        fx = encode(encoder, model.sample_labels(cls[:, 0], rng))
        v = np.einsum("nd,nd->n", fx, rows[cls[:, 0]] - rows[cls[:, 1]])
        return loss_values(lk, v[:, None])

    return monte_carlo(draw, draws, seed, "sup_pairs").estimate()


def avg_sup_loss_tasks(
    model: LatentModel,
    encoder: LinearEncoder | None,
    means: dict,
    kind: MarginLossKind,
    k: int,
    draws: int,
    seed: int,
) -> Estimate:
    """Mean-classifier loss averaged over tasks of ``k+1`` distinct classes, labels uniform in the task."""
    rows = np.stack([np.asarray(means[c], dtype=float) for c in range(model.n_classes)])
    lk = kind.with_ways(k)

    def draw(rng, n):
        cls, _ = sample_tasks_distinct(model.prior, k, n, int(rng.integers(2**63)))
        pos = rng.integers(0, k + 1, size=n)
        labels = cls[np.arange(n), pos]
        fx = encode(encoder, model.sample_labels(labels, rng))
        task_rows = rows[cls]  # (n, k+1, d)
        scores = np.einsum("nd,ntd->nt", fx, task_rows)
        own = scores[np.arange(n), pos]
        keep = np.ones((n, k + 1), dtype=bool)
        keep[np.arange(n), pos] = False
        v = (own[:, None] - scores)[keep].reshape(n, k)
        return loss_values(lk, v)

    return monte_carlo(draw, draws, seed, "sup_tasks").estimate()
