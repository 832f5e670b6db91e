"""Pseudo-class recovery by k-means and Hungarian alignment, plus shift-vs-accuracy reporting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .classifier import MeanClassifier
from .encoder import LinearEncoder, encode
from .latent_model import LatentModel
from .rng import make_rng

MAX_RESCUES = 5


class EmptyClusterError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_trace: tuple = ()
    iterations: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty((points.shape[0], centroids.shape[0]))
    step = max(1, 4_000_000 // max(1, centroids.size))
    for lo in range(0, points.shape[0], step):
        diff = points[lo : lo + step, None, :] - centroids[None, :, :]
        out[lo : lo + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _plus_plus(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).ravel()
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]]).ravel())
    return points[chosen].copy()


def kmeans(points, K: int, max_iters: int = 300, tolerance: float = 1e-10, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    Points are processed in lexicographic order so the result does not
    depend on the input order. An empty cluster is re-seeded at the point
    farthest from its centroid, at most five times per run.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise ValueError("points must be a 2-D array")
    n = x.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= #points, got K={K} with {n} points")
    order = np.lexsort(x.T[::-1])
    xs = x[order]
    rng = make_rng(seed, "kmeans")
    centroids = _plus_plus(xs, K, rng)
    rescues = 0
    trace = []
    it = 0
    while True:
        d2 = _sq_dists(xs, centroids)
        assign = np.argmin(d2, axis=1)
        best = d2[np.arange(n), assign]
        trace.append(float(best.sum()))
        if it >= max_iters:
            break
        it += 1
        counts = np.bincount(assign, minlength=K)
        new = np.zeros_like(centroids)
        np.add.at(new, assign, xs)
        empty = np.flatnonzero(counts == 0)
        for c in empty:
            if rescues >= MAX_RESCUES:
                raise EmptyClusterError(f"cluster {c} empty after {MAX_RESCUES} rescues")
            rescues += 1
            far = int(np.argmax(best))
            new[c] = xs[far]
            best[far] = -1.0
        filled = counts > 0
        new[filled] /= counts[filled, None]
        move = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if move < tolerance and empty.size == 0:
            d2 = _sq_dists(xs, centroids)
            assign = np.argmin(d2, axis=1)
            trace.append(float(d2[np.arange(n), assign].sum()))
            break
    out = np.empty(n, dtype=int)
    out[order] = assign
    return KMeansResult(centroids, out, trace[-1], tuple(trace), it)


@dataclass(frozen=True)
class Alignment:
    """Row (cluster) index to column (class) index, with the total matched cost."""

    permutation: dict
    cost: float


def hungarian(cost) -> Alignment:
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or not np.all(np.isfinite(c)):
        raise ValueError("cost must be a finite 2-D matrix")
    rows, cols = linear_sum_assignment(c)
    return Alignment({int(r): int(k) for r, k in zip(rows, cols)}, float(c[rows, cols].sum()))


def recover_pseudo_means(
    embeddings,
    K: int,
    downstream_means: dict,
    seed: int = 0,
    cost: str = "distance",
    labels=None,
    encoder: LinearEncoder | None = None,
) -> tuple[dict, Alignment]:
    """Cluster unlabeled embeddings and name each cluster after a downstream class.

    ``cost="distance"`` matches on Euclidean distance between pseudo-means
    and downstream means; ``cost="overlap"`` maximizes label agreement and
    needs per-point ``labels``.
    """
    x = encode(encoder, np.asarray(getattr(embeddings, "vectors", embeddings), dtype=float))
    keys = sorted(downstream_means, key=str)
    if K != len(keys):
        raise ValueError(f"K={K} but there are {len(keys)} downstream classes")
    result = kmeans(x, K, seed=seed)
    down = np.stack([np.asarray(downstream_means[c], dtype=float) for c in keys])
    if cost == "distance":
        matrix = np.linalg.norm(result.centroids[:, None, :] - down[None, :, :], axis=2)
    elif cost == "overlap":
        if labels is None:
            labels = getattr(embeddings, "labels", None)
        if labels is None:
            raise ValueError("overlap cost needs point labels")
        index = {str(c): j for j, c in enumerate(keys)}
        matrix = np.zeros((K, K))
        for a, lab in zip(result.assignments, labels):
            j = index.get(str(lab))
            if j is not None:
                matrix[a, j] -= 1.0
    else:
        raise ValueError(f"unknown alignment cost {cost!r}")
    align = hungarian(matrix)
    means = {keys[j]: result.centroids[i] for i, j in align.permutation.items()}
    return means, align


def spearman(x, y) -> float:
    """Spearman rank correlation with midranks; 0 when either side has no rank variation."""
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return 0.0 if denom == 0 else float(rx @ ry) / denom


def shift_accuracy_table(entries, require_distinct: bool = True) -> tuple[float, str]:
    """Spearman(delta_hat, accuracy) and a CSV table sorted by delta_hat.

    ``entries`` are ``(severity_tag, delta_hat, accuracy)`` triples. With
    ``require_distinct=False`` tied shifts are allowed and get midranks.
    """
    rows = [(str(t), float(d), float(a)) for t, d, a in entries]
    if len(rows) < 3:
        raise ValueError("need at least 3 entries")
    if require_distinct and len({d for _, d, _ in rows}) != len(rows):
        raise ValueError("delta_hat values must be distinct")
    rows.sort(key=lambda r: (r[1], r[0]))
    r = spearman([d for _, d, _ in rows], [a for _, _, a in rows])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["severity", "delta_hat", "accuracy"])
    for tag, d, a in rows:
        w.writerow([tag, repr(d), repr(a)])
    return r, buf.getvalue()


@dataclass(frozen=True, eq=False)
class Severity:
    """A downstream condition: translate every class by ``translation``, or by ``scale`` along (1,...,1)/sqrt(d)."""

    tag: str
    translation: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self):
        if (self.translation is None) == (self.scale is None):
            raise ValueError(f"severity {self.tag!r} needs exactly one of translation or scale")
        if self.translation is not None:
            object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(-1))

    def vector(self, dim: int) -> np.ndarray:
        if self.translation is not None:
            if self.translation.size != dim:
                raise ValueError(f"severity {self.tag!r} has dimension {self.translation.size}, expected {dim}")
            return self.translation
        return np.full(dim, float(self.scale) / math.sqrt(dim))

    def to_dict(self) -> dict:
        if self.translation is not None:
            return {"tag": self.tag, "translation": self.translation.tolist()}
        return {"tag": self.tag, "scale": self.scale}


def simulate_embeddings(model: LatentModel, samples_per_class: int, seed: int, encoder=None):
    """Labelled pretraining draws: ``(labels, vectors)`` with ``samples_per_class`` rows per class."""
    rng = make_rng(seed, "simulate")
    labels = np.repeat(np.arange(model.n_classes), samples_per_class)
    return labels, encode(encoder, model.sample_labels(labels, rng))


def sweep_entries(labels, pre: np.ndarray, severities, class_keys=None) -> list[tuple]:
    """``(tag, delta_hat, accuracy)`` per severity, with downstream points = pretraining points + v.

    Pairing every downstream point with its pretraining draw makes
    ``delta_hat`` equal ``||v||`` up to rounding. Accuracy is that of the
    mean classifier built from pretraining means, on the translated points.
    """
    labels = np.asarray(labels)
    keys = sorted(set(labels.tolist()), key=str) if class_keys is None else list(class_keys)
    pre_means = {c: pre[labels == c].mean(axis=0) for c in keys}
    clf = MeanClassifier.from_means(pre_means, keys)
    truth = np.array([keys.index(c) for c in labels.tolist()])
    out = []
    for sev in severities:
        v = sev.vector(pre.shape[1])
        down = pre + v
        delta = float(np.mean([np.linalg.norm(pre_means[c] - down[labels == c].mean(axis=0)) for c in keys]))
        acc = float(np.mean(clf.predict_index(down) == truth))
        out.append((sev.tag, delta, acc))
    return out
