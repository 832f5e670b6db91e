"""Latent-class generative model of embeddings and its class-collision algebra.

Each latent class is a Gaussian (or point mass) over embedding vectors,
truncated to the ball of radius ``norm_bound`` by rejection. Contrastive
tuples draw an anchor class ``c+`` and ``k`` negative classes i.i.d. from
the prior; anchor and positive are two independent draws from ``c+``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import make_rng

MAX_ENUMERATION = 10**6
MIN_ACCEPTANCE = 0.01
JITTER = 1e-10


class SamplingError(RuntimeError):
    """Rejection sampler could not keep draws inside the norm ball."""


class EnumerationError(ValueError):
    """Exact tuple enumeration would exceed the size cap."""


@dataclass(frozen=True, eq=False)
class ClassPrior:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=float).reshape(-1)
        if p.size < 2:
            raise ValueError("a class prior needs at least two classes")
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise ValueError("prior probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"prior probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    @property
    def n_classes(self) -> int:
        return self.probabilities.size

    @classmethod
    def uniform(cls, n: int) -> "ClassPrior":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def from_weights(cls, weights) -> "ClassPrior":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())


@dataclass(frozen=True, eq=False)
class ClassDistribution:
    mean: np.ndarray
    covariance: np.ndarray
    _factor: np.ndarray | None = field(init=False, repr=False, default=None)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        d = mean.size
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {d}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if d and np.linalg.eigvalsh(cov)[0] < -1e-10:
            raise ValueError("covariance is not positive semidefinite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if np.any(cov != 0):
            factor = np.linalg.cholesky(cov + JITTER * np.eye(d))
            factor.setflags(write=False)
            object.__setattr__(self, "_factor", factor)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_point_mass(self) -> bool:
        return self._factor is None

    @classmethod
    def point_mass(cls, v) -> "ClassDistribution":
        v = np.asarray(v, dtype=float)
        return cls(v, np.zeros((v.size, v.size)))

    def raw_draws(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self._factor is None:
            return np.broadcast_to(self.mean, (n, self.dim)).copy()
        return self.mean + rng.standard_normal((n, self.dim)) @ self._factor.T


@dataclass(frozen=True, eq=False)
class LatentModel:
    prior: ClassPrior
    classes: tuple
    norm_bound: float

    def __post_init__(self):
        classes = tuple(self.classes)
        if len(classes) != self.prior.n_classes:
            raise ValueError(
                f"prior has {self.prior.n_classes} entries but {len(classes)} classes were given"
            )
        dims = {c.dim for c in classes}
        if len(dims) != 1:
            raise ValueError(f"class dimensions disagree: {sorted(dims)}")
        if not self.norm_bound > 0:
            raise ValueError("norm_bound must be positive")
        for i, c in enumerate(classes):
            if np.linalg.norm(c.mean) > self.norm_bound + 1e-12:
                raise ValueError(f"mean of class {i} lies outside the norm ball")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "norm_bound", float(self.norm_bound))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.classes[0].dim

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.classes])

    def sample_class(self, c: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws from class ``c``, redrawn until every norm is within bounds."""
        dist = self.classes[c]
        out = np.empty((n, self.dim))
        filled = drawn = accepted = 0
        while filled < n:
            want = n - filled
            z = dist.raw_draws(rng, want)
            ok = np.linalg.norm(z, axis=1) <= self.norm_bound
            drawn += want
            accepted += int(ok.sum())
            good = z[ok]
            out[filled : filled + good.shape[0]] = good
            filled += good.shape[0]
            if accepted < MIN_ACCEPTANCE * drawn and (drawn >= 1000 or dist.is_point_mass):
                raise SamplingError(
                    f"class {c}: acceptance {accepted}/{drawn} below {MIN_ACCEPTANCE:.0%} "
                    f"for norm bound {self.norm_bound}"
                )
        return out

    def sample_labels(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw per entry of ``labels`` (any shape); result has shape ``labels.shape + (d,)``."""
        flat = np.asarray(labels).reshape(-1)
        out = np.empty((flat.size, self.dim))
        for c in range(self.n_classes):
            idx = np.flatnonzero(flat == c)
            if idx.size:
                out[idx] = self.sample_class(c, idx.size, rng)
        return out.reshape(np.shape(labels) + (self.dim,))

    def to_dict(self) -> dict:
        return {
            "prior": self.prior.probabilities.tolist(),
            "classes": [{"mean": c.mean.tolist(), "cov": c.covariance.tolist()} for c in self.classes],
            "norm_bound": self.norm_bound,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LatentModel":
        try:
            prior = ClassPrior(data["prior"])
            classes = [ClassDistribution(c["mean"], c["cov"]) for c in data["classes"]]
            return cls(prior, tuple(classes), float(data["norm_bound"]))
        except KeyError as exc:
            raise ValueError(f"model specification is missing field {exc}") from None

    def translated(self, shifts: np.ndarray) -> "LatentModel":
        """Model whose class ``c`` is moved by ``shifts[c]``; the norm bound grows to fit."""
        shifts = np.asarray(shifts, dtype=float)
        grow = float(np.max(np.linalg.norm(shifts, axis=1), initial=0.0))
        classes = tuple(
            ClassDistribution(c.mean + s, c.covariance) for c, s in zip(self.classes, shifts)
        )
        return LatentModel(self.prior, classes, self.norm_bound + grow)


@dataclass(frozen=True)
class ContrastiveTuple:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray
    anchor_class: int
    negative_classes: tuple
    collision_indices: frozenset
    distinct_classes: frozenset


@dataclass(frozen=True)
class TupleBatch:
    """``n`` contrastive tuples stored as arrays."""

    anchor_class: np.ndarray  # (n,)
    negative_classes: np.ndarray  # (n, k)
    anchor: np.ndarray  # (n, d)
    positive: np.ndarray  # (n, d)
    negatives: np.ndarray  # (n, k, d)

    @property
    def collisions(self) -> np.ndarray:
        return self.negative_classes == self.anchor_class[:, None]


def draw_classes(prior: ClassPrior, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, k+1)`` class indices i.i.d. from the prior; column 0 is the anchor."""
    return rng.choice(prior.n_classes, size=(n, k + 1), p=prior.probabilities)


def draw_classes_no_collision(prior: ClassPrior, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Class tuples from ``prior^(k+1)`` conditioned on no negative repeating the anchor.

    Sampled directly: the anchor has weight ``rho(c) (1 - rho(c))^k`` and each
    negative is drawn from the prior restricted to the other classes.
    """
    p = prior.probabilities
    anchor_w = p * (1.0 - p) ** k
    if anchor_w.sum() <= 0:
        raise ValueError("prior puts all mass on one class; no collision-free tuples exist")
    anchors = rng.choice(p.size, size=n, p=anchor_w / anchor_w.sum())
    out = np.empty((n, k + 1), dtype=np.int64)
    out[:, 0] = anchors
    u = rng.random((n, k))
    for c in range(p.size):
        rows = np.flatnonzero(anchors == c)
        if not rows.size:
            continue
        rest = p.copy()
        rest[c] = 0.0
        cdf = np.cumsum(rest / rest.sum())
        cdf[-1] = 1.0
        picks = np.searchsorted(cdf, u[rows], side="right")
        out[rows, 1:] = np.minimum(picks, p.size - 1)
    return out


def tuples_from_classes(model: LatentModel, classes: np.ndarray, rng: np.random.Generator) -> TupleBatch:
    anchors = classes[:, 0]
    negs = classes[:, 1:]
    labels = np.concatenate([anchors, anchors, negs.reshape(-1)])
    z = model.sample_labels(labels, rng)
    n = anchors.size
    return TupleBatch(
        anchor_class=anchors,
        negative_classes=negs,
        anchor=z[:n],
        positive=z[n : 2 * n],
        negatives=z[2 * n :].reshape(n, negs.shape[1], model.dim),
    )


def sample_tuples(model: LatentModel, k: int, n: int, rng: np.random.Generator) -> TupleBatch:
    if k < 1:
        raise ValueError("k must be at least 1")
    return tuples_from_classes(model, draw_classes(model.prior, k, n, rng), rng)


def sample_tuple(model: LatentModel, k: int, seed: int) -> ContrastiveTuple:
    batch = sample_tuples(model, k, 1, make_rng(seed, "tuple"))
    anchor_class = int(batch.anchor_class[0])
    negs = tuple(int(c) for c in batch.negative_classes[0])
    return ContrastiveTuple(
        anchor=batch.anchor[0],
        positive=batch.positive[0],
        negatives=batch.negatives[0],
        anchor_class=anchor_class,
        negative_classes=negs,
        collision_indices=frozenset(i for i, c in enumerate(negs) if c == anchor_class),
        distinct_classes=frozenset((anchor_class,) + negs),
    )


def _check_k(k: int):
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")


def collision_prob(prior: ClassPrior) -> float:
    """Probability that two independent class draws coincide."""
    p = prior.probabilities
    return float(p @ p)


def collision_prob_k(prior: ClassPrior, k: int) -> float:
    """Probability that at least one of ``k`` negatives repeats the anchor class."""
    _check_k(k)
    p = prior.probabilities
    return float(1.0 - p @ (1.0 - p) ** k)


def all_collide_prob(prior: ClassPrior, k: int) -> float:
    """Probability that every negative repeats the anchor class."""
    _check_k(k)
    return float(np.sum(prior.probabilities ** (k + 1)))


def nu_distribution(prior: ClassPrior) -> ClassPrior:
    return ClassPrior.from_weights(prior.probabilities**2)


def u_distribution(prior: ClassPrior, k: int) -> ClassPrior:
    """Anchor-class law given that some negative collides with it."""
    _check_k(k)
    p = prior.probabilities
    return ClassPrior.from_weights(p * (1.0 - (1.0 - p) ** k))


def tuple_table(prior: ClassPrior, k: int) -> tuple[np.ndarray, np.ndarray]:
    """All ``C^(k+1)`` class tuples as an int array plus their exact probabilities."""
    _check_k(k)
    C = prior.n_classes
    if C ** (k + 1) > MAX_ENUMERATION:
        raise EnumerationError(f"{C}^{k + 1} tuples exceeds the enumeration cap {MAX_ENUMERATION}")
    classes = np.indices((C,) * (k + 1)).reshape(k + 1, -1).T
    probs = np.prod(prior.probabilities[classes], axis=1)
    return classes, probs


def enumerate_tuples(prior: ClassPrior, k: int) -> list[tuple]:
    """Every class tuple with its probability, collision index set and distinct-class set."""
    classes, probs = tuple_table(prior, k)
    out = []
    for row, pr in zip(classes.tolist(), probs.tolist()):
        anchor, negs = row[0], row[1:]
        collisions = frozenset(i for i, c in enumerate(negs) if c == anchor)
        out.append((tuple(row), pr, collisions, frozenset(row)))
    return out

