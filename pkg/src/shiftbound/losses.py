"""Margin losses, NT-Xent, and Monte Carlo estimators of the contrastive loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .encoder import LinearEncoder, encode
from .latent_model import (
    LatentModel,
    collision_prob,
    draw_classes,
    nu_distribution,
    sample_tuples,
    tuples_from_classes,
)
from .rng import Estimate, monte_carlo

LN2 = math.log(2.0)


@dataclass(frozen=True)
class MarginLossKind:
    """A t-way margin loss.

    ``natural_log`` only affects the logistic loss: ``False`` gives
    ``log2(1 + sum exp(-v_i))`` (so that the loss at zero is 1 for t=1),
    ``True`` gives the natural-log form.
    """

    kind: str
    ways: int = 1
    natural_log: bool = False

    def __post_init__(self):
        if self.kind not in ("hinge", "logistic"):
            raise ValueError(f"unknown margin loss {self.kind!r}")
        if int(self.ways) != self.ways or self.ways < 1:
            raise ValueError("ways must be a positive integer")

    def with_ways(self, t: int) -> "MarginLossKind":
        return self if t == self.ways else replace(self, ways=int(t))

    @property
    def at_zero(self) -> float:
        """Loss of the all-zero margin vector."""
        if self.kind == "hinge":
            return 1.0
        value = math.log1p(self.ways)
        return value if self.natural_log else value / LN2

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant with respect to the Euclidean norm of the margins."""
        if self.kind == "logistic" and not self.natural_log:
            return 1.0 / LN2
        return 1.0

    @property
    def collision_constant(self) -> float:
        """Multiplier on ``E|z|`` in the same-class loss excess (hinge: 1, log2-logistic: 1/ln 2)."""
        return self.lipschitz


HINGE = MarginLossKind("hinge")
LOGISTIC = MarginLossKind("logistic")


def _margins(kind: MarginLossKind, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[-1] != kind.ways:
        raise ValueError(f"expected {kind.ways} margins, got shape {v.shape}")
    return v


def loss_values(kind: MarginLossKind, v: np.ndarray) -> np.ndarray:
    if kind.kind == "hinge":
        return np.maximum(0.0, 1.0 - v.min(axis=-1))
    zeros = np.zeros(v.shape[:-1] + (1,))
    value = logsumexp(np.concatenate([zeros, -v], axis=-1), axis=-1)
    return value if kind.natural_log else value / LN2


def grad_values(kind: MarginLossKind, v: np.ndarray) -> np.ndarray:
    if kind.kind == "hinge":
        g = np.zeros_like(v)
        idx = np.argmin(v, axis=-1)
        # kink at min margin == 1 takes the subgradient -1
        active = v.min(axis=-1) <= 1.0
        np.put_along_axis(g, idx[..., None], np.where(active, -1.0, 0.0)[..., None], axis=-1)
        return g
    zeros = np.zeros(v.shape[:-1] + (1,))
    lse = logsumexp(np.concatenate([zeros, -v], axis=-1), axis=-1, keepdims=True)
    g = -np.exp(-v - lse)
    return g if kind.natural_log else g / LN2


def margin_loss(kind: MarginLossKind, v):
    """Loss of margin vector(s) ``v`` with trailing dimension ``kind.ways``."""
    out = loss_values(kind, _margins(kind, v))
    return float(out) if out.ndim == 0 else out


def margin_loss_grad(kind: MarginLossKind, v) -> np.ndarray:
    """(Sub)gradient with respect to the margins; same shape as ``v``."""
    return grad_values(kind, _margins(kind, v))


@dataclass(frozen=True)
class InfoNCEConfig:
    temperature: float = 1.0
    exclude_self: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def ntxent_batch(embeddings, config: InfoNCEConfig = InfoNCEConfig()) -> float:
    """NT-Xent averaged over the 2N ordered positive pairs.

    Rows ``2m`` and ``2m+1`` form positive pair ``m``. Sums use ``math.fsum``
    so the value does not depend on the order in which pairs are listed.
    """
    z = np.asarray(embeddings, dtype=float)
    if z.ndim != 2 or z.shape[0] < 4 or z.shape[0] % 2:
        raise ValueError("need an even number (>= 4) of embedding rows")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    u = z / norms[:, None]
    sims = (u[:, None, :] * u[None, :, :]).sum(axis=-1) / config.temperature
    n = z.shape[0]
    terms = []
    for i in range(n):
        j = i ^ 1
        row = sims[i] if not config.exclude_self else np.delete(sims[i], i)
        top = float(row.max())
        lse = top + math.log(math.fsum(np.exp(row - top).tolist()))
        terms.append(lse - float(sims[i, j]))
    return math.fsum(terms) / n


def contrastive_margins(fa: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    """``f(x)^T (f(x+) - f(x-_i))`` for anchors ``(n,d)``, positives ``(n,d)``, negatives ``(n,k,d)``."""
    return np.einsum("nd,nkd->nk", fa, fp[:, None, :] - fn)


def unsup_loss(
    model: LatentModel,
    encoder: LinearEncoder | None,
    kind: MarginLossKind,
    k: int,
    draws: int,
    seed: int,
) -> Estimate:
    """Monte Carlo estimate of the population contrastive loss."""
    if kind.ways != k:
        raise ValueError(f"loss has {kind.ways} ways but k={k}")

    def draw(rng, n):
        b = sample_tuples(model, k, n, rng)
        v = contrastive_margins(encode(encoder, b.anchor), encode(encoder, b.positive), encode(encoder, b.negatives))
        return loss_values(kind, v)

    return monte_carlo(draw, draws, seed, "unsup_loss").estimate()


def _loss_ragged(kind: MarginLossKind, v: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Per-row loss over the margins where ``keep`` is true (each row keeps >= 1)."""
    out = np.empty(v.shape[0])
    counts = keep.sum(axis=1)
    for t in np.unique(counts):
        rows = np.flatnonzero(counts == t)
        sub = v[rows][keep[rows]].reshape(rows.size, t)
        out[rows] = loss_values(kind.with_ways(int(t)), sub)
    return out


class SplitEstimate(NamedTuple):
    l_eq: Estimate
    l_neq: Estimate
    combined_check: Estimate | None


def different_class_draws(model, encoder, kind, k, rng, n) -> np.ndarray:
    """Per-draw losses for the collision-free contrastive loss.

    Tuples are conditioned on at least one negative differing from the
    anchor class; negatives that repeat the anchor class are dropped.
    """
    prior = model.prior
    chunks, have = [], 0
    while have < n:
        cls = draw_classes(prior, k, max(n - have, 16), rng)
        ok = (cls[:, 1:] == cls[:, :1]).sum(axis=1) < k
        chunks.append(cls[ok])
        have += int(ok.sum())
    classes = np.concatenate(chunks)[:n]
    b = tuples_from_classes(model, classes, rng)
    v = contrastive_margins(encode(encoder, b.anchor), encode(encoder, b.positive), encode(encoder, b.negatives))
    return _loss_ragged(kind, v, ~b.collisions)


def same_class_draws(model, encoder, kind, k, rng, n) -> np.ndarray:
    """Per-draw losses when anchor, positive and all negatives share a class drawn from nu."""
    nu = nu_distribution(model.prior).probabilities
    c = rng.choice(model.n_classes, size=n, p=nu)
    classes = np.repeat(c[:, None], k + 1, axis=1)
    b = tuples_from_classes(model, classes, rng)
    v = contrastive_margins(encode(encoder, b.anchor), encode(encoder, b.positive), encode(encoder, b.negatives))
    return loss_values(kind, v)


def unsup_loss_split(
    model: LatentModel,
    encoder: LinearEncoder | None,
    kind: MarginLossKind,
    k: int,
    draws: int,
    seed: int,
) -> SplitEstimate:
    """Same-class and different-class parts of the contrastive loss.

    For k=1 the recombination ``tau * l_eq + (1 - tau) * l_neq`` equals the
    full loss in expectation and is returned as ``combined_check``; for k>1
    that identity does not hold and ``combined_check`` is ``None``.
    """
    if kind.ways != k:
        raise ValueError(f"loss has {kind.ways} ways but k={k}")
    eq = monte_carlo(lambda rng, n: same_class_draws(model, encoder, kind, k, rng, n), draws, seed, "l_eq").estimate()
    neq = monte_carlo(lambda rng, n: different_class_draws(model, encoder, kind, k, rng, n), draws, seed, "l_neq").estimate()
    combined = None
    if k == 1:
        tau = collision_prob(model.prior)
        combined = Estimate(
            tau * eq.estimate + (1 - tau) * neq.estimate,
            math.hypot(tau * eq.std_error, (1 - tau) * neq.std_error),
        )
    return SplitEstimate(eq, neq, combined)
