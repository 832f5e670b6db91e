"""Intra-class deviation, spectral norms, Rademacher complexity of linear encoders, and Gen_M."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import LinearEncoder, encode, transform_covariance
from .latent_model import LatentModel, nu_distribution
from .losses import LN2, MarginLossKind
from .rng import Estimate, make_rng, monte_carlo


class ConvergenceError(RuntimeError):
    pass


def spectral_norm(matrix, tolerance: float = 1e-12, max_iters: int = 100_000, seed: int = 0) -> float:
    """Top eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once the eigen-residual ``||A v - lam v||`` falls below
    ``tolerance * max(1, lam)``; the eigenvalue error is then of order
    residual squared over the spectral gap.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, rtol=0, atol=1e-8):
        raise ValueError("matrix is not symmetric")
    a = (a + a.T) / 2
    if not np.any(a):
        return 0.0
    v = make_rng(seed, "power").standard_normal(a.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        av = a @ v
        lam = float(v @ av)
        if np.linalg.norm(av - lam * v) <= tolerance * max(1.0, abs(lam)):
            return max(lam, 0.0)
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0
        v = av / norm
    raise ConvergenceError(f"power iteration did not converge in {max_iters} iterations (estimate {lam:.6g})")


@dataclass(frozen=True)
class IntraClassStats:
    """Per-class ``(||Sigma(f,c)||_2, E||f(x)||)`` and their nu-weighted combination ``s``."""

    per_class: dict
    s_value: float
    std_error: float = 0.0


def intra_class_deviation(
    model: LatentModel,
    encoder: LinearEncoder | None,
    draws: int = 100_000,
    seed: int = 0,
) -> IntraClassStats:
    """``s(f) = E_{c~nu}[sqrt(||Sigma(f,c)||_2) E||f(x)||]``.

    Spectral norms are exact on the encoder-transformed covariance; mean
    norms are Monte Carlo except for point masses.
    """
    nu = nu_distribution(model.prior).probabilities
    per_class, s, var = {}, 0.0, 0.0
    for c, dist in enumerate(model.classes):
        spectral = spectral_norm(transform_covariance(encoder, dist.covariance))
        if dist.is_point_mass:
            norm = Estimate(float(np.linalg.norm(encode(encoder, dist.mean))), 0.0)
        else:
            norm = monte_carlo(
                lambda rng, n, c=c: np.linalg.norm(encode(encoder, model.sample_class(c, n, rng)), axis=1),
                draws, seed, f"mean_norm_{c}",
            ).estimate()
        per_class[c] = (spectral, norm.estimate)
        weight = nu[c] * math.sqrt(spectral)
        s += weight * norm.estimate
        var += (weight * norm.std_error) ** 2
    return IntraClassStats(per_class, s, math.sqrt(var))


def collision_margin_abs(model: LatentModel, encoder: LinearEncoder | None, c: int, draws: int, seed: int) -> Estimate:
    """``E|f(x)^T (f(x-) - f(x+))|`` with ``x, x+, x-`` all drawn from class ``c``."""

    def draw(rng, n):
        x = encode(encoder, model.sample_class(c, n, rng))
        xp = encode(encoder, model.sample_class(c, n, rng))
        xn = encode(encoder, model.sample_class(c, n, rng))
        return np.abs(np.einsum("nd,nd->n", x, xn - xp))

    return monte_carlo(draw, draws, seed, f"collision_margin_{c}").estimate()


@dataclass(frozen=True)
class RademacherEstimate:
    mean: float
    std_error: float
    draws: int
    sample_size: int
    k: int


def _stack_inputs(dataset) -> np.ndarray:
    x = np.asarray(dataset, dtype=float)
    if x.ndim != 3 or x.shape[1] < 3:
        raise ValueError("dataset must have shape (M, k+2, d) with k >= 1")
    return x


def rademacher_matrix(inputs: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """``M(sigma) = sum_j sigma_j x_j^T`` for inputs ``(N, d_in)`` and signs ``(..., N, d_out)``."""
    return np.einsum("...nj,nd->...jd", signs, inputs)


def rademacher_linear(
    dataset,
    frob_bound: float,
    draws: int = 1000,
    seed: int = 0,
    out_dim: int | None = None,
) -> RademacherEstimate:
    """Empirical Rademacher complexity of ``{x -> W x : ||W||_F <= w}`` on the stacked tuples.

    For each sign draw the supremum over the class is ``w ||M(sigma)||_F``,
    attained at ``W = w M / ||M||_F``.
    """
    x = _stack_inputs(dataset)
    if frob_bound < 0:
        raise ValueError("frob_bound must be nonnegative")
    m, slots, d_in = x.shape
    d_out = d_in if out_dim is None else int(out_dim)
    flat = x.reshape(m * slots, d_in)

    def draw(rng, n):
        signs = rng.choice(np.array([-1.0, 1.0]), size=(n, flat.shape[0], d_out))
        mat = rademacher_matrix(flat, signs)
        return frob_bound * np.sqrt((mat**2).sum(axis=(1, 2)))

    chunk = max(1, 4_000_000 // (flat.shape[0] * d_out))
    est = monte_carlo(draw, draws, seed, "rademacher", chunk=chunk).estimate()
    return RademacherEstimate(est.estimate, est.std_error, draws, m, slots - 2)


@dataclass(frozen=True)
class GenBound:
    value: float
    confidence_delta: float
    constants: dict = field(default_factory=dict)
    std_error: float = 0.0


def gen_bound(rad: RademacherEstimate, R: float, loss_bound: float, eta: float, confidence_delta: float = 0.05) -> GenBound:
    """Explicit-constant generalization gap.

    ``(4 sqrt(3) eta R sqrt(k) / M) rad + 3 B sqrt(log(4/delta) / 2M) + 3 B sqrt(log(2/delta) / 2M)``
    where ``eta`` is the Lipschitz constant of the margin loss.
    """
    if not 0 < confidence_delta < 1:
        raise ValueError("confidence_delta must lie in (0, 1)")
    if min(R, loss_bound, eta) < 0:
        raise ValueError("R, loss_bound and eta must be nonnegative")
    M, k = rad.sample_size, rad.k
    coef = 4.0 * math.sqrt(3.0) * eta * R * math.sqrt(k) / M
    conc1 = 3.0 * loss_bound * math.sqrt(math.log(4.0 / confidence_delta) / (2.0 * M))
    conc2 = 3.0 * loss_bound * math.sqrt(math.log(2.0 / confidence_delta) / (2.0 * M))
    constants = {
        "rademacher_coefficient": coef,
        "rademacher_term": coef * rad.mean,
        "concentration_term": conc1,
        "hoeffding_term": conc2,
        "R": R,
        "loss_bound": loss_bound,
        "eta": eta,
        "M": M,
        "k": k,
    }
    return GenBound(coef * rad.mean + conc1 + conc2, confidence_delta, constants, coef * rad.std_error)


def loss_bound(kind: MarginLossKind, R: float, k: int) -> float:
    """Cap on the k-way loss when every embedding has norm at most ``R`` (margins lie in [-2R^2, 2R^2])."""
    if kind.kind == "hinge":
        return 1.0 + 2.0 * R * R
    if kind.natural_log:
        return 2.0 * R * R + math.log1p(k)
    return 2.0 * R * R / LN2 + math.log1p(k) / LN2
