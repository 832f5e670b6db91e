"""Mean-shift vectors, the shift bias term, its closed-form ceilings, and convex-hull residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import LinearEncoder, encode, operator_norm, transform_covariance
from .latent_model import LatentModel, draw_classes_no_collision
from .losses import MarginLossKind, grad_values
from .rng import Estimate, make_rng, monte_carlo

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _key_str(key) -> str:
    return str(key)


@dataclass(frozen=True, eq=False)
class ShiftProfile:
    """Per-class shift vectors ``delta_c = mu_c - mu'_c`` inside a ball of radius ``epsilon``.

    When ``epsilon`` is given, any delta longer than it is projected onto the
    ball; when omitted it is the largest delta norm. Keys are stored as strings
    so model class ``3`` and file key ``"3"`` refer to the same class.
    """

    deltas: dict
    epsilon: float | None = None

    def __post_init__(self):
        deltas = {_key_str(k): np.array(v, dtype=float).reshape(-1) for k, v in self.deltas.items()}
        dims = {v.size for v in deltas.values()}
        if len(dims) > 1:
            raise ValueError(f"shift vectors have mixed dimensions {sorted(dims)}")
        norms = {k: float(np.linalg.norm(v)) for k, v in deltas.items()}
        if self.epsilon is None:
            eps = max(norms.values(), default=0.0)
        else:
            eps = float(self.epsilon)
            if eps < 0:
                raise ValueError("epsilon must be nonnegative")
            for k, n in norms.items():
                if n > eps:
                    deltas[k] = deltas[k] * (eps / n)
        for v in deltas.values():
            v.setflags(write=False)
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "epsilon", eps)

    def vector(self, key, dim: int) -> np.ndarray:
        v = self.deltas.get(_key_str(key))
        if v is None:
            return np.zeros(dim)
        if v.size != dim:
            raise ValueError(f"shift for class {key!r} has dimension {v.size}, expected {dim}")
        return v

    def as_array(self, keys, dim: int) -> np.ndarray:
        return np.stack([self.vector(k, dim) for k in keys])

    def with_epsilon(self, epsilon: float) -> "ShiftProfile":
        return ShiftProfile(self.deltas, epsilon)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "deltas": {k: v.tolist() for k, v in sorted(self.deltas.items())}}

    @classmethod
    def from_dict(cls, data: dict) -> "ShiftProfile":
        if "deltas" not in data:
            raise ValueError("shift profile is missing field 'deltas'")
        return cls(data["deltas"], data.get("epsilon"))

    @classmethod
    def zero(cls, keys, dim: int, epsilon: float = 0.0) -> "ShiftProfile":
        return cls({k: np.zeros(dim) for k in keys}, epsilon)


def _check_keys(pre: dict, down: dict):
    if set(pre) != set(down):
        raise ValueError(f"class keys differ: {sorted(map(str, set(pre) ^ set(down)))}")


def shift_from_means(pre_means: dict, down_means: dict) -> ShiftProfile:
    _check_keys(pre_means, down_means)
    return ShiftProfile({c: np.asarray(pre_means[c], float) - np.asarray(down_means[c], float) for c in pre_means})


def mean_shift_stat(pre_means: dict, down_means: dict) -> float:
    """Average Euclidean distance between matched pretraining and downstream class means."""
    _check_keys(pre_means, down_means)
    dists = [np.linalg.norm(np.asarray(pre_means[c], float) - np.asarray(down_means[c], float)) for c in pre_means]
    return float(np.mean(dists))


def bias_ceilings(R: float, epsilon: float, lipschitz_L: float = 1.0, sigma_f: float | None = None) -> dict:
    """Closed-form upper bounds on the shift bias.

    ``lipschitz``: 2 L R eps; ``hinge`` and ``logistic``: 2 R eps;
    ``subgaussian``: 2 eps L sigma_f sqrt(2/pi) (only when ``sigma_f`` is given).
    """
    if min(R, epsilon, lipschitz_L) < 0 or (sigma_f is not None and sigma_f < 0):
        raise ValueError("ceiling inputs must be nonnegative")
    out = {
        "lipschitz": 2.0 * lipschitz_L * R * epsilon,
        "hinge": 2.0 * R * epsilon,
        "logistic": 2.0 * R * epsilon,
    }
    if sigma_f is not None:
        out["subgaussian"] = 2.0 * epsilon * lipschitz_L * sigma_f * SQRT_2_OVER_PI
    return out


def model_sigma_f(model: LatentModel, encoder: LinearEncoder | None = None) -> float:
    """Largest directional root second moment of ``f(x)`` over the model's classes.

    Equals the sub-Gaussian scale of the projections when every class is a
    centered Gaussian.
    """
    top = 0.0
    for c in model.classes:
        second = transform_covariance(encoder, c.covariance + np.outer(c.mean, c.mean))
        top = max(top, float(np.linalg.eigvalsh(second)[-1]))
    return math.sqrt(max(top, 0.0))


@dataclass(frozen=True, eq=False)
class BiasEstimate:
    """Shift bias at the actual deltas and its worst case over the epsilon-balls.

    ``coefficients`` are the per-class vectors ``g_c`` (in encoder space) with
    ``t_actual = sum_c <g_c, delta_c>`` and ``b_sup = epsilon * sum_c ||g_c||``.
    ``epsilon`` and ``R`` are expressed in encoder space.
    """

    t_actual: Estimate
    b_sup: float
    b_sup_se: float
    coefficients: np.ndarray
    epsilon: float
    R: float
    ceilings: dict = field(default_factory=dict)

    @property
    def g_norm_sum(self) -> float:
        return float(np.linalg.norm(self.coefficients, axis=1).sum())


def bias_terms(
    model: LatentModel,
    encoder: LinearEncoder | None,
    kind: MarginLossKind,
    shift: ShiftProfile,
    draws: int,
    seed: int,
    k: int = 1,
    sigma_f: float | None = None,
) -> BiasEstimate:
    """Estimate the shift-bias coefficient vectors from one set of draws.

    Draws class tuples from ``prior^(k+1)`` conditioned on no anchor
    collision, ``x`` from the anchor class, and accumulates
    ``sum_i dl/dv_i(w) f(x) (1{c+ = c} - 1{c_i = c})`` with margins ``w``
    taken against the downstream means. Shift vectors are given in model
    space and mapped through the encoder.
    """
    C = model.n_classes
    mu_f = encode(encoder, model.means)
    deltas_f = encode(encoder, shift.as_array(range(C), model.dim))
    down_f = mu_f - deltas_f
    d_f = mu_f.shape[1]
    lk = kind.with_ways(k)

    def draw(rng, n):
        cls = draw_classes_no_collision(model.prior, k, n, rng)
        anchors = cls[:, 0]
        fx = encode(encoder, model.sample_labels(anchors, rng))
        w = np.einsum("nd,nkd->nk", fx, down_f[anchors][:, None, :] - down_f[cls[:, 1:]])
        g = grad_values(lk, w)
        h = np.zeros((n, C, d_f))
        rows = np.arange(n)
        h[rows, anchors] += g.sum(axis=1)[:, None] * fx
        for i in range(k):
            h[rows, cls[:, 1 + i]] -= g[:, i, None] * fx
        return h.reshape(n, C * d_f)

    width = C * d_f
    chunk = int(max(256, min(16384, 2_000_000 // width)))
    acc = monte_carlo(draw, draws, seed, "bias", chunk=chunk, dim=width)
    g_hat = acc.mean.reshape(C, d_f)
    cov = acc.std_error

    flat_delta = deltas_f.reshape(-1)
    t = float(g_hat.reshape(-1) @ flat_delta)
    t_se = math.sqrt(max(float(flat_delta @ cov @ flat_delta), 0.0))

    norms = np.linalg.norm(g_hat, axis=1)
    units = np.divide(g_hat, norms[:, None], out=np.zeros_like(g_hat), where=norms[:, None] > 0)
    flat_u = units.reshape(-1)
    gsum_se = math.sqrt(max(float(flat_u @ cov @ flat_u), 0.0))

    op = operator_norm(encoder)
    eps_f = op * shift.epsilon
    R_f = op * model.norm_bound
    return BiasEstimate(
        t_actual=Estimate(t, t_se),
        b_sup=eps_f * float(norms.sum()),
        b_sup_se=eps_f * gsum_se,
        coefficients=g_hat,
        epsilon=eps_f,
        R=R_f,
        ceilings=bias_ceilings(R_f, eps_f, kind.lipschitz, sigma_f),
    )


def bias_actual(model, encoder, kind, shift: ShiftProfile, draws: int, seed: int, k: int = 1) -> Estimate:
    """Shift bias at the profile's own deltas (no supremum)."""
    return bias_terms(model, encoder, kind, shift, draws, seed, k).t_actual


def bias_sup(model, encoder, kind, epsilon: float, draws: int, seed: int, shift: ShiftProfile | None = None, k: int = 1) -> float:
    """Worst-case shift bias over per-class balls of radius ``epsilon`` (model space).

    Margins are taken against the downstream means implied by ``shift``, or
    the pretraining means when no shift is given.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    profile = ShiftProfile.zero(range(model.n_classes), model.dim, epsilon) if shift is None else shift
    profile = ShiftProfile(profile.deltas, None)
    est = bias_terms(model, encoder, kind, profile, draws, seed, k)
    return operator_norm(encoder) * epsilon * est.g_norm_sum


def estimate_sigma_f(samples, directions: int = 64, seed: int = 0) -> float:
    """Max over random unit directions of the root mean squared projection."""
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 100:
        raise ValueError("need at least 100 sample vectors")
    u = make_rng(seed, "sigma_f").standard_normal((directions, x.shape[1]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    proj = x @ u.T
    return float(np.sqrt((proj**2).mean(axis=0)).max())


class HullConvergenceError(RuntimeError):
    def __init__(self, gap: float, iterations: int):
        super().__init__(f"Frank-Wolfe stopped after {iterations} iterations with duality gap {gap:.3e}")
        self.gap = gap
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class HullProjection:
    weights: np.ndarray
    projected: np.ndarray
    residual_norm: float
    gap: float = 0.0
    iterations: int = 0


def hull_project(pre_means, target, tolerance: float = 1e-8, max_iters: int = 10_000) -> HullProjection:
    """Closest point to ``target`` in the convex hull of ``pre_means``.

    Away-step Frank-Wolfe over the simplex of mixture weights with exact line
    search, started at the nearest mean. Each step is followed by a corrective
    solve on the active vertices, which ends the run in finitely many steps
    on degenerate faces. Stops when the duality gap is at most ``tolerance``.
    """
    V = np.atleast_2d(np.asarray(pre_means, dtype=float))
    t = np.asarray(target, dtype=float).reshape(-1)
    if V.shape[0] < 1:
        raise ValueError("need at least one pretraining mean")
    if V.shape[1] != t.size:
        raise ValueError("target dimension does not match the means")
    n = V.shape[0]
    w = np.zeros(n)
    w[int(np.argmin(np.linalg.norm(V - t, axis=1)))] = 1.0
    gap = math.inf
    for it in range(max_iters + 1):
        r = w @ V - t
        grad = V @ r
        s = int(np.argmin(grad))
        wg = float(grad @ w)
        gap = wg - float(grad[s])
        if gap <= tolerance:
            p = w @ V
            return HullProjection(w, p, float(np.linalg.norm(p - t)), gap, it)
        if it == max_iters:
            break
        support = np.flatnonzero(w > 0)
        a = int(support[np.argmax(grad[support])])
        away_gap = float(grad[a]) - wg
        direction = -w.copy()
        if gap >= away_gap:
            direction[s] += 1.0
            gamma_max = 1.0
        else:
            direction = w.copy()
            direction[a] -= 1.0
            gamma_max = w[a] / (1.0 - w[a])
        q = direction @ V
        qq = float(q @ q)
        if qq == 0.0:
            break
        gamma = min(max(-float(r @ q) / qq, 0.0), gamma_max)
        w = w + gamma * direction
        if gap < away_gap and gamma == gamma_max:
            w[a] = 0.0
        w = np.maximum(w, 0.0)
        w = _correct_on_support(V, t, w / w.sum())
    raise HullConvergenceError(gap, max_iters)


def _objective(V, t, w) -> float:
    r = w @ V - t
    return float(r @ r)


def _correct_on_support(V: np.ndarray, t: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Minimize over the affine hull of the active vertices, stepping back to the simplex as needed."""
    for _ in range(V.shape[0]):
        S = np.flatnonzero(w > 0)
        VS = V[S]
        m = S.size
        kkt = np.zeros((m + 1, m + 1))
        kkt[:m, :m] = VS @ VS.T
        kkt[:m, m] = kkt[m, :m] = 1.0
        rhs = np.concatenate([VS @ t, [1.0]])
        u = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:m]
        cur = w[S]
        if np.all(u >= 0):
            cand = np.zeros_like(w)
            cand[S] = u / u.sum()
            return cand if _objective(V, t, cand) <= _objective(V, t, w) else w
        step = u - cur
        neg = step < 0
        theta = float(np.min(cur[neg] / -step[neg]))
        cand = np.zeros_like(w)
        cand[S] = np.maximum(cur + theta * step, 0.0)
        cand[S[neg][np.argmin(cur[neg] / -step[neg])]] = 0.0
        if cand.sum() <= 0 or _objective(V, t, cand / cand.sum()) > _objective(V, t, w):
            return w
        w = cand / cand.sum()
    return w


def novel_class_bias_bound(in_dist_bias: float, residual_norm: float, L: float, R: float) -> float:
    """Bias bound for a class outside the pretraining hull: in-hull bias plus 2 L R ||r||."""
    if residual_norm < 0 or L < 0 or R < 0:
        raise ValueError("residual, L and R must be nonnegative")
    return in_dist_bias + 2.0 * L * R * residual_norm
