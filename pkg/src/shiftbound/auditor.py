"""Fit an empirical-minimizer encoder and check the shift-aware supervised-loss bounds.

Each audit assembles one inequality from Monte Carlo components and renders
a verdict: ``holds`` when the slack is at least three combined standard
errors above zero, ``violated`` when it is that far below, and
``inconclusive`` otherwise. The primary right-hand side subtracts the bias
at the actual shift vectors; the worst-case (sup) form is reported
alongside as a diagnostic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .classifier import avg_sup_loss_pairs, task_distribution_D, task_weights, Task
from .complexity import gen_bound, intra_class_deviation, loss_bound, rademacher_linear
from .encoder import LinearEncoder, encode
from .latent_model import (
    ClassDistribution,
    ClassPrior,
    LatentModel,
    all_collide_prob,
    collision_prob,
    collision_prob_k,
    draw_classes_no_collision,
    sample_tuples,
)
from .losses import (
    MarginLossKind,
    _loss_ragged,
    contrastive_margins,
    different_class_draws,
    grad_values,
    loss_values,
    unsup_loss,
    unsup_loss_split,
)
from .rng import Estimate, derive_seed, make_rng, monte_carlo
from .shift import ShiftProfile, bias_terms

SE_BAND = 3.0
THEOREMS = ("T4.1", "T4.5", "TB.1")


class DivergenceError(RuntimeError):
    pass


def draw_training_set(model: LatentModel, k: int, M: int, seed: int):
    """``M`` contrastive tuples as one batch (anchor, positive, negatives)."""
    return sample_tuples(model, k, M, make_rng(seed, "training_set"))


def training_inputs(batch) -> np.ndarray:
    """Stack a tuple batch into an ``(M, k+2, d)`` array."""
    return np.concatenate([batch.anchor[:, None], batch.positive[:, None], batch.negatives], axis=1)


def _empirical_loss_and_grad(W, kind, x, xp, xn):
    fx, fp, fn = x @ W.T, xp @ W.T, xn @ W.T
    v = contrastive_margins(fx, fp, fn)
    g = grad_values(kind, v)
    a = xp[:, None, :] - xn
    half = np.einsum("nk,nkd,ne->de", g, a, x) / x.shape[0]
    return float(loss_values(kind, v).mean()), W @ (half + half.T)


def _project(W: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(W)
    return W * (bound / norm) if norm > bound else W


def fit_encoder(
    model: LatentModel,
    k: int,
    kind: MarginLossKind,
    M: int,
    steps: int = 2000,
    step_size: float = 0.05,
    frob_bound: float | None = None,
    seed: int = 0,
) -> LinearEncoder:
    """Projected subgradient descent on the empirical contrastive loss.

    Starts from the (scaled) identity, projects onto the Frobenius ball after
    every step, and returns the iterate with the lowest empirical loss. The
    raw loss trace is kept in ``history``.
    """
    if M < 10:
        raise ValueError("need at least 10 training tuples")
    d = model.dim
    bound = math.sqrt(d) if frob_bound is None else float(frob_bound)
    lk = kind.with_ways(k)
    batch = draw_training_set(model, k, M, seed)
    x, xp, xn = batch.anchor, batch.positive, batch.negatives

    W = _project(np.eye(d), bound)
    best_W, best = W, math.inf
    history = []
    initial = None
    for step in range(steps + 1):
        loss, grad = _empirical_loss_and_grad(W, lk, x, xp, xn)
        if initial is None:
            initial = loss
        elif loss > 10.0 * max(initial, 1e-12):
            raise DivergenceError(f"empirical loss {loss:.4g} exceeds 10x the initial {initial:.4g} at step {step}")
        history.append(loss)
        if loss < best:
            best, best_W = loss, W
        if step < steps:
            W = _project(W - step_size * grad, bound)
    return LinearEncoder(best_W, bound, tuple(history))


def verdict_for(slack: float, std_error: float) -> str:
    if abs(slack) < SE_BAND * std_error:
        return "inconclusive"
    return "holds" if slack >= 0 else "violated"


@dataclass(frozen=True)
class BoundReport:
    theorem: str
    lhs: Estimate
    rhs_terms: dict
    rhs_total: Estimate
    slack: float
    verdict: str

    def __post_init__(self):
        if self.theorem not in THEOREMS:
            raise ValueError(f"unknown theorem {self.theorem!r}")
        if self.verdict not in ("holds", "violated", "inconclusive"):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        object.__setattr__(self, "lhs", Estimate(*map(float, self.lhs)))
        object.__setattr__(self, "rhs_total", Estimate(*map(float, self.rhs_total)))

    @property
    def combined_se(self) -> float:
        return math.hypot(self.lhs.std_error, self.rhs_total.std_error)

    def to_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "lhs": {"estimate": self.lhs.estimate, "std_error": self.lhs.std_error},
            "rhs_terms": {k: float(v) for k, v in sorted(self.rhs_terms.items())},
            "rhs_total": {"estimate": self.rhs_total.estimate, "std_error": self.rhs_total.std_error},
            "slack": self.slack,
            "verdict": self.verdict,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "BoundReport":
        return cls(
            data["theorem"],
            Estimate(data["lhs"]["estimate"], data["lhs"]["std_error"]),
            dict(data["rhs_terms"]),
            Estimate(data["rhs_total"]["estimate"], data["rhs_total"]["std_error"]),
            float(data["slack"]),
            data["verdict"],
        )

    @classmethod
    def from_json(cls, text: str) -> "BoundReport":
        return cls.from_dict(json.loads(text))


def _report(theorem: str, lhs: Estimate, terms: dict, rhs: Estimate) -> BoundReport:
    slack = rhs.estimate - lhs.estimate
    se = math.hypot(lhs.std_error, rhs.std_error)
    return BoundReport(theorem, lhs, terms, rhs, slack, verdict_for(slack, se))


def _quad(*ses) -> float:
    return math.sqrt(sum(s * s for s in ses))


@dataclass(frozen=True)
class _Fitted:
    encoder: LinearEncoder
    gen: object
    R_f: float


def _fit_with_gen(model, kind, k, M, confidence_delta, seed, steps, step_size, rad_draws, encoder=None) -> _Fitted:
    if encoder is None:
        encoder = fit_encoder(model, k, kind, M, steps=steps, step_size=step_size, seed=derive_seed(seed, "fit"))
    batch = draw_training_set(model, k, M, derive_seed(seed, "fit"))
    rad = rademacher_linear(training_inputs(batch), encoder.frob_bound, rad_draws, derive_seed(seed, "rademacher"))
    R_f = encoder.frob_bound * model.norm_bound
    gen = gen_bound(rad, R_f, loss_bound(kind.with_ways(k), R_f, k), kind.lipschitz, confidence_delta)
    return _Fitted(encoder, gen, R_f)


def _down_means_f(model: LatentModel, encoder, shift: ShiftProfile) -> dict:
    down = model.means - shift.as_array(range(model.n_classes), model.dim)
    return {c: row for c, row in enumerate(encode(encoder, down))}


def _check_k1(kind: MarginLossKind):
    if kind.kind not in ("hinge", "logistic"):
        raise ValueError("audits support hinge and logistic losses")


def audit_theorem_4_1(
    model: LatentModel,
    shift: ShiftProfile,
    kind: MarginLossKind,
    M: int = 500,
    draws: int = 200_000,
    confidence_delta: float = 0.05,
    seed: int = 0,
    steps: int = 1000,
    step_size: float = 0.05,
    rad_draws: int = 200,
    encoder: LinearEncoder | None = None,
) -> BoundReport:
    """Average downstream mean-classifier loss over class pairs against the contrastive-loss bound.

    RHS = (L_un(f) - tau l(0)) / (1 - tau) + Gen_M / (1 - tau) - T_actual, with
    the fitted encoder as comparator.
    """
    _check_k1(kind)
    kind = kind.with_ways(1)
    fit = _fit_with_gen(model, kind, 1, M, confidence_delta, seed, steps, step_size, rad_draws, encoder)
    f = fit.encoder
    tau = collision_prob(model.prior)
    lhs = avg_sup_loss_pairs(model, f, _down_means_f(model, f, shift), kind, draws, derive_seed(seed, "lhs"))
    l_un = unsup_loss(model, f, kind, 1, draws, derive_seed(seed, "unsup"))
    bias = bias_terms(model, f, kind, shift, draws, derive_seed(seed, "bias"))
    eta = 1.0 / (1.0 - tau)
    core = (l_un.estimate - tau * kind.at_zero) * eta - bias.t_actual.estimate
    rhs = Estimate(core + eta * fit.gen.value, _quad(eta * l_un.std_error, bias.t_actual.std_error, eta * fit.gen.std_error))
    terms = {
        "unsup_loss": l_un.estimate,
        "unsup_loss_se": l_un.std_error,
        "tau": tau,
        "loss_at_zero": kind.at_zero,
        "eta": eta,
        "gen_bound": fit.gen.value,
        "gen_bound_scaled": eta * fit.gen.value,
        "bias_actual": bias.t_actual.estimate,
        "bias_actual_se": bias.t_actual.std_error,
        "bias_sup": bias.b_sup,
        "bias_sup_se": bias.b_sup_se,
        "rhs_sup_form": rhs.estimate + bias.t_actual.estimate - bias.b_sup,
        "rhs_without_gen": core,
        "slack_without_gen": core - lhs.estimate,
        "epsilon_f": bias.epsilon,
        "R_f": fit.R_f,
    }
    return _report("T4.1", lhs, terms, rhs)


def audit_theorem_4_5(
    model: LatentModel,
    shift: ShiftProfile,
    kind: MarginLossKind,
    M: int = 500,
    draws: int = 200_000,
    confidence_delta: float = 0.05,
    seed: int = 0,
    steps: int = 1000,
    step_size: float = 0.05,
    rad_draws: int = 200,
    encoder: LinearEncoder | None = None,
) -> BoundReport:
    """RHS = L_un^neq(f) + beta s(f) + eta Gen_M - T_actual with beta = c' tau / (1 - tau)."""
    _check_k1(kind)
    kind = kind.with_ways(1)
    fit = _fit_with_gen(model, kind, 1, M, confidence_delta, seed, steps, step_size, rad_draws, encoder)
    f = fit.encoder
    tau = collision_prob(model.prior)
    eta = 1.0 / (1.0 - tau)
    c_prime = math.sqrt(2.0) * kind.collision_constant
    beta = c_prime * tau * eta
    lhs = avg_sup_loss_pairs(model, f, _down_means_f(model, f, shift), kind, draws, derive_seed(seed, "lhs"))
    split = unsup_loss_split(model, f, kind, 1, draws, derive_seed(seed, "split"))
    s = intra_class_deviation(model, f, draws, derive_seed(seed, "s"))
    bias = bias_terms(model, f, kind, shift, draws, derive_seed(seed, "bias"))
    core = split.l_neq.estimate + beta * s.s_value - bias.t_actual.estimate
    rhs = Estimate(
        core + eta * fit.gen.value,
        _quad(split.l_neq.std_error, beta * s.std_error, bias.t_actual.std_error, eta * fit.gen.std_error),
    )
    terms = {
        "l_neq": split.l_neq.estimate,
        "l_neq_se": split.l_neq.std_error,
        "l_eq": split.l_eq.estimate,
        "tau": tau,
        "c_prime": c_prime,
        "beta": beta,
        "eta": eta,
        "s_value": s.s_value,
        "s_value_se": s.std_error,
        "gen_bound": fit.gen.value,
        "gen_bound_scaled": eta * fit.gen.value,
        "bias_actual": bias.t_actual.estimate,
        "bias_actual_se": bias.t_actual.std_error,
        "bias_sup": bias.b_sup,
        "bias_sup_se": bias.b_sup_se,
        "rhs_sup_form": rhs.estimate + bias.t_actual.estimate - bias.b_sup,
        "rhs_eta_bias_placement": core + bias.t_actual.estimate + eta * (fit.gen.value - bias.t_actual.estimate),
        "rhs_without_gen": core,
        "slack_without_gen": core - lhs.estimate,
        "epsilon_f": bias.epsilon,
        "R_f": fit.R_f,
    }
    return _report("T4.5", lhs, terms, rhs)


def _task_masks(prior: ClassPrior, k: int):
    """Exact per-task weights ``rho_min_plus / p_max``, keyed by class bitmask."""
    weights = {}
    for task in task_distribution_D(prior, k):
        t = Task(tuple(sorted(task)))
        rho_min, p_max = task_weights(prior, k, t)
        weights[sum(1 << c for c in task)] = rho_min / p_max
    return weights


def weighted_task_loss(
    model: LatentModel,
    encoder: LinearEncoder | None,
    means: dict,
    kind: MarginLossKind,
    k: int,
    draws: int,
    seed: int,
) -> Estimate:
    """``E_{T~D}[rho_min_plus(T) / p_max(T) * L_sup(T)]`` with uniform labels in each task.

    Tasks are drawn from collision-free tuples; weights come from exact
    enumeration. A task of size t uses the (t-1)-way loss.
    """
    C = model.n_classes
    if C > 62:
        raise ValueError("task bitmasks support at most 62 classes")
    weights = _task_masks(model.prior, k)
    rows = np.stack([np.asarray(means[c], dtype=float) for c in range(C)])
    bits = 1 << np.arange(C)

    def draw(rng, n):
        cls = draw_classes_no_collision(model.prior, k, n, rng)
        member = np.zeros((n, C), dtype=bool)
        member[np.arange(n)[:, None], cls] = True
        mask = member.astype(np.int64) @ bits
        w = np.array([weights[int(m)] for m in mask])
        # uniform label among the task's classes
        u = rng.random(n)
        sizes = member.sum(axis=1)
        pick = np.minimum((u * sizes).astype(int), sizes - 1)
        order = np.cumsum(member, axis=1) - 1
        labels = np.argmax(member & (order == pick[:, None]), axis=1)
        fx = encode(encoder, model.sample_labels(labels, rng))
        scores = fx @ rows.T
        v = scores[np.arange(n), labels][:, None] - scores
        keep = member.copy()
        keep[np.arange(n), labels] = False
        return w * _loss_ragged(kind, v, keep)

    return monte_carlo(draw, draws, seed, "weighted_task_loss").estimate()


def audit_theorem_B_1(
    model: LatentModel,
    shift: ShiftProfile,
    kind: MarginLossKind,
    k: int,
    M: int = 500,
    draws: int = 200_000,
    confidence_delta: float = 0.05,
    seed: int = 0,
    steps: int = 1000,
    step_size: float = 0.05,
    rad_draws: int = 200,
    encoder: LinearEncoder | None = None,
) -> BoundReport:
    """k-negative bound.

    RHS = alpha L_un^neq(f) + c0 k tau_1 / (1 - tau_k) s(f) + Gen_M / (1 - tau_k) - T_cond
    where ``alpha = (1 - tau_0) / (1 - tau_k)`` and ``T_cond`` is the bias
    conditioned on no anchor collision.
    """
    _check_k1(kind)
    prior = model.prior
    lk = kind.with_ways(k)
    tau_k = collision_prob_k(prior, k)
    tau_0 = all_collide_prob(prior, k)
    tau_1 = collision_prob(prior)
    eta_k = 1.0 / (1.0 - tau_k)
    alpha = (1.0 - tau_0) * eta_k
    c0 = math.sqrt(2.0) * kind.collision_constant
    s_coef = c0 * k * tau_1 * eta_k

    fit = _fit_with_gen(model, kind, k, M, confidence_delta, seed, steps, step_size, rad_draws, encoder)
    f = fit.encoder
    lhs = weighted_task_loss(model, f, _down_means_f(model, f, shift), kind, k, draws, derive_seed(seed, "lhs"))
    l_neq = monte_carlo(
        lambda rng, n: different_class_draws(model, f, lk, k, rng, n), draws, derive_seed(seed, "l_neq"), "l_neq"
    ).estimate()
    s = intra_class_deviation(model, f, draws, derive_seed(seed, "s"))
    bias = bias_terms(model, f, kind, shift, draws, derive_seed(seed, "bias"), k=k)
    core = alpha * l_neq.estimate + s_coef * s.s_value - bias.t_actual.estimate
    rhs = Estimate(
        core + eta_k * fit.gen.value,
        _quad(alpha * l_neq.std_error, s_coef * s.std_error, bias.t_actual.std_error, eta_k * fit.gen.std_error),
    )
    terms = {
        "l_neq": l_neq.estimate,
        "l_neq_se": l_neq.std_error,
        "tau_0": tau_0,
        "tau_1": tau_1,
        "tau_k": tau_k,
        "alpha": alpha,
        "c0": c0,
        "s_coefficient": s_coef,
        "eta": eta_k,
        "k": k,
        "s_value": s.s_value,
        "s_value_se": s.std_error,
        "gen_bound": fit.gen.value,
        "gen_bound_scaled": eta_k * fit.gen.value,
        "bias_actual": bias.t_actual.estimate,
        "bias_actual_se": bias.t_actual.std_error,
        "bias_joint": (1.0 - tau_k) * bias.t_actual.estimate,
        "bias_sup": bias.b_sup,
        "bias_sup_se": bias.b_sup_se,
        "rhs_sup_form": rhs.estimate + bias.t_actual.estimate - bias.b_sup,
        "rhs_without_gen": core,
        "slack_without_gen": core - lhs.estimate,
        "epsilon_f": bias.epsilon,
        "R_f": fit.R_f,
    }
    return _report("TB.1", lhs, terms, rhs)


@dataclass(frozen=True)
class JensenCheck:
    l_un: Estimate
    rhs: Estimate
    slack: float
    std_error: float

    @property
    def holds(self) -> bool:
        return self.slack >= -SE_BAND * self.std_error


def jensen_chain(
    model: LatentModel,
    encoder: LinearEncoder | None,
    kind: MarginLossKind,
    shift: ShiftProfile,
    draws: int,
    seed: int,
) -> JensenCheck:
    """``L_un(f) >= tau l(0) + (1 - tau)(L_sup^{mu'}(f) + T_actual(f))`` for k=1."""
    kind = kind.with_ways(1)
    tau = collision_prob(model.prior)
    l_un = unsup_loss(model, encoder, kind, 1, draws, derive_seed(seed, "unsup"))
    sup = avg_sup_loss_pairs(model, encoder, _down_means_f(model, encoder, shift), kind, draws, derive_seed(seed, "lhs"))
    bias = bias_terms(model, encoder, kind, shift, draws, derive_seed(seed, "bias"))
    rhs = Estimate(
        tau * kind.at_zero + (1 - tau) * (sup.estimate + bias.t_actual.estimate),
        (1 - tau) * math.hypot(sup.std_error, bias.t_actual.std_error),
    )
    return JensenCheck(l_un, rhs, l_un.estimate - rhs.estimate, math.hypot(l_un.std_error, rhs.std_error))


def harness_instance(
    index: int,
    seed: int = 0,
    n_classes: int | None = None,
    uniform: bool = False,
    centered: bool = False,
    max_epsilon: float = 0.3,
) -> tuple[LatentModel, ShiftProfile]:
    """Seeded random Gaussian model with a shift profile.

    C in 2..5 and d in 2..8 unless ``n_classes`` fixes C; eps uniform on
    [0, max_epsilon]. The norm bound sits six standard deviations past the
    farthest class so truncation is negligible.
    """
    rng = make_rng(seed, "harness", index)
    C = int(rng.integers(2, 6)) if n_classes is None else int(n_classes)
    d = int(rng.integers(2, 9))
    prior = ClassPrior.uniform(C) if uniform else ClassPrior.from_weights(rng.dirichlet(np.full(C, 3.0)))
    classes, reach = [], 0.0
    for _ in range(C):
        if centered:
            mean = np.zeros(d)
        else:
            u = rng.standard_normal(d)
            mean = u / np.linalg.norm(u) * rng.uniform(0.8, 1.5)
        A = rng.standard_normal((d, d))
        cov = A @ A.T / d * rng.uniform(0.01, 0.06)
        classes.append(ClassDistribution(mean, cov))
        top = float(np.linalg.eigvalsh(cov)[-1])
        reach = max(reach, float(np.linalg.norm(mean) + math.sqrt(np.trace(cov)) + 6.0 * math.sqrt(top)))
    model = LatentModel(prior, tuple(classes), reach)
    eps = float(rng.uniform(0.0, max_epsilon))
    deltas = {}
    for c in range(C):
        u = rng.standard_normal(d)
        deltas[c] = u / np.linalg.norm(u) * eps * rng.uniform(0.3, 1.0)
    return model, ShiftProfile(deltas, eps)
