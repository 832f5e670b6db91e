"""Acceptance criteria 1-11; a per-criterion PASS/FAIL summary is printed at the end of the run."""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from shiftbound.auditor import (
    audit_theorem_4_1,
    audit_theorem_4_5,
    audit_theorem_B_1,
    draw_training_set,
    harness_instance,
    jensen_chain,
    training_inputs,
)
from shiftbound.cli import main
from shiftbound.complexity import (
    RademacherEstimate,
    collision_margin_abs,
    gen_bound,
    intra_class_deviation,
    rademacher_linear,
    rademacher_matrix,
)
from shiftbound.encoder import LinearEncoder
from shiftbound.io import write_json
from shiftbound.latent_model import (
    ClassDistribution,
    ClassPrior,
    LatentModel,
    all_collide_prob,
    collision_prob,
    collision_prob_k,
    draw_classes,
    enumerate_tuples,
    nu_distribution,
    u_distribution,
)
from shiftbound.losses import HINGE, LOGISTIC, MarginLossKind, unsup_loss_split
from shiftbound.recovery import (
    Severity,
    hungarian,
    recover_pseudo_means,
    shift_accuracy_table,
    simulate_embeddings,
    sweep_entries,
)
from shiftbound.rng import make_rng, monte_carlo
from shiftbound.shift import (
    ShiftProfile,
    bias_terms,
    hull_project,
    model_sigma_f,
    novel_class_bias_bound,
)

HARNESS = range(20)
NATURAL_LOGISTIC = MarginLossKind("logistic", natural_log=True)


# 1 ---------------------------------------------------------------------------

def tau_priors():
    rng = np.random.default_rng(2024)
    out = []
    for C in range(2, 7):
        out.append(ClassPrior.uniform(C))
        out.append(ClassPrior.from_weights(rng.dirichlet(np.ones(C))))
        out.append(ClassPrior.from_weights(rng.dirichlet(np.full(C, 0.3))))
        skew = np.full(C, 0.01)
        skew[0] = 1.0
        out.append(ClassPrior.from_weights(skew))
    return out


@pytest.mark.criterion(1, "tau-calculus matches enumeration to 1e-10 and Monte Carlo within 3 SE")
def test_criterion_1_tau_calculus():
    start = time.perf_counter()
    for prior in tau_priors():
        C = prior.n_classes
        for k in (1, 2, 3):
            rows = enumerate_tuples(prior, k)
            any_hit = sum(p for _, p, hits, _ in rows if hits)
            all_hit = sum(p for _, p, hits, _ in rows if len(hits) == k)
            first_hit = sum(p for t, p, _, _ in rows if t[1] == t[0])
            anchor_any = np.zeros(C)
            anchor_first = np.zeros(C)
            for t, p, hits, _ in rows:
                if hits:
                    anchor_any[t[0]] += p
                if t[1] == t[0]:
                    anchor_first[t[0]] += p
            assert abs(sum(p for _, p, _, _ in rows) - 1.0) <= 1e-10
            assert abs(collision_prob(prior) - first_hit) <= 1e-10
            assert abs(collision_prob_k(prior, k) - any_hit) <= 1e-10
            assert abs(all_collide_prob(prior, k) - all_hit) <= 1e-10
            np.testing.assert_allclose(nu_distribution(prior).probabilities, anchor_first / first_hit, rtol=0, atol=1e-10)
            np.testing.assert_allclose(u_distribution(prior, k).probabilities, anchor_any / any_hit, rtol=0, atol=1e-10)

    n = 100_000
    for i, prior in enumerate(tau_priors()[::3]):
        for k in (1, 2, 3):
            cls = draw_classes(prior, k, n, make_rng(11, "criterion1", i, k))
            hits = cls[:, 1:] == cls[:, :1]
            for freq_event, exact in (
                (hits.any(axis=1), collision_prob_k(prior, k)),
                (hits.all(axis=1), all_collide_prob(prior, k)),
                (hits[:, 0], collision_prob(prior)),
            ):
                se = math.sqrt(max(exact * (1 - exact), 1e-300) / n)
                assert abs(freq_event.mean() - exact) <= 3 * se + 1e-12
    assert time.perf_counter() - start < 10


# 2 ---------------------------------------------------------------------------

def harness_encoder(index, dim):
    if index % 2 == 0:
        return None
    A = make_rng(index, "criterion_encoder").normal(size=(dim, dim))
    A *= math.sqrt(dim) / np.linalg.norm(A)
    return LinearEncoder(A, math.sqrt(dim))


@pytest.mark.criterion(2, "convexity chain on 20 Gaussian models within 3 combined SE")
def test_criterion_2_jensen_chain():
    start = time.perf_counter()
    failures = []
    for i in HARNESS:
        model, shift = harness_instance(i)
        check = jensen_chain(model, harness_encoder(i, model.dim), HINGE, shift, 200_000, i)
        if not check.holds:
            failures.append((i, check.slack, check.std_error))
    assert not failures
    assert time.perf_counter() - start < 120


# 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "theorem audits never return violated on the 20-seed harness")
def test_criterion_3_theorem_audits():
    start = time.perf_counter()
    verdicts = []
    for i in HARNESS:
        model, shift = harness_instance(i)
        verdicts.append(("T4.1", i, audit_theorem_4_1(model, shift, HINGE, seed=i).verdict))
        verdicts.append(("T4.5", i, audit_theorem_4_5(model, shift, HINGE, seed=i).verdict))
        model4, shift4 = harness_instance(i, n_classes=4, uniform=True)
        verdicts.append(("TB.1", i, audit_theorem_B_1(model4, shift4, HINGE, 2, seed=i).verdict))
    violated = [v for v in verdicts if v[2] == "violated"]
    assert not violated
    assert time.perf_counter() - start < 600


# 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "bias ceilings hold on every harness instance")
def test_criterion_4_ceilings():
    for i in HARNESS:
        model, shift = harness_instance(i)
        for kind in (HINGE, NATURAL_LOGISTIC, LOGISTIC):
            b = bias_terms(model, None, kind, shift, 100_000, i)
            eps = shift.epsilon
            assert abs(b.t_actual.estimate) <= b.b_sup + 1e-12
            assert b.b_sup <= 2 * kind.lipschitz * model.norm_bound * eps + 3 * b.b_sup_se
            if kind.lipschitz == 1.0:
                assert b.b_sup <= b.ceilings["hinge" if kind.kind == "hinge" else "logistic"] + 3 * b.b_sup_se
    for i in HARNESS:
        model, shift = harness_instance(i, centered=True)
        sigma = model_sigma_f(model)
        for kind in (HINGE, NATURAL_LOGISTIC):
            b = bias_terms(model, None, kind, shift, 100_000, i, sigma_f=sigma)
            bound = 2 * shift.epsilon * sigma * math.sqrt(2 / math.pi)
            assert b.ceilings["subgaussian"] == pytest.approx(bound, rel=1e-12)
            assert b.b_sup <= bound + 3 * b.b_sup_se


# 5 ---------------------------------------------------------------------------

@pytest.mark.criterion(5, "class-collision bounds hold on the harness")
def test_criterion_5_class_collision():
    for i in HARNESS:
        model, _ = harness_instance(i)
        split = unsup_loss_split(model, None, HINGE, 1, 100_000, i)
        s = intra_class_deviation(model, None, 100_000, i)
        se = math.hypot(split.l_eq.std_error, math.sqrt(2) * s.std_error)
        assert split.l_eq.estimate - 1 <= math.sqrt(2) * s.s_value + 3 * se
        for c in range(model.n_classes):
            spectral = s.per_class[c][0]
            z = collision_margin_abs(model, None, c, 50_000, i)
            norms = monte_carlo(
                lambda rng, n, c=c: np.linalg.norm(model.sample_class(c, n, rng), axis=1), 50_000, i, f"norm_{c}"
            ).estimate()
            scale = math.sqrt(2 * spectral)
            assert z.estimate <= scale * norms.estimate + 3 * math.hypot(z.std_error, scale * norms.std_error)


# 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "Rademacher closed form and exact generalization-gap arithmetic")
def test_criterion_6_rademacher():
    for i in range(5):
        model, _ = harness_instance(i)
        x = training_inputs(draw_training_set(model, 1 + i % 3, 30, i)) / model.norm_bound
        assert np.all(np.linalg.norm(x, axis=2) <= 1 + 1e-12)
        w = 0.5 + i
        draws = 20
        rad = rademacher_linear(x, w, draws, seed=i)
        flat = x.reshape(-1, x.shape[2])
        rng = make_rng(i, "rademacher", 0)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(draws, flat.shape[0], x.shape[2]))
        per_draw = []
        probe = np.random.default_rng(i)
        for sig in signs:
            M = rademacher_matrix(flat, sig)
            sup = w * np.linalg.norm(M)
            per_draw.append(sup)
            W = probe.normal(size=(1000,) + M.shape)
            W *= w * probe.uniform(0, 1, size=(1000, 1, 1)) / np.linalg.norm(W, axis=(1, 2), keepdims=True)
            assert np.max(np.einsum("njd,jd->n", W, M)) <= sup + 1e-9
            attained = float(np.sum(w * M / np.linalg.norm(M) * M))
            assert abs(attained - sup) <= 1e-9
        assert abs(rad.mean - np.mean(per_draw)) <= 1e-9

    for M, k, R, B, eta, delta, mean, se in [
        (500, 1, 3.0, 19.0, 1.0, 0.05, 120.0, 2.0),
        (100, 3, 1.5, 6.5, 1 / math.log(2), 0.01, 40.0, 0.0),
    ]:
        g = gen_bound(RademacherEstimate(mean, se, 100, M, k), R, B, eta, delta)
        expected = (
            4 * math.sqrt(3) * eta * R * math.sqrt(k) / M * mean
            + 3 * B * math.sqrt(math.log(4 / delta) / (2 * M))
            + 3 * B * math.sqrt(math.log(2 / delta) / (2 * M))
        )
        assert g.value == expected


# 7 ---------------------------------------------------------------------------

def grid_residual(V, t, step=1e-3):
    n = int(round(1 / step))
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    w = np.stack([i[keep], j[keep], n - i[keep] - j[keep]], axis=1) / n
    return float(np.min(np.linalg.norm(w @ V - t, axis=1)))


@pytest.mark.criterion(7, "hull projection against grid oracle, planted targets and bound arithmetic")
def test_criterion_7_hull():
    rng = np.random.default_rng(77)
    for _ in range(50):
        V, t = rng.normal(size=(3, 2)), rng.normal(size=2) * 2
        fw = hull_project(V, t).residual_norm
        grid = grid_residual(V, t)
        assert abs(fw - grid) <= 2e-3
        assert fw <= grid + 1e-9
    for _ in range(50):
        m, d = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        V = rng.normal(size=(m, d))
        assert hull_project(V, rng.dirichlet(np.ones(m)) @ V).residual_norm <= 1e-6
    assert novel_class_bias_bound(0.3, 0.2, 1.0, 1.0) == 0.3 + 2 * 1.0 * 1.0 * 0.2
    for b, r, L, R in [(0.0, 0.5, 2.0, 3.0), (0.25, 0.125, 1 / math.log(2), 1.5)]:
        assert novel_class_bias_bound(b, r, L, R) == b + 2.0 * L * R * r


# 8 ---------------------------------------------------------------------------

@pytest.mark.criterion(8, "Hungarian equals brute force and planted pseudo-means are recovered")
def test_criterion_8_recovery():
    perms = np.array(list(itertools.permutations(range(7))))
    rng = np.random.default_rng(8)
    for _ in range(100):
        c = rng.uniform(size=(7, 7))
        brute = c[np.arange(7), perms].sum(axis=1).min()
        assert hungarian(c).cost == pytest.approx(brute, abs=1e-12)
    for seed in range(20):
        r = np.random.default_rng(seed)
        K, d = 5, 3
        u = r.normal(size=(K, d))
        means = 3 * u / np.linalg.norm(u, axis=1, keepdims=True)
        while np.min([np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2)]) < 1.5:
            u = r.normal(size=(K, d))
            means = 3 * u / np.linalg.norm(u, axis=1, keepdims=True)
        model = LatentModel(
            ClassPrior.uniform(K), tuple(ClassDistribution(m, 0.02 * np.eye(d)) for m in means), 5.0
        )
        labels, x = simulate_embeddings(model, 400, seed)
        down = {c: means[c] for c in range(K)}
        recovered, align = recover_pseudo_means(x, K, down, seed=seed)
        errors = [np.linalg.norm(recovered[c] - means[c]) for c in range(K)]
        assert sorted(align.permutation.values()) == list(range(K))
        # every recovered mean sits nearest its own planted class
        for c in range(K):
            assert int(np.argmin(np.linalg.norm(means - recovered[c], axis=1))) == c
        assert np.mean(errors) <= 0.05


# 9 ---------------------------------------------------------------------------

def pentagon_model():
    angles = 2 * np.pi * np.arange(5) / 5
    means = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return LatentModel(ClassPrior.uniform(5), tuple(ClassDistribution(m, 0.25 * np.eye(2)) for m in means), 6.0)


@pytest.mark.criterion(9, "synthetic severity sweep gives Spearman <= -0.9 and delta_hat at the planted size")
def test_criterion_9_severity_sweep():
    start = time.perf_counter()
    model = pentagon_model()
    magnitudes = (0.0, 0.5, 1.0, 2.0, 4.0)
    labels, pre = simulate_embeddings(model, 2000, 9)
    entries = sweep_entries(labels, pre, [Severity(f"s{m}", scale=m) for m in magnitudes])
    for (_, delta, _), m in zip(entries, magnitudes):
        v = Severity("v", scale=m).vector(2)
        paired = [np.linalg.norm((pre[labels == c] + v - pre[labels == c]).mean(axis=0)) for c in range(5)]
        se = float(np.std(paired) / math.sqrt(len(paired)))
        assert abs(delta - m) <= 3 * se + 1e-12
    r, _ = shift_accuracy_table(entries)
    assert r <= -0.9
    assert time.perf_counter() - start < 60


# 10 --------------------------------------------------------------------------

@pytest.mark.criterion(10, "reference table rows give Spearman -1.0 exactly")
def test_criterion_10_reference_table():
    rows = [("avg2_a", 3.43, 79.3), ("avg2_b", 4.65, 76.7), ("avg2_c", 5.50, 74.2), ("avg2_d", 7.72, 69.7)]
    r, _ = shift_accuracy_table(rows)
    assert r == -1.0


# 11 --------------------------------------------------------------------------

def snapshot(path: Path) -> dict:
    if path.is_dir():
        return {p.name: p.read_bytes() for p in sorted(path.iterdir())}
    return {path.name: path.read_bytes()}


@pytest.mark.criterion(11, "every CLI command is byte-identical across two runs")
def test_criterion_11_cli_determinism(tmp_path):
    model = pentagon_model()
    write_json(tmp_path / "model.json", model.to_dict())
    write_json(tmp_path / "shift.json", ShiftProfile({c: [0.05 * c, -0.02] for c in range(5)}).to_dict())
    write_json(tmp_path / "sev.json", [{"tag": f"s{i}", "scale": m} for i, m in enumerate((0.0, 1.0, 2.0))])
    write_json(tmp_path / "target.json", {"inside": [0.1, 0.2], "outside": [5.0, 5.0]})
    emb = tmp_path / "emb"
    assert main(["simulate", "--model", str(tmp_path / "model.json"), "--severities", str(tmp_path / "sev.json"),
                 "--samples", "200", "--out", str(emb)]) == 0
    pre, down = str(emb / "pretrain.csv"), str(emb / "down_s1.csv")
    audit = ["--model", str(tmp_path / "model.json"), "--shift", str(tmp_path / "shift.json"),
             "--draws", "20000", "--samples", "200", "--steps", "50"]
    commands = {
        "simulate": ["simulate", "--model", str(tmp_path / "model.json"), "--severities", str(tmp_path / "sev.json"),
                     "--samples", "200", "--seed", "3"],
        "audit-4.1": ["audit", "--theorem", "4.1", *audit],
        "audit-4.5": ["audit", "--theorem", "4.5", "--loss", "logistic", *audit],
        "audit-B.1": ["audit", "--theorem", "B.1", "--k", "2", *audit],
        "shift-sweep": ["shift-sweep", "--embeddings-pre", pre, "--embeddings-down",
                        *(str(emb / f"down_s{i}.csv") for i in range(3))],
        "shift-sweep-model": ["shift-sweep", "--model", str(tmp_path / "model.json"),
                              "--severities", str(tmp_path / "sev.json"), "--samples", "300"],
        "recover": ["recover", "--embeddings-pre", pre, "--embeddings-down", down],
        "rademacher": ["rademacher", "--model", str(tmp_path / "model.json"), "--samples", "100", "--draws", "200"],
        "hull": ["hull", "--embeddings-pre", pre, "--target", str(tmp_path / "target.json")],
    }
    for name, argv in commands.items():
        outputs = []
        for run in range(2):
            out = tmp_path / f"{name}-{run}" / ("dir" if name == "simulate" else "result.txt")
            code = main(argv + ["--out", str(out)])
            outputs.append((code, snapshot(out)))
        assert outputs[0][0] in (0, 1), name
        assert outputs[0] == outputs[1], name
