import math

import numpy as np
import pytest

from shiftbound.auditor import (
    BoundReport,
    DivergenceError,
    audit_theorem_4_1,
    audit_theorem_4_5,
    audit_theorem_B_1,
    draw_training_set,
    fit_encoder,
    harness_instance,
    jensen_chain,
    training_inputs,
    verdict_for,
)
from shiftbound.encoder import LinearEncoder
from shiftbound.latent_model import ClassDistribution, ClassPrior, LatentModel, collision_prob
from shiftbound.losses import HINGE, LOGISTIC
from shiftbound.rng import Estimate
from shiftbound.shift import ShiftProfile

FAST = dict(M=200, draws=20_000, steps=100, rad_draws=50)


def signed_axis_model(C=2):
    vecs = [np.eye(2)[0], -np.eye(2)[0], np.eye(2)[1], -np.eye(2)[1]][:C]
    return LatentModel(ClassPrior.uniform(C), tuple(ClassDistribution.point_mass(v) for v in vecs), 1.0)


class TestFitEncoder:
    def test_zero_steps_is_identity(self):
        model, _ = harness_instance(0)
        enc = fit_encoder(model, 1, HINGE, 50, steps=0)
        np.testing.assert_array_equal(enc.matrix, np.eye(model.dim))
        assert len(enc.history) == 1

    def test_separable_point_masses(self):
        model = signed_axis_model()
        tau = collision_prob(model.prior)
        enc = fit_encoder(model, 1, HINGE, 200, steps=300, step_size=0.1, frob_bound=4.0)
        # collisions cost exactly l(0)=1; everything else can be driven to 0
        assert min(enc.history) <= tau + 0.05
        assert np.linalg.norm(enc.matrix) <= 4.0 + 1e-12

    def test_identical_classes_cannot_improve(self):
        dist = ClassDistribution([0.5, 0.5], 0.01 * np.eye(2))
        model = LatentModel(ClassPrior.uniform(2), (dist, dist), 2.0)
        enc = fit_encoder(model, 1, HINGE, 200, steps=50, step_size=0.01)
        # the contrastive loss of any linear encoder averages to at least l(0) here
        assert min(enc.history) >= 1.0 - 0.1

    def test_divergence_detected(self):
        model, _ = harness_instance(1)
        with pytest.raises(DivergenceError):
            fit_encoder(model, 1, LOGISTIC, 100, steps=50, step_size=1e6, frob_bound=1e6)

    def test_training_inputs_shape(self):
        model, _ = harness_instance(2)
        x = training_inputs(draw_training_set(model, 3, 40, 0))
        assert x.shape == (40, 5, model.dim)


class TestReport:
    def test_verdicts(self):
        assert verdict_for(1.0, 0.1) == "holds"
        assert verdict_for(-1.0, 0.1) == "violated"
        assert verdict_for(-0.2, 0.1) == "inconclusive"
        assert verdict_for(0.0, 0.0) == "holds"

    def test_json_round_trip(self):
        r = BoundReport("T4.5", Estimate(0.5, 0.01), {"b": 2.0, "a": 1.0}, Estimate(1.0, 0.02), 0.5, "holds")
        text = r.to_json()
        assert text.endswith("\n")
        assert BoundReport.from_json(text).to_json() == text
        assert list(r.to_dict()["rhs_terms"]) == ["a", "b"]

    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            BoundReport("T9", Estimate(0, 0), {}, Estimate(0, 0), 0.0, "holds")
        with pytest.raises(ValueError):
            BoundReport("T4.1", Estimate(0, 0), {}, Estimate(0, 0), 0.0, "maybe")


class TestAudits:
    def test_theorem_4_1_terms(self):
        model, shift = harness_instance(3)
        r = audit_theorem_4_1(model, shift, HINGE, **FAST)
        t = r.rhs_terms
        tau = collision_prob(model.prior)
        assert t["tau"] == tau and t["eta"] == pytest.approx(1 / (1 - tau))
        expected = (t["unsup_loss"] - tau) * t["eta"] + t["gen_bound_scaled"] - t["bias_actual"]
        assert r.rhs_total.estimate == pytest.approx(expected, abs=1e-12)
        assert r.slack == pytest.approx(r.rhs_total.estimate - r.lhs.estimate, abs=1e-15)
        assert r.verdict != "violated"

    def test_theorem_4_5_constants(self):
        model, shift = harness_instance(4)
        r = audit_theorem_4_5(model, shift, HINGE, **FAST)
        tau = r.rhs_terms["tau"]
        assert r.rhs_terms["beta"] == pytest.approx(math.sqrt(2) * tau / (1 - tau), rel=1e-12)
        assert r.verdict != "violated"

    def test_point_masses_have_zero_s(self):
        model = signed_axis_model(4)
        r = audit_theorem_4_5(model, ShiftProfile.zero(range(4), 2), HINGE, **FAST)
        assert r.rhs_terms["s_value"] == 0.0

    def test_zero_shift_has_zero_bias(self):
        model, _ = harness_instance(5)
        r = audit_theorem_4_1(model, ShiftProfile.zero(range(model.n_classes), model.dim), HINGE, **FAST)
        assert r.rhs_terms["bias_actual"] == 0.0 and r.rhs_terms["bias_sup"] == 0.0

    def test_B_1_at_one_negative_matches_4_5(self):
        model, shift = harness_instance(6, uniform=True)
        enc = LinearEncoder.identity(model.dim)
        opts = dict(FAST, draws=100_000, encoder=enc)
        b = audit_theorem_B_1(model, shift, HINGE, 1, **opts)
        a = audit_theorem_4_5(model, shift, HINGE, **opts)
        tau = collision_prob(model.prior)
        assert b.rhs_terms["tau_1"] == tau and b.rhs_terms["tau_k"] == pytest.approx(tau, abs=1e-15)
        assert b.rhs_terms["alpha"] == pytest.approx(1.0, abs=1e-12)
        assert b.rhs_terms["s_coefficient"] == pytest.approx(a.rhs_terms["beta"], rel=1e-12)
        assert b.rhs_terms["gen_bound"] == a.rhs_terms["gen_bound"]
        assert abs(b.lhs.estimate - a.lhs.estimate) <= 4 * math.hypot(b.lhs.std_error, a.lhs.std_error)

    def test_B_1_two_negatives(self):
        model, shift = harness_instance(7, n_classes=4, uniform=True)
        r = audit_theorem_B_1(model, shift, HINGE, 2, **FAST)
        assert r.theorem == "TB.1"
        assert r.rhs_terms["tau_k"] > r.rhs_terms["tau_1"] > r.rhs_terms["tau_0"]
        assert r.verdict != "violated"

    def test_deterministic(self):
        model, shift = harness_instance(8)
        one = audit_theorem_4_5(model, shift, LOGISTIC, seed=3, **FAST).to_json()
        two = audit_theorem_4_5(model, shift, LOGISTIC, seed=3, **FAST).to_json()
        assert one == two


class TestJensen:
    @pytest.mark.parametrize("index", range(3))
    def test_chain_holds(self, index):
        model, shift = harness_instance(index)
        check = jensen_chain(model, None, HINGE, shift, 50_000, index)
        assert check.holds

    def test_harness_shape(self):
        for i in range(10):
            model, shift = harness_instance(i)
            assert 2 <= model.n_classes <= 5 and 2 <= model.dim <= 8
            assert 0 <= shift.epsilon <= 0.3
            assert all(np.linalg.norm(v) <= shift.epsilon + 1e-12 for v in shift.deltas.values())
