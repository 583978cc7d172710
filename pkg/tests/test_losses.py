import math

import numpy as np
import pytest

from kdcalib.calibrate import CalibrationOutcome, calibrate_loca
from kdcalib.losses import LossConfig, ce_loss, combined_loss, kd_loss, loss_for_batch
from kdcalib.probvec import softmax


def finite_difference_grad(teacher_p, z, gt, cfg, h=1e-5):
    """Central-difference gradient of the total loss, independent of the
    analytic path."""
    g = np.zeros_like(z)
    for i in range(len(z)):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (combined_loss(teacher_p, zp, gt, cfg).total
                - combined_loss(teacher_p, zm, gt, cfg).total) / (2 * h)
    return g


class TestKdLoss:
    def test_self_divergence_is_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.dirichlet(np.ones(rng.integers(2, 10)))
            assert abs(kd_loss(p, p)) < 1e-12

    def test_hand_value(self):
        # 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln(4/3)
        assert kd_loss([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(4 / 3), abs=1e-12)

    def test_near_degenerate_is_finite(self):
        assert math.isfinite(kd_loss([1.0, 0.0], [0.5, 0.5]))
        assert math.isfinite(kd_loss([0.5, 0.5], [1.0, 0.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kd_loss([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            c = rng.integers(2, 20)
            assert kd_loss(rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c))) >= -1e-12


class TestCeLoss:
    def test_confident_correct_is_zero(self):
        assert ce_loss([1.0, 0.0], 0) == pytest.approx(0.0, abs=1e-12)

    def test_hand_values(self):
        assert ce_loss([0.25, 0.75], 1) == pytest.approx(-math.log(0.75), abs=1e-12)
        assert ce_loss([0.25, 0.75], 0) == pytest.approx(-math.log(0.25), abs=1e-12)

    def test_out_of_range_gt(self):
        with pytest.raises(ValueError):
            ce_loss([0.25, 0.75], 2)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            c = int(rng.integers(2, 20))
            q = rng.dirichlet(np.ones(c))
            assert ce_loss(q, int(rng.integers(c))) >= -1e-12


class TestCombinedLoss:
    def test_weight_degeneracies(self):
        p = [0.3, 0.7]
        z = np.array([0.2, -0.4])
        kd_only = combined_loss(p, z, 0, LossConfig(tau=2, beta=1, gamma=0))
        assert kd_only.total == pytest.approx(kd_only.kd_term, rel=1e-12)
        ce_only = combined_loss(p, z, 0, LossConfig(tau=2, beta=0, gamma=1))
        assert ce_only.total == pytest.approx(ce_only.ce_term, rel=1e-12)

    def test_symmetric_inputs_zero_kd(self):
        # paper-style CIFAR weights: tau=4, beta=0.9, gamma=0.1
        lv = combined_loss([0.5, 0.5], [0.0, 0.0], 0, LossConfig(tau=4, beta=0.9, gamma=0.1))
        assert lv.kd_term == pytest.approx(0.0, abs=1e-12)
        assert lv.ce_term == pytest.approx(math.log(2), abs=1e-12)
        assert lv.total == pytest.approx(0.1 * math.log(2), abs=1e-12)

    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            c = int(rng.integers(2, 15))
            cfg = LossConfig(tau=float(rng.uniform(0.5, 5)), beta=float(rng.uniform(0, 2)),
                             gamma=float(rng.uniform(0.1, 2)))
            lv = combined_loss(rng.dirichlet(np.ones(c)), rng.normal(size=c), int(rng.integers(c)), cfg)
            expected = cfg.beta * lv.kd_term + cfg.gamma * lv.ce_term
            assert lv.total == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            c = int(rng.integers(2, 20))
            cfg = LossConfig(
                tau=float(rng.choice([1.0, 2.0, 4.0])),
                beta=float(rng.uniform(0, 1)),
                gamma=float(rng.uniform(0.05, 1)),
                scale_kd_by_tau_squared=bool(rng.integers(2)),
            )
            p = rng.dirichlet(np.ones(c))
            z = rng.normal(size=c)
            gt = int(rng.integers(c))
            analytic = combined_loss(p, z, gt, cfg).grad_student_logits
            numeric = finite_difference_grad(p, z, gt, cfg)
            err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-7)
            assert err.max() < 1e-4

    def test_kd_gradient_sums_to_zero(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = int(rng.integers(2, 30))
            cfg = LossConfig(tau=2.0, beta=1.0, gamma=0.0)
            lv = combined_loss(rng.dirichlet(np.ones(c)), rng.normal(size=c), 0, cfg)
            assert abs(lv.grad_student_logits.sum()) < 1e-9

    def test_calibration_shifts_gt_gradient_down(self):
        # raising the teacher's target mass lowers the gt gradient coordinate,
        # i.e. the loss pushes the student harder toward gt
        rng = np.random.default_rng(6)
        cfg = LossConfig(tau=2.0, beta=1.0, gamma=0.0)
        for _ in range(50):
            c = int(rng.integers(3, 15))
            p = rng.dirichlet(np.ones(c))
            k = int(np.argmax(p))
            gt = (k + 1) % c
            z = rng.normal(size=c)
            p_cal = calibrate_loca(p, gt, 0.95).calibrated
            assert p_cal[gt] > p[gt]
            g_before = combined_loss(p, z, gt, cfg).grad_student_logits
            g_after = combined_loss(p_cal, z, gt, cfg).grad_student_logits
            assert g_after[gt] < g_before[gt]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            combined_loss([0.5, 0.5], [0.0, 0.0, 0.0], 0, LossConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(tau=0.0)
        with pytest.raises(ValueError):
            LossConfig(beta=0.0, gamma=0.0)
        with pytest.raises(ValueError):
            LossConfig(beta=-1.0)


class TestLossForBatch:
    def outcome(self, p, dropped=False):
        p = np.asarray(p, dtype=np.float64)
        return CalibrationOutcome(p, False, 1.0, 0.95, dropped)

    def test_single_sample_equals_combined(self):
        cfg = LossConfig(tau=2, beta=0.8, gamma=0.2)
        p, z, gt = [0.3, 0.7], np.array([0.5, -0.5]), 1
        batch = loss_for_batch([(self.outcome(p), z, gt)], cfg)
        single = combined_loss(p, z, gt, cfg)
        assert batch.total == pytest.approx(single.total, rel=1e-12)
        np.testing.assert_allclose(batch.grad_student_logits, single.grad_student_logits, atol=1e-15)

    def test_mean_idempotence(self):
        cfg = LossConfig(tau=2, beta=0.8, gamma=0.2)
        sample = (self.outcome([0.3, 0.7]), np.array([0.5, -0.5]), 1)
        one = loss_for_batch([sample], cfg)
        two = loss_for_batch([sample, sample], cfg)
        assert two.total == pytest.approx(one.total, rel=1e-12)

    def test_dropped_sample_contributes_ce_only(self):
        cfg = LossConfig(tau=2, beta=0.7, gamma=0.3)
        a = (self.outcome([0.3, 0.7]), np.array([0.5, -0.5]), 1)
        b = (self.outcome([0.6, 0.4], dropped=True), np.array([-0.2, 0.9]), 0)
        batch = loss_for_batch([a, b], cfg)
        # manual sum: full loss for a, CE-only for b
        la = combined_loss([0.3, 0.7], np.array([0.5, -0.5]), 1, cfg)
        lb_ce = ce_loss(softmax(np.array([-0.2, 0.9]), 1.0), 0)
        expected = (la.total + cfg.gamma * lb_ce) / 2
        assert batch.total == pytest.approx(expected, rel=1e-12)
        assert batch.kd_term == pytest.approx(la.kd_term / 2, rel=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_for_batch([], LossConfig())
