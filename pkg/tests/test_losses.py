import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdnsq import tensor as T
from gdnsq.errors import DomainError, NumericError, ShapeError
from gdnsq.losses import (LossState, hard_label_loss, jeffreys, kl, potential,
                          potential_tensor, softmax, total_loss,
                          update_schedule)
from gdnsq.quantizer import FakeQuantizer
from gdnsq.tensor import Tensor


def make_fq(kind, lo, hi, bits, seed=0):
    fq = FakeQuantizer(kind, rng=np.random.default_rng(seed))
    fq.init_from_minmax(lo, hi, bits)
    return fq


class TestKl:
    def test_self_divergence_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_vs_uniform_is_log2(self):
        assert kl(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
            math.log(2.0), abs=1e-9)

    def test_frozen_value(self):
        # 0.9 ln(0.9/0.1) + 0.1 ln(0.1/0.9) = 0.8 ln 9
        got = kl(np.array([0.9, 0.1]), np.array([0.1, 0.9]))
        assert got == pytest.approx(0.8 * math.log(9.0), abs=1e-12)
        assert got == pytest.approx(1.7577796618689757, abs=1e-12)

    def test_support_mismatch(self):
        with pytest.raises(ShapeError):
            kl(np.array([1.0, 0.0]), np.array([0.3, 0.3, 0.4]))


class TestJeffreys:
    def test_zero_iff_equal(self):
        p = np.array([0.4, 0.6])
        assert jeffreys(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.dirichlet(np.ones(4))
            q = rng.dirichlet(np.ones(4))
            assert jeffreys(p, q) == pytest.approx(jeffreys(q, p), rel=1e-12)

    def test_frozen_value(self):
        got = jeffreys(np.array([0.9, 0.1]), np.array([0.1, 0.9]))
        assert got == pytest.approx(2 * 1.7577796618689757, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6),
       st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=6))
def test_jeffreys_dominates_each_kl(ws, vs):
    n = min(len(ws), len(vs))
    p = np.asarray(ws[:n]) / np.sum(ws[:n])
    q = np.asarray(vs[:n]) / np.sum(vs[:n])
    j = jeffreys(p, q)
    assert j >= max(kl(p, q), kl(q, p)) - 1e-12
    assert j >= -1e-12


class TestPotential:
    def test_zero_at_targets(self):
        assert potential([2.0, 2.0], [3.0], (2.0, 3.0)) == 0.0

    def test_single_active_hinge(self):
        # one weight site at 3 over target 2, activation at target
        assert potential([3.0], [4.0], (2.0, 4.0)) == pytest.approx(1.0)

    def test_under_target_zero_gradient(self):
        wq = make_fq("weight", -1.0, 1.0, 3.0)
        aq = make_fq("activation", 0.0, 1.0, 3.0, seed=1)
        p = potential_tensor([wq], [aq], (8.0, 8.0))
        assert float(p.data) == 0.0
        p.backward()
        assert float(wq.log_s.grad) == 0.0
        assert float(aq.log_s.grad) == 0.0
        T.reset_tape()

    def test_group_mean_gradient(self):
        # two weight sites above target: each hinge contributes 1/2
        wqs = [make_fq("weight", -1.0, 1.0, 6.0, seed=i) for i in range(2)]
        aq = make_fq("activation", 0.0, 1.0, 2.0, seed=9)
        p = potential_tensor(wqs, [aq], (4.0, 4.0))
        p.backward()
        for wq in wqs:
            ratio = (wq.bound_values()[1] - wq.bound_values()[0]) / wq.scale_value()
            domega = -(1.0 / math.log(2.0)) * ratio / (ratio + 1.0)
            assert float(wq.log_s.grad) == pytest.approx(0.5 * domega, rel=1e-10)
        T.reset_tape()

    def test_empty_group_rejected(self):
        with pytest.raises(DomainError):
            potential([], [1.0], (1.0, 1.0))


class TestTotalLoss:
    def _sites(self, wbits=3.0, abits=3.0):
        wq = make_fq("weight", -1.0, 1.0, wbits)
        aq = make_fq("activation", 0.0, 1.0, abits, seed=3)
        return [wq], [aq]

    def test_zero_when_feasible_and_matched(self):
        wfq, afq = self._sites()
        logits = np.array([[2.0, -1.0], [0.5, 0.5]])
        state = LossState(targets=(8.0, 8.0))
        state.t_q, state.c_r = 5.0, 2.0
        loss, info = total_loss(Tensor(logits), logits, wfq, afq, state)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)
        assert info["P"] == 0.0 and info["d"] == pytest.approx(0.0, abs=1e-12)
        T.reset_tape()

    def test_step_zero_is_pure_distillation(self):
        wfq, afq = self._sites(wbits=6.0, abits=6.0)
        state = LossState(targets=(2.0, 2.0))  # constraint active
        assert state.t_q == 0.0
        s_logits = np.array([[1.0, 0.0]])
        t_logits = np.array([[0.0, 1.0]])
        loss, info = total_loss(Tensor(s_logits), t_logits, wfq, afq, state)
        expected_d = jeffreys(softmax(s_logits)[0], softmax(t_logits)[0])
        assert float(loss.data) == pytest.approx(expected_d, rel=1e-12)
        T.reset_tape()

    def test_hand_built_two_class_single_site(self):
        wfq, afq = self._sites(wbits=3.0, abits=2.0)
        state = LossState(targets=(2.0, 2.0))
        state.t_q, state.c_r = 0.7, 1.3
        s_logits = np.array([[0.2, -0.4]])
        t_logits = np.array([[1.0, 0.3]])
        loss, _ = total_loss(Tensor(s_logits), t_logits, wfq, afq, state)
        d = jeffreys(softmax(s_logits)[0], softmax(t_logits)[0])
        hinge = max(0.0, wfq[0].bitwidth_value() - 2.0)
        assert float(loss.data) == pytest.approx(0.7 * 1.3 * hinge + d, rel=1e-10)
        T.reset_tape()

    def test_infinite_targets_reduce_to_distillation(self):
        wfq, afq = self._sites()
        state = LossState(targets=(1e9, 1e9))
        state.t_q, state.c_r = 123.0, 7.0
        s_logits = np.array([[0.3, 0.9], [2.0, -2.0]])
        t_logits = np.array([[0.1, 0.2], [0.5, 0.5]])
        loss, info = total_loss(Tensor(s_logits), t_logits, wfq, afq, state)
        assert float(loss.data) == pytest.approx(info["d"], rel=1e-12)
        T.reset_tape()

    def test_nan_logits_rejected_with_row(self):
        wfq, afq = self._sites()
        state = LossState(targets=(4.0, 4.0))
        bad = np.array([[0.1, 0.2], [np.nan, 0.3]])
        with pytest.raises(NumericError, match="row"):
            total_loss(Tensor(bad), np.zeros((2, 2)), wfq, afq, state)
        T.reset_tape()

    def test_gradient_reaches_quantizers_and_logits(self):
        wfq, afq = self._sites(wbits=6.0, abits=6.0)
        state = LossState(targets=(2.0, 2.0))
        state.t_q, state.c_r = 1.0, 1.0
        s = Tensor(np.array([[0.4, -0.2]]), requires_grad=True)
        loss, _ = total_loss(s, np.array([[1.0, -1.0]]), wfq, afq, state)
        loss.backward()
        assert s.grad is not None and np.any(s.grad != 0)
        assert wfq[0].log_s.grad is not None and float(wfq[0].log_s.grad) != 0.0
        T.reset_tape()


class TestSchedule:
    def test_first_step(self):
        state = LossState(targets=(4.0, 4.0))
        update_schedule(state, 0.01, batch_d=0.5)
        assert state.step_n == 1
        assert state.t_q == pytest.approx(0.01)

    def test_running_mean(self):
        state = LossState(targets=(4.0, 4.0))
        update_schedule(state, 0.01, 2.0)
        update_schedule(state, 0.01, 4.0)
        assert state.c_r == pytest.approx(3.0)
        assert state.c_r == pytest.approx(state.c_r_sum / state.step_n)

    def test_t_r_stays_one(self):
        state = LossState(targets=(4.0, 4.0))
        for i in range(50):
            update_schedule(state, 0.01 * 0.99 ** i, float(i))
            assert state.t_r == 1.0

    def test_neutral_c_r_before_first_batch(self):
        state = LossState(targets=(4.0, 4.0))
        assert state.c_r == 1.0 and state.step_n == 0

    def test_tq_init_offset(self):
        state = LossState(targets=(4.0, 4.0), tq_init=100.0)
        assert state.t_q == 100.0
        update_schedule(state, 0.01, 1.0)
        assert state.t_q == pytest.approx(100.01)


def test_hard_label_loss_matches_direct_formula():
    logits = np.array([[2.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 0])
    loss = hard_label_loss(Tensor(logits), labels)
    p = softmax(logits)
    expected = -np.mean(np.log([p[0, 0], p[1, 0]]))
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)
    T.reset_tape()
