import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from platelabel.errors import NonFiniteGrad, OutOfRange, ShapeMismatch
from platelabel.estimator import MultiLabelImageClassifier
from platelabel.optim import AdamState, ScheduleConfig, adam_step, learning_rate_at
from platelabel.tensor import Tensor

CFG = ScheduleConfig(total_iters=1000)


class TestSchedule:
    def test_warmup_halfway(self):
        assert abs(learning_rate_at(99, CFG) - 5.0e-4) < 1e-12

    def test_warmup_end(self):
        assert abs(learning_rate_at(199, CFG) - 1e-3) < 1e-12

    def test_final(self):
        assert abs(learning_rate_at(999, CFG) - 1e-6) < 1e-12

    def test_decay_midpoint(self):
        mid = ScheduleConfig(total_iters=1001)
        it = 200 + (1000 - 200) // 2
        assert abs(learning_rate_at(it, mid) - (1e-6 + 0.5 * (1e-3 - 1e-6))) < 1e-12

    def test_first_iteration(self):
        assert learning_rate_at(0, CFG) == pytest.approx(1e-3 / 200)

    def test_boundary_continuity(self):
        assert learning_rate_at(199, CFG) == pytest.approx(learning_rate_at(200, CFG), abs=1e-15)

    @given(st.integers(2, 500), st.integers(1, 400))
    def test_monotone_after_warmup(self, total, warmup):
        if warmup >= total:
            return
        cfg = ScheduleConfig(total_iters=total, warmup_iters=warmup)
        lrs = [learning_rate_at(i, cfg) for i in range(total)]
        assert all(a <= b + 1e-18 for a, b in zip(lrs[:warmup], lrs[1:warmup]))
        assert all(a >= b - 1e-18 for a, b in zip(lrs[warmup - 1 :], lrs[warmup:]))
        assert max(lrs) <= cfg.peak_lr + 1e-15

    @pytest.mark.parametrize("it", [-1, 1000])
    def test_out_of_range(self, it):
        with pytest.raises(OutOfRange):
            learning_rate_at(it, CFG)

    @pytest.mark.parametrize("kw", [dict(total_iters=100, warmup_iters=100), dict(total_iters=10, final_lr=2e-3)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            ScheduleConfig(**kw)

    def test_full_run_iteration_count(self):
        # batch 32 over 40 images -> 2 batches per epoch
        X = np.random.default_rng(0).uniform(0, 1, (40, 8, 8, 3)).astype(np.float32)
        Y = np.zeros((40, 3), np.int8)
        Y[:, 0] = 1
        clf = MultiLabelImageClassifier(stages=((2, 2),), epochs=3, augment=False).fit(X, Y)
        assert clf.total_iters_ == math.ceil(40 / 32) * 3
        assert clf.history_[-1]["iterations"] == clf.total_iters_
        assert clf.optimizer_.t == clf.total_iters_


class TestAdam:
    def test_first_step_closed_form(self):
        theta = {"w": Tensor(np.zeros(3))}
        adam_step(theta, {"w": np.full(3, 0.5)}, AdamState(), 1e-3)
        np.testing.assert_allclose(theta["w"].data, -1e-3 * 0.5 / (0.5 + 1e-8), rtol=0, atol=1e-18)
        assert theta["w"].data[0] == pytest.approx(-9.9999998e-4, abs=1e-15)

    @pytest.mark.parametrize("g", [1e-3, 0.5, 40.0])
    def test_first_step_is_scale_free(self, g):
        theta = {"w": Tensor(np.zeros(1))}
        adam_step(theta, {"w": np.array([g])}, AdamState(), 1e-3)
        assert abs(theta["w"].data[0]) == pytest.approx(1e-3, rel=1e-4)

    def test_zero_gradient(self):
        theta = {"w": Tensor(np.arange(3.0))}
        state = adam_step(theta, {"w": np.zeros(3)}, AdamState(), 1e-3)
        np.testing.assert_array_equal(theta["w"].data, np.arange(3.0))
        assert state.t == 1

    def test_descends_quadratic(self):
        target = np.array([1.0, -2.0, 0.5])
        theta = {"w": Tensor(np.zeros(3))}
        state = AdamState()
        for _ in range(2000):
            adam_step(theta, {"w": 2 * (theta["w"].data - target)}, state, 1e-2)
        np.testing.assert_allclose(theta["w"].data, target, atol=1e-3)
        assert state.t == 2000 and all(np.all(v >= 0) for v in state.v.values())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(2)}, AdamState(), 1e-3)

    def test_non_finite_gradient_leaves_params(self):
        theta = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))}
        with pytest.raises(NonFiniteGrad):
            adam_step(theta, {"a": np.ones(2), "b": np.array([np.nan, 0.0])}, AdamState(), 1e-3)
        assert not theta["a"].data.any()
