import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from platelabel.errors import NonBinaryTarget, NonFinite, ShapeMismatch
from platelabel.loss import AsymmetricLossConfig, batch_loss, per_label_loss
from platelabel.tensor import Tensor, backward, finite_difference_check

PLAIN = AsymmetricLossConfig(gamma_plus=0.0, gamma_minus=0.0)


def bce_oracle(z, y):
    """Summed binary cross-entropy per sample, averaged over the batch."""
    total = 0.0
    for zi, yi in zip(z, y):
        for zk, yk in zip(zi, yi):
            p = 1.0 / (1.0 + math.exp(-zk))
            total -= yk * math.log(p) + (1 - yk) * math.log(1 - p)
    return total / len(z)


def logit(p):
    return math.log(p / (1 - p))


class TestPerLabel:
    def test_positive_at_half(self):
        assert per_label_loss(0.0, 1) == pytest.approx(0.693147, abs=1e-6)

    def test_negative_at_half(self):
        assert per_label_loss(0.0, 0) == pytest.approx(0.021661, abs=1e-6)

    def test_confident_false_positive(self):
        # -0.9**5 * log(0.1) = 1.3596535
        assert per_label_loss(logit(0.9), 0) == pytest.approx(-(0.9**5) * math.log(0.1), abs=1e-9)
        assert per_label_loss(logit(0.9), 0) == pytest.approx(1.359653, abs=1e-6)

    def test_perfect_positive(self):
        assert per_label_loss(40.0, 1) == pytest.approx(0.0, abs=1e-15)

    def test_rejects_nan(self):
        with pytest.raises(NonFinite):
            per_label_loss(float("nan"), 1)

    def test_rejects_soft_target(self):
        with pytest.raises(NonBinaryTarget):
            per_label_loss(0.0, 0.5)

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            AsymmetricLossConfig(gamma_minus=-1)

    @pytest.mark.parametrize("p", [i / 10 for i in range(1, 10)])
    def test_asymmetric_ratio(self, p):
        z = logit(p)
        ratio = per_label_loss(z, 0) / per_label_loss(z, 0, PLAIN)
        assert ratio == pytest.approx(p**5, abs=1e-9)

    @given(st.floats(-30, 30), st.sampled_from([0, 1]))
    def test_nonnegative_and_finite(self, z, y):
        v = per_label_loss(z, y)
        assert math.isfinite(v) and v >= 0

    def test_monotonicity(self):
        zs = np.linspace(-15, 15, 301)
        pos = [per_label_loss(z, 1) for z in zs]
        neg = [per_label_loss(z, 0, PLAIN) for z in zs]
        assert all(a > b for a, b in zip(pos, pos[1:]))
        assert all(a < b for a, b in zip(neg, neg[1:]))


class TestBatch:
    def test_hand_example(self):
        out = batch_loss(Tensor([[0.0, 0.0]]), [[1, 0]])
        assert out.item() == pytest.approx(0.714808, abs=1e-6)

    def test_matches_per_label_sum(self, rng):
        z = rng.uniform(-5, 5, (4, 6))
        y = rng.integers(0, 2, (4, 6))
        expected = sum(per_label_loss(z[i, k], y[i, k]) for i in range(4) for k in range(6))
        assert batch_loss(Tensor(z), y).item() == pytest.approx(expected / 4, rel=1e-12)
        cfg = AsymmetricLossConfig(batch_reduction="sum")
        assert batch_loss(Tensor(z), y, cfg).item() == pytest.approx(expected, rel=1e-12)

    def test_perfect_predictions(self):
        assert batch_loss(Tensor(np.full((2, 3), 50.0)), np.ones((2, 3))).item() < 1e-20

    def test_bce_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            b, k = rng.integers(1, 9, size=2)
            z = rng.uniform(-8, 8, (b, k))
            y = rng.integers(0, 2, (b, k))
            assert abs(batch_loss(Tensor(z), y, PLAIN).item() - bce_oracle(z, y)) < 1e-6

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_plain_gradient_closed_form(self, rng, reduction):
        z = Tensor(rng.uniform(-4, 4, (5, 3)), requires_grad=True)
        y = rng.integers(0, 2, (5, 3))
        backward(batch_loss(z, y, AsymmetricLossConfig(0.0, 0.0, reduction)))
        expected = 1 / (1 + np.exp(-z.data)) - y
        if reduction == "mean":
            expected /= 5
        np.testing.assert_allclose(z.grad, expected, atol=1e-12)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = Tensor(rng.uniform(-2, 2, (3, 5)))
            y = rng.integers(0, 2, (3, 5))
            assert finite_difference_check(lambda t: batch_loss(t, y), z) < 1e-4

    @pytest.mark.parametrize("z", [-20.0, 20.0])
    @pytest.mark.parametrize("y", [0, 1])
    def test_gradient_at_large_logits(self, z, y):
        err = finite_difference_check(lambda t: batch_loss(t, [[y]]), Tensor([[z]]))
        assert err < 1e-4

    def test_finite_gradient_at_extremes(self):
        z = Tensor(np.array([[-30.0, 30.0, -30.0, 30.0]]), requires_grad=True)
        loss = batch_loss(z, [[0, 0, 1, 1]])
        backward(loss)
        assert np.isfinite(loss.item()) and np.all(np.isfinite(z.grad))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            batch_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_non_binary(self):
        with pytest.raises(NonBinaryTarget):
            batch_loss(Tensor(np.zeros((1, 2))), [[0, 2]])
