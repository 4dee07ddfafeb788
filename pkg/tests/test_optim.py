import numpy as np
import pytest

from coseg3d import autodiff as ad
from coseg3d.optim import Adam, AdamState, adam_step


def make_param(values):
    return ad.parameter(np.array(values, dtype=np.float64))


class TestAdamStep:
    def test_missing_gradient_rejected(self):
        p = make_param([1.0, 2.0])
        with pytest.raises(ValueError):
            adam_step(p, AdamState.for_param(p))

    def test_zero_gradient_leaves_params(self):
        p = make_param([1.0, -2.0, 3.0])
        state = AdamState.for_param(p)
        before = p.data.copy()
        for _ in range(5):
            p.grad = np.zeros(3)
            adam_step(p, state)
        np.testing.assert_array_equal(p.data, before)
        assert np.all(state.first_moment == 0.0) and np.all(state.second_moment == 0.0)
        assert state.step_count == 5

    def test_first_step_hand_formula(self):
        # From zeroed state: m_hat = g, v_hat = g^2, so
        # delta = -lr * g / (|g| + eps), per the bias-corrected update.
        g = np.array([0.3, -1.2, 0.0007])
        p = make_param([0.0, 0.0, 0.0])
        state = AdamState.for_param(p, learning_rate=0.01, epsilon=1e-8)
        p.grad = g.copy()
        adam_step(p, state)
        expected = -0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        assert state.step_count == 1
        assert p.grad is None  # cleared afterward

    def test_constant_gradient_limit_is_lr_sign(self):
        g = np.array([0.02, -5.0])
        p = make_param([0.0, 0.0])
        state = AdamState.for_param(p, learning_rate=1e-3)
        prev = p.data.copy()
        for _ in range(400):
            p.grad = g.copy()
            adam_step(p, state)
            delta = p.data - prev
            prev = p.data.copy()
        np.testing.assert_allclose(delta, -1e-3 * np.sign(g), rtol=1e-3)

    def test_state_validation(self):
        p = make_param([1.0, 2.0])
        bad = AdamState(np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            p.grad = np.zeros(2)
            adam_step(p, bad)
        with pytest.raises(ValueError):
            AdamState(np.zeros(2), np.zeros(2), beta1=1.0).validate(p)
        with pytest.raises(ValueError):
            AdamState(np.zeros(2), np.zeros(2), epsilon=0.0).validate(p)

    def test_moments_decay_toward_zero_after_gradient_stops(self):
        p = make_param([1.0])
        state = AdamState.for_param(p)
        p.grad = np.array([2.0])
        adam_step(p, state)
        m0 = abs(state.first_moment[0])
        for _ in range(50):
            p.grad = np.array([0.0])
            adam_step(p, state)
        assert abs(state.first_moment[0]) < 1e-2 * m0


class TestAdamWrapper:
    def test_descends_a_quadratic(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=(3, 2))
        p = ad.parameter(np.zeros((3, 2)))
        opt = Adam([p], learning_rate=0.05)
        for _ in range(300):
            diff = ad.sub(p, ad.constant(target))
            loss = ad.reduce_sum(ad.mul(diff, diff))
            loss.backward()
            opt.step()
        np.testing.assert_allclose(p.data, target, atol=1e-2)

    def test_step_skips_gradless_params(self):
        p, q = make_param([1.0]), make_param([2.0])
        opt = Adam([p, q], learning_rate=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert q.data[0] == 2.0 and p.data[0] != 1.0
