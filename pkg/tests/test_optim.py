"""AdamW: decoupled decay, bias correction, exact first step, replay determinism."""

import numpy as np

from faim.optim import AdamWState, adamw_step
from faim.tensor import parameter


def _params(values):
    return [parameter(np.array(v, dtype=np.float64)) for v in values]


class TestAdamWStep:
    def test_zero_gradient_zero_decay_is_identity(self):
        params = _params([[1.0, -2.0], [0.5, 0.25]])
        before = [p.data.copy() for p in params]
        grads = [np.zeros_like(p.data) for p in params]
        state = AdamWState(lr=1e-3, weight_decay=0.0)
        adamw_step(params, grads, state)
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p.data, b)

    def test_none_gradient_skips_param_decay_included(self):
        params = _params([[1.0, 2.0], [3.0, 4.0]])
        before1 = params[1].data.copy()
        state = AdamWState(lr=0.1, weight_decay=0.5)
        adamw_step(params, [np.ones((2,)), None], state)
        np.testing.assert_array_equal(params[1].data, before1)
        assert not np.array_equal(params[0].data, [1.0, 2.0])

    def test_decay_only_scales_by_one_minus_lr_wd(self):
        params = _params([[2.0, -4.0]])
        state = AdamWState(lr=0.1, weight_decay=0.5)
        adamw_step(params, [np.zeros(2)], state)
        # zero grad: update term vanishes, decay p *= (1 - 0.1 * 0.5)
        np.testing.assert_allclose(params[0].data, np.array([2.0, -4.0]) * 0.95, rtol=0, atol=1e-15)

    def test_first_step_matches_hand_computation(self):
        # DERIVED: single scalar p=1.0, g=0.5, lr=0.01, betas (0.9, 0.999),
        # eps=1e-8, wd=0.1 worked by direct evaluation of the update rule:
        #   p <- p * (1 - lr*wd) = 1.0 * 0.999 = 0.999
        #   m = 0.1 * 0.5 = 0.05        m_hat = 0.05 / (1 - 0.9) = 0.5
        #   v = 0.001 * 0.25 = 0.00025  v_hat = 0.00025 / (1 - 0.999) = 0.25
        #   p <- 0.999 - 0.01 * 0.5 / (sqrt(0.25) + 1e-8)
        params = _params([1.0])
        state = AdamWState(lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1)
        adamw_step(params, [np.array(0.5)], state)
        expected = 0.999 - 0.01 * 0.5 / (np.sqrt(0.25) + 1e-8)
        np.testing.assert_allclose(params[0].data, expected, rtol=0, atol=1e-15)
        assert state.step_count == 1

    def test_two_steps_track_reference_loop(self):
        # independent reference: plain numpy re-implementation of the same rule
        rng = np.random.default_rng(7)
        p0 = rng.normal(size=(3,))
        g1, g2 = rng.normal(size=(3,)), rng.normal(size=(3,))
        lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01

        ref = p0.copy()
        m = np.zeros(3)
        v = np.zeros(3)
        for t, g in enumerate((g1, g2), start=1):
            ref *= 1.0 - lr * wd
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            ref -= lr * m_hat / (np.sqrt(v_hat) + eps)

        params = _params([p0])
        state = AdamWState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        adamw_step(params, [g1], state)
        adamw_step(params, [g2], state)
        np.testing.assert_allclose(params[0].data, ref, rtol=0, atol=1e-15)

    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            params = _params([rng.normal(size=(4, 2))])
            state = AdamWState(lr=1e-3, weight_decay=1e-4)
            for _ in range(5):
                adamw_step(params, [rng.normal(size=(4, 2))], state)
            return params[0].data

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()

    def test_state_reused_across_parameters_of_different_shapes(self):
        params = [parameter(np.ones((2, 2))), parameter(np.ones(3))]
        grads = [np.full((2, 2), 0.1), np.full(3, -0.2)]
        state = AdamWState(lr=0.01)
        adamw_step(params, grads, state)
        assert state.m[0].shape == (2, 2) and state.m[1].shape == (3,)
        assert np.all(params[0].data < 1.0) and np.all(params[1].data > 1.0)

    def test_lr_zero_is_identity_even_with_decay(self):
        params = _params([[5.0]])
        state = AdamWState(lr=0.0, weight_decay=0.7)
        adamw_step(params, [np.array([1.0])], state)
        np.testing.assert_array_equal(params[0].data, [5.0])
