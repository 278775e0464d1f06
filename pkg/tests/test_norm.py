"""Normalization layers: statistics, EMA updates, sparsity penalty."""

import numpy as np
import pytest

from chanex.norm import NormState, norm_forward_eval, norm_forward_train, sparsity_penalty
from chanex.tensor import Tensor
from gradcheck import numerical_grad, assert_grads_close


def make_state(c, mode="batch", mask=None, eps=1e-5):
    return NormState.create(c, mode=mode, mask=mask, eps=eps)


class TestBatchNormTrain:
    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        s = make_state(3, eps=1e-12)
        y, _, _ = norm_forward_train(Tensor(x), s)
        np.testing.assert_allclose(y.data, x, atol=1e-5)

    def test_gamma_zero_outputs_beta_and_kills_input_grad(self):
        rng = np.random.default_rng(1)
        s = make_state(2)
        s.gamma.data[:] = 0.0
        s.beta.data[:] = [1.0, -2.0]
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        y, _, _ = norm_forward_train(x, s)
        np.testing.assert_allclose(y.data[:, 0], 1.0)
        np.testing.assert_allclose(y.data[:, 1], -2.0)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_two_value_channel(self):
        # values {1, 3}: mean 2, std 1 -> outputs {-1, +1}
        x = np.zeros((2, 1, 1, 1))
        x[0, 0, 0, 0], x[1, 0, 0, 0] = 1.0, 3.0
        s = make_state(1, eps=1e-14)
        y, mean, std = norm_forward_train(Tensor(x), s)
        np.testing.assert_allclose(y.data.reshape(-1), [-1.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(mean, [2.0])
        np.testing.assert_allclose(std, [1.0])

    def test_normalizes_to_beta_gamma_moments(self):
        rng = np.random.default_rng(2)
        s = make_state(3, eps=1e-12)
        s.gamma.data[:] = [0.5, 2.0, -1.5]
        s.beta.data[:] = [1.0, 0.0, -1.0]
        y, _, _ = norm_forward_train(Tensor(rng.normal(2.0, 3.0, size=(4, 3, 6, 6))), s)
        got_mean = y.data.mean(axis=(0, 2, 3))
        got_std = y.data.std(axis=(0, 2, 3))
        np.testing.assert_allclose(got_mean, s.beta.data, atol=1e-6)
        np.testing.assert_allclose(got_std, np.abs(s.gamma.data), atol=1e-6)

    def test_degenerate_batch_raises(self):
        s = make_state(2)
        with pytest.raises(ValueError):
            norm_forward_train(Tensor(np.zeros((1, 2, 1, 1))), s)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        s = make_state(2)
        s.gamma.data[:] = rng.normal(size=2)
        s.beta.data[:] = rng.normal(size=2)
        x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        coeff = rng.normal(size=(3, 2, 4, 4))

        def loss_fn():
            frozen = NormState.create(2, eps=s.eps)
            frozen.gamma.data[:] = s.gamma.data
            frozen.beta.data[:] = s.beta.data
            y, _, _ = norm_forward_train(Tensor(x.data), frozen)
            return float((y.data * coeff).sum())

        y, _, _ = norm_forward_train(x, s)
        (y * Tensor(coeff)).sum().backward()
        for p in (x, s.gamma, s.beta):
            assert_grads_close(p.grad, numerical_grad(loss_fn, p))


class TestInstanceNorm:
    def test_per_instance_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 5, 5))
        s = make_state(2, mode="instance", eps=1e-12)
        y, _, _ = norm_forward_train(Tensor(x), s)
        for n in range(3):
            for c in range(2):
                assert y.data[n, c].mean() == pytest.approx(0.0, abs=1e-10)
                assert y.data[n, c].std() == pytest.approx(1.0, abs=1e-6)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        s = make_state(2, mode="instance")
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        coeff = rng.normal(size=(2, 2, 3, 3))

        def loss_fn():
            frozen = NormState.create(2, mode="instance")
            frozen.gamma.data[:] = s.gamma.data
            frozen.beta.data[:] = s.beta.data
            y, _, _ = norm_forward_train(Tensor(x.data), frozen)
            return float((y.data * coeff).sum())

        y, _, _ = norm_forward_train(x, s)
        (y * Tensor(coeff)).sum().backward()
        for p in (x, s.gamma, s.beta):
            assert_grads_close(p.grad, numerical_grad(loss_fn, p))


class TestEval:
    def test_uses_running_stats(self):
        s = make_state(2)
        x = np.full((2, 2, 2, 2), 3.0)
        y = norm_forward_eval(Tensor(x), s)
        np.testing.assert_allclose(y.data, 3.0 / np.sqrt(1.0 + s.eps), rtol=1e-12)

    def test_ema_recurrence_oracle(self):
        rng = np.random.default_rng(6)
        s = make_state(2)
        old_mean, old_var = s.running_mean.copy(), s.running_var.copy()
        x = rng.normal(1.5, 2.0, size=(4, 2, 3, 3))
        _, batch_mean, batch_std = norm_forward_train(Tensor(x), s)
        np.testing.assert_allclose(s.running_mean, 0.9 * old_mean + 0.1 * batch_mean, atol=1e-12)
        np.testing.assert_allclose(s.running_var, 0.9 * old_var + 0.1 * batch_std**2, atol=1e-12)

    def test_eval_deterministic(self):
        rng = np.random.default_rng(7)
        s = make_state(3)
        norm_forward_train(Tensor(rng.normal(size=(4, 3, 4, 4))), s)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        y1 = norm_forward_eval(x, s)
        y2 = norm_forward_eval(x, s)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_eval_gradient_flows(self):
        rng = np.random.default_rng(8)
        s = make_state(2)
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        norm_forward_eval(x, s).sum().backward()
        expected = (s.gamma.data / np.sqrt(s.running_var + s.eps))[None, :, None, None]
        np.testing.assert_allclose(x.grad, np.broadcast_to(expected, x.shape) * np.ones_like(x.data))


class TestSparsityPenalty:
    def test_lambda_zero(self):
        s = make_state(3, mask=np.ones(3, dtype=bool))
        pen = sparsity_penalty([s], 0.0)
        assert pen.item() == 0.0
        pen.backward()
        assert s.gamma.grad is None or not s.gamma.grad.any()

    def test_paper_default_value(self):
        s = make_state(2, mask=np.ones(2, dtype=bool))
        s.gamma.data[:] = [0.5, -0.5]
        assert sparsity_penalty([s], 5e-3).item() == pytest.approx(5e-3, abs=1e-15)

    def test_half_mask_matches_direct_sum(self):
        rng = np.random.default_rng(9)
        mask = np.zeros(8, dtype=bool)
        mask[:4] = True
        s = make_state(8, mask=mask)
        s.gamma.data[:] = rng.normal(size=8)
        lam = 2.5e-3
        expected = lam * sum(abs(s.gamma.data[i]) for i in range(4))
        assert sparsity_penalty([s], lam).item() == pytest.approx(expected, abs=1e-12)

    def test_grad_zero_on_unmasked_and_sign_on_masked(self):
        mask = np.array([True, True, False, False])
        s = make_state(4, mask=mask)
        s.gamma.data[:] = [0.3, -0.7, 0.4, -0.1]
        sparsity_penalty([s], 1e-2).backward()
        np.testing.assert_array_equal(s.gamma.grad, [1e-2, -1e-2, 0.0, 0.0])

    def test_sign_zero_at_zero(self):
        s = make_state(2, mask=np.ones(2, dtype=bool))
        s.gamma.data[:] = [0.0, 1.0]
        sparsity_penalty([s], 1e-2).backward()
        np.testing.assert_array_equal(s.gamma.grad, [0.0, 1e-2])

    def test_sums_over_multiple_states(self):
        states = []
        for val in (0.5, 1.5):
            s = make_state(2, mask=np.ones(2, dtype=bool))
            s.gamma.data[:] = val
            states.append(s)
        assert sparsity_penalty(states, 1.0).item() == pytest.approx(2 * 0.5 + 2 * 1.5)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            sparsity_penalty([make_state(2)], -1.0)
