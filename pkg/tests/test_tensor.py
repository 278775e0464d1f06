"""Tensor core: forward oracles and gradient checks for every op."""

import math

import numpy as np
import pytest

from chanex import tensor as T
from chanex.tensor import (
    OptimState,
    Tensor,
    concat_channels,
    conv2d,
    linear,
    mae_loss,
    mse_loss,
    sgd_step,
    softmax_cross_entropy,
    upsample_nearest,
)
from gradcheck import numerical_grad, assert_grads_close


def conv2d_loop_oracle(x, w, b, stride=1, padding=0):
    """Direct six-nested-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[ni, ci, y * stride + ky, xx * stride + kx] * w[co, ci, ky, kx]
                    out[ni, co, y, xx] = acc + b[co]
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        out = conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = conv2d(x, Tensor(w), Tensor(np.zeros(3)), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=0)
        np.testing.assert_allclose(out.data, conv2d_loop_oracle(x, w, b), atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_strided_padded_matches_oracle(self, stride, padding):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, conv2d_loop_oracle(x, w, b, stride, padding), atol=1e-12)

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)), stride=2, padding=0)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        coeff = rng.normal(size=(2, 3, 3, 3))

        def loss_fn():
            out = conv2d(x, w, b, stride=2, padding=1)
            return float((out.data * coeff).sum())

        loss = (conv2d(x, w, b, stride=2, padding=1) * Tensor(coeff)).sum()
        loss.backward()
        for p in (x, w, b):
            assert_grads_close(p.grad, numerical_grad(loss_fn, p))


class TestRelu:
    def test_basic(self):
        out = Tensor(np.array([-1.0, 0.0, 2.0])).relu()
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_grad(self):
        x = Tensor(-np.ones((3, 4)), requires_grad=True)
        out = x.relu().sum()
        out.backward()
        np.testing.assert_array_equal(x.grad, np.zeros((3, 4)))

    def test_zero_input_passes_zero_grad(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        x.relu().sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(4)
        data = rng.normal(size=(4, 5))
        data[np.abs(data) < 0.1] += 0.2  # keep away from the kink
        x = Tensor(data, requires_grad=True)
        coeff = rng.normal(size=(4, 5))
        (x.relu() * Tensor(coeff)).sum().backward()
        fd = numerical_grad(lambda: float((np.maximum(x.data, 0.0) * coeff).sum()), x)
        assert_grads_close(x.grad, fd, rtol=1e-6)


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        out = linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_gives_bias(self):
        b = np.array([1.0, -2.0])
        out = linear(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 2))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                expected[i, j] = sum(x[i, k] * w[k, j] for k in range(4)) + b[j]
        out = linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        linear(x, w, b).sum().backward()
        for p in (x, w, b):
            fd = numerical_grad(lambda: float((x.data @ w.data + b.data).sum()), p)
            assert_grads_close(p.grad, fd)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4)))
        loss = softmax_cross_entropy(logits, np.array([0, 3]))
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        losses = []
        for margin in (5.0, 20.0, 100.0):
            logits = np.zeros((1, 3))
            logits[0, 1] = margin
            losses.append(softmax_cross_entropy(Tensor(logits), np.array([1])).item())
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(7)
        logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        targets = np.array([0, 2, 4, 1])
        softmax_cross_entropy(logits, targets).backward()
        e = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        onehot = np.eye(5)[targets]
        np.testing.assert_allclose(logits.grad, (probs - onehot) / 4, atol=1e-12)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(8)
        logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        targets = np.array([1, 0, 3])
        softmax_cross_entropy(logits, targets).backward()

        def loss_fn():
            shifted = logits.data - logits.data.max(axis=1, keepdims=True)
            lse = np.log(np.exp(shifted).sum(axis=1))
            return float(np.mean(lse - shifted[np.arange(3), targets]))

        assert_grads_close(logits.grad, numerical_grad(loss_fn, logits), rtol=1e-6)


class TestRegressionLosses:
    def test_equal_is_zero(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert mse_loss(x, Tensor(x.data.copy())).item() == 0.0
        assert mae_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_unit_offset(self):
        p = Tensor(np.zeros((2, 3)))
        t = Tensor(-np.ones((2, 3)))
        assert mse_loss(p, t).item() == pytest.approx(1.0)
        assert mae_loss(p, t).item() == pytest.approx(1.0)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(9)
        p, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        mse = sum((p.reshape(-1)[i] - t.reshape(-1)[i]) ** 2 for i in range(12)) / 12
        mae = sum(abs(p.reshape(-1)[i] - t.reshape(-1)[i]) for i in range(12)) / 12
        assert mse_loss(Tensor(p), Tensor(t)).item() == pytest.approx(mse, abs=1e-12)
        assert mae_loss(Tensor(p), Tensor(t)).item() == pytest.approx(mae, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_mae_sign_zero_at_ties(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        mae_loss(p, Tensor(np.array([1.0, 0.0]))).backward()
        np.testing.assert_array_equal(p.grad, [0.0, 0.5])

    def test_gradients(self):
        rng = np.random.default_rng(10)
        p = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        t = rng.normal(size=(2, 3))
        mse_loss(p, Tensor(t)).backward()
        fd = numerical_grad(lambda: float(np.mean((p.data - t) ** 2)), p)
        assert_grads_close(p.grad, fd)


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        p.sum().backward()
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_independent_param_gets_no_grad(self):
        p = Tensor(np.ones(3), requires_grad=True)
        q = Tensor(np.ones(3), requires_grad=True)
        q.sum().backward()
        assert p.grad is None or not p.grad.any()

    def test_non_scalar_raises(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(11)
        data = rng.normal(size=(3, 3))

        def grad_of(fn):
            p = Tensor(data.copy(), requires_grad=True)
            fn(p).backward()
            return p.grad

        g1 = grad_of(lambda p: (p * p).sum())
        g2 = grad_of(lambda p: p.relu().sum())
        g12 = grad_of(lambda p: (p * p).sum() + p.relu().sum())
        np.testing.assert_allclose(g12, g1 + g2, atol=1e-12)

    def test_reused_node_accumulates(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        y = p * 3.0
        (y + y).sum().backward()
        np.testing.assert_allclose(p.grad, [6.0])


class TestStructuralOps:
    def test_concat_and_split_grads(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        out = concat_channels([a, b])
        assert out.shape == (2, 5, 4, 4)
        coeff = rng.normal(size=(2, 5, 4, 4))
        (out * Tensor(coeff)).sum().backward()
        np.testing.assert_allclose(a.grad, coeff[:, :3])
        np.testing.assert_allclose(b.grad, coeff[:, 3:])

    def test_upsample_nearest(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        out = upsample_nearest(x, 2)
        expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=float)
        np.testing.assert_array_equal(out.data[0, 0], expected)
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, 4 * np.ones((1, 1, 2, 2)))

    def test_reshape_transpose_roundtrip_grads(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        y = x.transpose((1, 0, 2)).reshape(3, 8)
        coeff = rng.normal(size=(3, 8))
        (y * Tensor(coeff)).sum().backward()
        np.testing.assert_allclose(x.grad, coeff.reshape(3, 2, 4).transpose(1, 0, 2))

    def test_softmax_simplex_and_grad(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=5), requires_grad=True)
        s = x.softmax()
        assert s.data.sum() == pytest.approx(1.0, abs=1e-12)
        coeff = rng.normal(size=5)
        (s * Tensor(coeff)).sum().backward()

        def loss_fn():
            e = np.exp(x.data - x.data.max())
            return float(((e / e.sum()) * coeff).sum())

        assert_grads_close(x.grad, numerical_grad(loss_fn, x))


class TestSgd:
    def test_single_step_no_momentum(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        sgd_step([p], OptimState(lr=0.1, momentum=0.0, weight_decay=0.0))
        np.testing.assert_allclose(p.data, [0.9])

    def test_zero_grad_no_change(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        p.grad = np.array([0.0])
        sgd_step([p], OptimState(lr=0.1, momentum=0.5, weight_decay=0.0))
        np.testing.assert_allclose(p.data, [3.0])

    def test_momentum_matches_recurrence_oracle(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = OptimState(lr=0.1, momentum=0.9, weight_decay=0.01)
        grads = [0.5, -0.2]
        # scalar recurrence oracle
        x, v = 1.0, 0.0
        for g in grads:
            v = 0.9 * v + g + 0.01 * x
            x = x - 0.1 * v
        for g in grads:
            p.grad = np.array([g])
            sgd_step([p], state)
        np.testing.assert_allclose(p.data, [x], atol=1e-12)

    def test_missing_gradient_raises(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            sgd_step([p], OptimState(lr=0.1))


class TestDebugChecks:
    def test_nan_detection(self):
        T.set_debug_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                Tensor(np.array([-1.0])).log()
        finally:
            T.set_debug_checks(False)
