from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sncpd import diffcore as dc
from sncpd.errors import ContractError, DimensionError

from oracles import numeric_grad, rel_error

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(fn, x: np.ndarray) -> np.ndarray:
    t = dc.Tensor(x.copy(), requires_grad=True)
    dc.backward(fn(t), [t])
    return t.grad


def check_grad(fn, x: np.ndarray, tol: float = 1e-6) -> float:
    analytic = grad_of(fn, x)
    numeric = numeric_grad(lambda a: fn(dc.Tensor(a)).item(), x)
    err = rel_error(analytic, numeric)
    assert err < tol, err
    return err


class TestMatmul:
    def test_identity(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(dc.matmul(np.eye(2), A).data, A)

    def test_projector(self):
        out = dc.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0], [0.0]])

    def test_gradient_both_sides(self):
        rng = np.random.default_rng(0)
        A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        check_grad(lambda a: dc.matmul(a, B).sum(), A)
        check_grad(lambda b: dc.matmul(A, b).sum(), B)

    def test_batched(self):
        rng = np.random.default_rng(1)
        A, B = rng.standard_normal((5, 3, 4)), rng.standard_normal((5, 4, 2))
        np.testing.assert_allclose(dc.matmul(A, B).data, A @ B)
        check_grad(lambda a: (dc.matmul(a, B) ** 2).sum(), A)

    def test_linear_gradient_is_outer_structure(self):
        x = np.array([[1.0], [-2.0], [0.5]])
        W = dc.Tensor(np.ones((2, 3)), requires_grad=True)
        dc.backward(dc.matmul(W, x).sum(), [W])
        np.testing.assert_array_equal(W.grad, np.tile(x.T, (2, 1)))

    def test_unused_parameter_gets_zero_gradient(self):
        a = dc.Tensor(np.ones(3), requires_grad=True)
        b = dc.Tensor(np.ones(3), requires_grad=True)
        dc.backward((a * 2.0).sum(), [a, b])
        np.testing.assert_array_equal(b.grad, np.zeros(3))


class TestConv1d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 7, 3))
        k = np.eye(3)[:, :, None]
        np.testing.assert_array_equal(dc.conv1d(x, k).data, x)

    def test_moving_average_hand_evaluation(self):
        # width 2, dilation 1: one zero padded on the left, none on the right
        x = np.array([0.0, 0.0, 2.0, 0.0, 0.0]).reshape(1, 5, 1)
        k = np.array([[[0.5, 0.5]]])
        assert dc.same_padding(2, 1) == (1, 0)
        np.testing.assert_allclose(dc.conv1d(x, k).data.ravel(), [0.0, 0.0, 1.0, 1.0, 0.0])

    def test_dilated_matches_loop(self):
        rng = np.random.default_rng(2)
        x, k, b = rng.standard_normal((2, 9, 3)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
        d = 2
        left, _ = dc.same_padding(3, d)
        ref = np.zeros((2, 9, 4))
        for t in range(9):
            for j in range(3):
                s = t - left + j * d
                if 0 <= s < 9:
                    ref[:, t] += x[:, s] @ k[:, :, j].T
        np.testing.assert_allclose(dc.conv1d(x, k, d, b).data, ref + b, atol=1e-12)

    @pytest.mark.parametrize("dilation", [1, 2, 4])
    def test_gradients(self, dilation):
        rng = np.random.default_rng(dilation)
        x, k = rng.standard_normal((2, 6, 2)), rng.standard_normal((3, 2, 3))
        check_grad(lambda a: (dc.conv1d(a, k, dilation) ** 2).sum(), x)
        check_grad(lambda w: dc.tanh(dc.conv1d(x, w, dilation)).sum(), k)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            dc.conv1d(np.zeros((4, 2)), np.zeros((1, 2, 3)))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (1, 6, 2), elements=finite))
    def test_identity_kernel_property(self, x):
        np.testing.assert_array_equal(dc.conv1d(x, np.eye(2)[:, :, None]).data, x)


class TestElementwise:
    def test_trivial_values(self):
        assert dc.sigmoid(0.0).item() == 0.5
        np.testing.assert_allclose(dc.l2_normalize(np.array([3.0, 4.0])).data, [0.6, 0.8])
        np.testing.assert_array_equal(dc.max_pool_time(np.array([[1.0], [5.0], [2.0], [4.0]])).data.ravel(), [5, 4])

    def test_max_pool_truncates_remainder(self):
        x = np.arange(5.0).reshape(1, 5, 1)
        assert dc.max_pool_time(x).shape == (1, 2, 1)

    def test_zero_vector_normalize_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            out = dc.l2_normalize(np.zeros((1, 3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))
        assert caplog.records

    @pytest.mark.parametrize("fn", [dc.exp, dc.tanh, dc.sigmoid, lambda a: dc.log(a * a + 1.0),
                                    lambda a: dc.sqrt(a * a + 1.0), lambda a: a / (a * a + 2.0),
                                    lambda a: dc.power(a * a + 1.0, 1.5)])
    def test_unary_gradients(self, fn):
        x = np.random.default_rng(3).standard_normal((3, 4))
        check_grad(lambda a: fn(a).sum(), x, 1e-5)

    def test_reductions_and_shapes(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((3, 2, 4))
        check_grad(lambda a: (dc.logsumexp(a, axis=-1) * 1.5).sum(), x)
        check_grad(lambda a: (dc.transpose(a, (1, 0, 2)) * w).sum(), x)
        check_grad(lambda a: dc.tmean(dc.reshape(a, (6, 4)) ** 2, axis=0).sum(), x)
        check_grad(lambda a: (dc.concat([a, a * 2.0], axis=1) ** 2).sum(), x)
        check_grad(lambda a: (dc.index(a, (slice(None), 1)) ** 3).sum(), x)
        check_grad(lambda a: (dc.max_pool_time(a) ** 2).sum(), x + np.arange(24).reshape(2, 3, 4) * 1e-3)
        check_grad(lambda a: (dc.l2_normalize(a) * w.transpose(1, 0, 2)).sum(), x)

    def test_composite_sigmoid_matmul(self):
        rng = np.random.default_rng(5)
        W, x = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        check_grad(lambda a: dc.sigmoid(dc.matmul(a, x)).sum(), W, 1e-5)

    def test_logsumexp_handles_neg_inf(self):
        x = np.array([[0.0, -np.inf, 1.0]])
        np.testing.assert_allclose(dc.logsumexp(x).data, np.log(1 + np.e))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=finite))
    def test_relu_gradient_property(self, x):
        x = x + 0.01 * np.sign(x) + (x == 0) * 0.1   # keep away from the kink
        check_grad(lambda a: (dc.relu(a) * 3.0).sum(), x)


class TestDropout:
    def test_inference_is_identity(self):
        x = np.ones((3, 4))
        np.testing.assert_array_equal(dc.dropout(x, 0.5, training=False).data, x)

    def test_seeded_and_inverted_scaling(self):
        x = np.ones((200, 50))
        a = dc.dropout(x, 0.2, True, np.random.default_rng(9)).data
        b = dc.dropout(x, 0.2, True, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) <= {0.0, 1.25}
        assert abs(a.mean() - 1.0) < 0.02

    def test_rate_validation(self):
        with pytest.raises(ContractError):
            dc.dropout(np.ones(2), 1.0, True, np.random.default_rng(0))


class TestOptimizers:
    def test_sgd(self):
        w = np.array([1.0])
        dc.sgd_step([w], [2 * w], 0.1)
        np.testing.assert_allclose(w, [0.8])
        w2 = np.array([3.0, -1.0])
        dc.sgd_step([w2], [np.ones(2)], 0.0)
        np.testing.assert_array_equal(w2, [3.0, -1.0])

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e4])
    def test_adam_first_step_is_lr(self, scale):
        w = np.array([0.5, -2.0])
        dc.adam_step([w], [np.array([scale, -scale])], dc.AdamState(), lr=0.01)
        # eps = 1e-8 in the denominator costs a relative 1e-8 / |g|
        np.testing.assert_allclose(np.abs(w - [0.5, -2.0]), 0.01, rtol=1e-4)

    def test_adam_minimizes_quadratic(self):
        w = dc.Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = dc.Adam([w], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            dc.backward((w * w).sum(), [w])
            opt.step()
        assert np.abs(w.data).max() < 0.05
