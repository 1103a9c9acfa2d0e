"""Tensor core: op semantics, tape mechanics, gradient correctness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_matmul
from nextlvt.errors import ContractError, NumericError, ShapeError
from nextlvt.gradcheck import check_gradients
from nextlvt.tensor import (
    Tape,
    Tensor,
    exp,
    gelu,
    log_softmax,
    matmul,
    relu,
    softmax,
    tmean,
    tsum,
)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(eye, b).numpy(), b.numpy())

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(matmul(a, b).numpy(),
                              [[19.0, 22.0], [43.0, 50.0]])

    def test_annihilating_product(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[0.0, 0.0], [0.0, 1.0]])
        assert np.array_equal(matmul(a, b).numpy(), np.zeros((2, 2)))

    def test_matches_triple_loop(self, rng):
        a = rng.uniform(-1, 1, (4, 6))
        b = rng.uniform(-1, 1, (6, 3))
        got = matmul(Tensor(a), Tensor(b)).numpy()
        np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_broadcast(self, rng):
        a = rng.uniform(-1, 1, (3, 2, 4))
        b = rng.uniform(-1, 1, (4, 5))
        got = matmul(Tensor(a), Tensor(b)).numpy()
        np.testing.assert_allclose(got, a @ b, atol=0)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4),
           st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_associativity(self, m, k, n, p, seed):
        r = np.random.default_rng(seed)
        a, b, c = (r.uniform(-1, 1, s) for s in ((m, k), (k, n), (n, p)))
        left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).numpy()
        right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).numpy()
        np.testing.assert_allclose(left, right, atol=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).numpy(),
                                   [0.5, 0.5], atol=0)

    def test_max_subtraction_prevents_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0, 1000.0])).numpy()
        np.testing.assert_allclose(out, np.full(3, 1 / 3), atol=1e-15)

    def test_closed_form(self):
        out = softmax(Tensor([0.0, np.log(3.0)])).numpy()
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=16),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_slices_sum_to_one(self, values, seed):
        r = np.random.default_rng(seed)
        x = np.array(values)[None, :] + r.uniform(-1, 1, (3, len(values)))
        out = softmax(Tensor(x), axis=-1).numpy()
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(3), atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.uniform(-5, 5, (2, 7))
        np.testing.assert_allclose(log_softmax(Tensor(x)).numpy(),
                                   np.log(softmax(Tensor(x)).numpy()),
                                   atol=1e-12)


class TestBackward:
    def test_square_sum_gradient(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(x * x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0], atol=0)

    def test_softmax_sum_gradient_is_zero(self):
        x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(softmax(x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, np.zeros(3), atol=1e-12)

    def test_matmul_sum_matches_finite_differences(self, rng):
        a = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        err = check_gradients(lambda: tsum(matmul(a, b)), [a, b], h=1e-5)
        assert err < 1e-6

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ContractError, match="scalar"):
            tape.backward(y)

    def test_second_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(x * x)
        tape.backward(loss)
        with pytest.raises(ContractError, match="consumed"):
            tape.backward(loss)

    def test_gradient_accumulates_across_uses(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = tsum(x * x + x * 3.0)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [7.0], atol=0)

    def test_backward_convenience_on_tensor(self):
        x = Tensor([1.0, 4.0], requires_grad=True)
        with Tape():
            loss = tmean(x)
        loss.backward()
        np.testing.assert_allclose(x.grad, [0.5, 0.5], atol=0)

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * x
        assert y._tape is None and not y.requires_grad


class TestNumericGuard:
    def test_overflow_is_an_error(self):
        with pytest.raises(NumericError):
            exp(Tensor([1000.0]))

    def test_log_zero_is_an_error(self):
        from nextlvt.tensor import log
        with pytest.raises(NumericError):
            log(Tensor([0.0]))

    def test_finite_ops_pass(self):
        out = exp(Tensor([0.0, 1.0]))
        assert np.all(np.isfinite(out.numpy()))


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0])).numpy()
        np.testing.assert_allclose(out, [0.0, 0.0, 2.0], atol=0)

    def test_gelu_fixed_points(self):
        # gelu(0) = 0 and gelu(x) -> x for large x
        out = gelu(Tensor([0.0, 10.0])).numpy()
        np.testing.assert_allclose(out, [0.0, 10.0], atol=1e-12)

    def test_gelu_gradcheck(self, rng):
        x = Tensor(rng.uniform(0.2, 1.0, (4,)), requires_grad=True)
        err = check_gradients(lambda: tsum(gelu(x)), [x], h=1e-6)
        assert err < 1e-6


class TestDtypes:
    def test_float32_preserved(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        y = x * 2.0
        assert y.dtype == np.float32

    def test_default_is_float64(self):
        assert Tensor([1, 2, 3]).dtype == np.float64
