"""
Tests for the autodiff engine: forward semantics against loop oracles,
tape gradients against central differences, and error contracts.
"""
import numpy as np
import pytest

from errors import ContractError, DimensionError
from oracles import conv1d_oracle, conv2d_oracle
from tensor import (
    DiffArray, Tape, add, as_array, constant, conv1d_causal, conv2d, elementwise, exp, flip, grad_check,
    linear, matmul, mul, parameter, precision, reduce_mean, reduce_sum, reshape, sigmoid, silu, slice_axis,
    softplus, transpose,
)


def weighted_sum(out, weights):
    return reduce_sum(mul(out, weights))


# ============================================================================
# DIFFARRAY AND TAPE
# ============================================================================

class TestDiffArray:

    def test_defaults_to_float32(self):
        x = DiffArray([1, 2, 3])
        assert x.data.dtype == np.float32
        assert x.shape == (3,)
        assert x.grad is None

    def test_precision_switch(self):
        with precision(np.float64):
            x = DiffArray([1.0])
        assert x.data.dtype == np.float64
        assert DiffArray([1.0]).data.dtype == np.float32

    def test_recorded_outputs_are_read_only(self):
        x = parameter([1.0, 2.0])
        with Tape():
            y = exp(x)
        with pytest.raises(ValueError):
            y.data[0] = 5.0

    def test_no_tape_records_nothing(self):
        x = parameter([1.0, 2.0])
        y = mul(x, 3.0)
        assert y.requires_grad
        with Tape() as tape:
            mul(constant([1.0]), 2.0)
        assert len(tape) == 0

    def test_backward_needs_scalar(self):
        x = parameter([1.0, 2.0])
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_gradients_accumulate_across_uses(self):
        x = parameter([3.0])
        with Tape() as tape:
            y = add(mul(x, x), x)
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_operators(self):
        x = DiffArray([1.0, 2.0])
        np.testing.assert_array_equal((x + 1).data, [2.0, 3.0])
        np.testing.assert_array_equal((1 - x).data, [0.0, -1.0])
        np.testing.assert_array_equal((2 * x).data, [2.0, 4.0])
        np.testing.assert_array_equal((-x).data, [-1.0, -2.0])


# ============================================================================
# FORWARD SEMANTICS
# ============================================================================

class TestMatmul:

    def test_identity(self):
        out = matmul(DiffArray(np.eye(2)), DiffArray([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = matmul(DiffArray([[1, 0], [0, 0]]), DiffArray([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_matches_triple_loop(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += float(a[i, k]) * float(b[k, j])
        np.testing.assert_allclose(matmul(DiffArray(a), DiffArray(b)).data, expected, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((2, 3))))

    def test_backward_rules(self, rng):
        a = parameter(rng.standard_normal((3, 4)))
        b = parameter(rng.standard_normal((4, 2)))
        g = rng.standard_normal((3, 2)).astype(np.float32)
        with Tape() as tape:
            loss = weighted_sum(matmul(a, b), g)
        tape.backward(loss)
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5, atol=1e-6)

    def test_linear_batches_leading_axes(self, rng):
        x = rng.standard_normal((2, 5, 4)).astype(np.float32)
        w = rng.standard_normal((4, 3)).astype(np.float32)
        bias = rng.standard_normal(3).astype(np.float32)
        out = linear(DiffArray(x), DiffArray(w), DiffArray(bias))
        np.testing.assert_allclose(out.data, x @ w + bias, rtol=1e-5, atol=1e-5)


class TestConv2d:

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 4, 5)).astype(np.float32)
        out = conv2d(DiffArray(x), DiffArray(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_box_sum(self):
        out = conv2d(DiffArray(np.ones((1, 1, 5, 5))), DiffArray(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))

    @pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2), (2, 1, 4)])
    def test_matches_sliding_window(self, rng, stride, padding, groups):
        x = rng.standard_normal((2, 4, 7, 6)).astype(np.float32)
        k = rng.standard_normal((4, 4 // groups, 3, 3)).astype(np.float32)
        out = conv2d(DiffArray(x), DiffArray(k), stride=stride, padding=padding, groups=groups)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, k, stride, padding, groups), atol=1e-5)

    def test_output_size(self):
        out = conv2d(DiffArray(np.zeros((1, 2, 9, 8))), DiffArray(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 3, 5, 4)

    def test_groups_must_divide_channels(self):
        with pytest.raises(DimensionError):
            conv2d(DiffArray(np.zeros((1, 3, 4, 4))), DiffArray(np.zeros((2, 1, 1, 1))), groups=2)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            conv2d(DiffArray(np.zeros((1, 1, 2, 2))), DiffArray(np.zeros((1, 1, 5, 5))), padding=1)


class TestConv1dCausal:

    def test_width_one_identity(self, rng):
        x = rng.standard_normal((2, 3, 6)).astype(np.float32)
        out = conv1d_causal(DiffArray(x), DiffArray(np.ones((3, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_current_tap_identity(self, rng):
        x = rng.standard_normal((1, 3, 6)).astype(np.float32)
        k = np.tile([0.0, 1.0], (3, 1))
        np.testing.assert_array_equal(conv1d_causal(DiffArray(x), DiffArray(k)).data, x)

    def test_matches_loop(self, rng):
        x = rng.standard_normal((2, 3, 9)).astype(np.float32)
        k = rng.standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_allclose(conv1d_causal(DiffArray(x), DiffArray(k)).data, conv1d_oracle(x, k), atol=1e-6)

    def test_causality(self, rng):
        x = rng.standard_normal((1, 2, 10)).astype(np.float32)
        k = rng.standard_normal((2, 4)).astype(np.float32)
        base = conv1d_causal(DiffArray(x), DiffArray(k)).data
        perturbed = x.copy()
        perturbed[:, :, 6:] += 5.0
        changed = conv1d_causal(DiffArray(perturbed), DiffArray(k)).data
        np.testing.assert_allclose(base[:, :, :6], changed[:, :, :6], atol=1e-6)
        assert not np.allclose(base[:, :, 6:], changed[:, :, 6:])

    def test_empty_kernel(self):
        with pytest.raises(ContractError):
            conv1d_causal(DiffArray(np.zeros((1, 2, 4))), DiffArray(np.zeros((2, 0))))


class TestElementwise:

    def test_sigmoid_at_zero(self):
        assert sigmoid(DiffArray([0.0])).item() == 0.5

    def test_silu_at_zero(self):
        assert silu(DiffArray([0.0])).item() == 0.0

    def test_softplus_oracle(self):
        x = np.array([-10.0, 0.0, 10.0])
        expected = np.log1p(np.exp(x))
        np.testing.assert_allclose(softplus(DiffArray(x)).data, expected, rtol=1e-6, atol=1e-6)

    def test_sigmoid_saturates_without_overflow(self):
        out = sigmoid(DiffArray([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_dispatch_by_name(self):
        np.testing.assert_array_equal(elementwise("add", [1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
        np.testing.assert_array_equal(elementwise("mul", [1.0, 2.0], 3.0).data, [3.0, 6.0])
        assert elementwise("exp", [0.0]).item() == 1.0

    def test_unknown_function(self):
        with pytest.raises(ContractError):
            elementwise("tanh", [0.0])

    def test_wrong_arity(self):
        with pytest.raises(ContractError):
            elementwise("sigmoid", [0.0], [1.0])

    def test_size_one_broadcast(self):
        out = add(DiffArray(np.zeros((2, 3))), DiffArray([[1.0], [2.0]]))
        np.testing.assert_array_equal(out.data, [[1, 1, 1], [2, 2, 2]])

    def test_incompatible_broadcast(self):
        with pytest.raises(DimensionError):
            add(DiffArray(np.zeros((2, 3))), DiffArray(np.zeros(4)))


class TestReductions:

    def test_mean_of_two(self):
        assert reduce_mean(DiffArray([2.0, 4.0])).item() == 3.0

    def test_mean_over_singleton_axis(self, rng):
        x = rng.standard_normal((3, 1, 4)).astype(np.float32)
        np.testing.assert_array_equal(reduce_mean(DiffArray(x), axes=1).data, x[:, 0])

    def test_mean_two_pass_oracle(self, rng):
        x = rng.standard_normal((4, 5)).astype(np.float32)
        expected = np.array([sum(float(v) for v in row) / 5 for row in x])
        np.testing.assert_allclose(reduce_mean(DiffArray(x), axes=1).data, expected, atol=1e-6)

    def test_mean_over_empty_extent(self):
        with pytest.raises(DimensionError):
            reduce_mean(DiffArray(np.zeros((0, 3))), axes=0)

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            reduce_sum(DiffArray(np.zeros((2, 2))), axes=2)


# ============================================================================
# GRADIENT CHECKS
# ============================================================================

class TestGradCheck:

    def test_sum_is_exact(self, rng):
        x = rng.standard_normal(5)
        assert grad_check(lambda v: reduce_sum(v), x) < 1e-9

    def test_sum_of_squares(self):
        x = np.array([1.0, 2.0])
        point = parameter(x)
        with precision(np.float64):
            with Tape() as tape:
                loss = reduce_sum(mul(point, point))
            tape.backward(loss)
        np.testing.assert_allclose(point.grad, [2.0, 4.0])
        assert grad_check(lambda v: reduce_sum(mul(v, v)), x) < 1e-3

    def test_non_scalar_output(self):
        with pytest.raises(ContractError):
            grad_check(lambda v: mul(v, 2.0), np.ones(3))

    def test_non_positive_eps(self):
        with pytest.raises(ContractError):
            grad_check(lambda v: reduce_sum(v), np.ones(3), eps=0.0)

    def test_coordinate_subset(self, rng):
        x = rng.standard_normal(50)
        assert grad_check(lambda v: reduce_sum(exp(v)), x, max_coords=7) < 1e-3


class TestPrimitiveGradients:
    """Every primitive passes a central-difference check within 1e-3"""

    @pytest.mark.parametrize("op", [exp, sigmoid, silu, softplus])
    def test_unary(self, rng, op):
        x = rng.standard_normal((3, 4))
        r = rng.standard_normal((3, 4))
        assert grad_check(lambda v: weighted_sum(op(v), r), x) < 1e-3

    def test_broadcast_add_and_mul(self, rng):
        x = rng.standard_normal((3, 1))
        other = rng.standard_normal((3, 4))
        r = rng.standard_normal((3, 4))
        assert grad_check(lambda v: weighted_sum(add(mul(v, other), v), r), x) < 1e-3

    def test_matmul(self, rng):
        b = rng.standard_normal((4, 2))
        r = rng.standard_normal((3, 2))
        assert grad_check(lambda v: weighted_sum(matmul(v, as_array(b)), r), rng.standard_normal((3, 4))) < 1e-3

    def test_shape_ops(self, rng):
        r = rng.standard_normal((3, 2))

        def f(v):
            moved = transpose(reshape(v, (2, 3, 2)), (1, 0, 2))
            return weighted_sum(slice_axis(flip(moved, axis=0), 1, 0, 1), r.reshape(3, 1, 2))

        assert grad_check(f, rng.standard_normal(12)) < 1e-3

    def test_mean(self, rng):
        r = rng.standard_normal(3)
        assert grad_check(lambda v: weighted_sum(reduce_mean(v, axes=(1, 2)), r), rng.standard_normal((3, 2, 4))) < 1e-3

    @pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 2)])
    def test_conv2d_input_and_kernel(self, rng, stride, padding, groups):
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((2, 2 // groups, 3, 3))
        out_hw = (5 + 2 * padding - 3) // stride + 1
        r = rng.standard_normal((1, 2, out_hw, out_hw))
        assert grad_check(lambda v: weighted_sum(conv2d(v, as_array(k), stride, padding, groups), r), x) < 1e-3
        assert grad_check(lambda v: weighted_sum(conv2d(as_array(x), v, stride, padding, groups), r), k) < 1e-3

    def test_conv1d_causal(self, rng):
        x = rng.standard_normal((2, 3, 6))
        k = rng.standard_normal((3, 3))
        r = rng.standard_normal((2, 3, 6))
        assert grad_check(lambda v: weighted_sum(conv1d_causal(v, as_array(k)), r), x) < 1e-3
        assert grad_check(lambda v: weighted_sum(conv1d_causal(as_array(x), v), r), k) < 1e-3


# ============================================================================
# LINEARITY AND DETERMINISM
# ============================================================================

class TestTapeProperties:

    def test_gradient_linearity(self, rng):
        w = rng.standard_normal((4, 3)).astype(np.float32)
        x = rng.standard_normal((2, 4)).astype(np.float32)

        def loss_a(p):
            return reduce_sum(sigmoid(matmul(as_array(x), p)))

        def loss_b(p):
            return reduce_mean(mul(p, p))

        grads = []
        for loss_fn in (loss_a, loss_b, lambda p: add(loss_a(p), loss_b(p))):
            p = parameter(w)
            with Tape() as tape:
                loss = loss_fn(p)
            tape.backward(loss)
            grads.append(p.grad)
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=1e-6, atol=1e-7)

    def test_forward_is_bitwise_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        first = silu(conv2d(DiffArray(x), DiffArray(k), stride=2, padding=1)).data
        second = silu(conv2d(DiffArray(x), DiffArray(k), stride=2, padding=1)).data
        assert np.array_equal(first, second)
