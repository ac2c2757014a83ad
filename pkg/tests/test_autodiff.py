import math

import numpy as np
import pytest

from csanet import autodiff as ad
from csanet import tensor_ops as T
from csanet.tensor_ops import ShapeMismatchError


def fd_check(fn, point, tol, h=1e-5):
    report = ad.finite_diff_gradcheck(fn, point, h=h)
    assert report.max_rel_error < tol, report
    return report


class TestConv2d:
    def test_ones_input_scalar_kernel(self):
        x = ad.Node(np.ones((1, 3, 3)))
        k = ad.Node(np.full((1, 1, 1, 1), 2.0))
        out = ad.conv2d(x, k, stride=1, pad=0)
        assert np.array_equal(out.value, np.full((1, 3, 3), 2.0))

    def test_delta_kernel_identity(self, rng):
        x = rng.normal(size=(1, 6, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(ad.Node(x), ad.Node(k), stride=1, pad=1)
        assert np.abs(out.value - x).max() < 1e-15

    def test_stride_and_padding_shapes(self, rng):
        out = ad.conv2d(ad.Node(rng.normal(size=(2, 16, 16))),
                        ad.Node(rng.normal(size=(5, 2, 3, 3))), stride=2, pad=1)
        assert out.value.shape == (5, 8, 8)

    def test_gradients_match_finite_differences(self, rng):
        x0 = rng.normal(size=(2, 5, 5))
        k0 = rng.normal(size=(3, 2, 3, 3)) * 0.5
        probe = ad.Node(rng.normal(size=(3, 5, 5)))

        def loss(nodes):
            return ad.nsum(ad.conv2d(nodes[0], nodes[1], stride=1, pad=1) * probe)

        fd_check(loss, [x0, k0], 1e-6)

    def test_strided_gradients(self, rng):
        x0 = rng.normal(size=(1, 6, 6))
        k0 = rng.normal(size=(2, 1, 3, 3))
        probe = ad.Node(rng.normal(size=(2, 3, 3)))

        def loss(nodes):
            return ad.nsum(ad.conv2d(nodes[0], nodes[1], stride=2, pad=1) * probe)

        fd_check(loss, [x0, k0], 1e-6)

    def test_shape_errors_name_dimensions(self):
        with pytest.raises(ShapeMismatchError, match="channels"):
            ad.conv2d(ad.Node(np.ones((2, 4, 4))), ad.Node(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeMismatchError, match="exceeds"):
            ad.conv2d(ad.Node(np.ones((1, 2, 2))), ad.Node(np.ones((1, 1, 5, 5))))


class TestLinear:
    def test_identity(self, rng):
        v = rng.normal(size=4)
        out = ad.linear(ad.Node(v), ad.Node(np.eye(4)), ad.Node(np.zeros(4)))
        assert np.array_equal(out.value, v)

    def test_hand_arithmetic(self):
        out = ad.linear(ad.Node(np.array([2.0, 5.0])),
                        ad.Node(np.array([[1.0, 1.0]])), ad.Node(np.array([3.0])))
        assert np.array_equal(out.value, np.array([10.0]))

    def test_gradients(self, rng):
        probe = ad.Node(rng.normal(size=3))

        def loss(nodes):
            return ad.nsum(ad.linear(nodes[0], nodes[1], nodes[2]) * probe)

        fd_check(loss, [rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)], 1e-8)

    def test_shape_error(self):
        with pytest.raises(ShapeMismatchError):
            ad.linear(ad.Node(np.ones(3)), ad.Node(np.ones((2, 4))), ad.Node(np.ones(2)))


class TestActivations:
    def test_relu_values(self):
        out = ad.relu(ad.Node(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.value, np.array([0.0, 0.0, 2.0]))

    def test_relu_subgradient_at_zero_is_zero(self):
        x = ad.Node(np.array([0.0]), requires_grad=True)
        ad.backward(ad.nsum(ad.relu(x)))
        assert x.grad[0] == 0.0

    def test_sigmoid_half_at_zero(self):
        assert ad.sigmoid(ad.Node(np.zeros(1))).value[0] == 0.5

    def test_sigmoid_extreme_negative_no_overflow(self):
        with np.errstate(over="raise"):
            out = ad.sigmoid(ad.Node(np.array([-800.0])))
        assert out.value[0] == 0.0

    def test_sigmoid_extreme_positive(self):
        with np.errstate(over="raise"):
            out = ad.sigmoid(ad.Node(np.array([800.0])))
        assert out.value[0] == 1.0

    def test_sigmoid_matches_high_precision_form(self, rng):
        x = rng.normal(size=20) * 10
        out = ad.sigmoid(ad.Node(x)).value
        for xi, oi in zip(x, out):
            expected = 1.0 / (1.0 + math.exp(-float(xi)))
            assert abs(oi - expected) < 1e-15

    def test_sigmoid_gradients(self, rng):
        def loss(nodes):
            return ad.nsum(ad.sigmoid(nodes[0]) * ad.Node(np.arange(1.0, 7.0)))

        fd_check(loss, [rng.normal(size=6)], 1e-6)


class TestGlobalAvgPool:
    def test_constant_channel(self):
        out = ad.global_avg_pool(ad.Node(np.full((1, 3, 3), 7.0)))
        assert out.value[0] == 7.0

    def test_hand_arithmetic(self):
        out = ad.global_avg_pool(ad.Node(np.array([[[0.0, 1.0], [2.0, 3.0]]])))
        assert out.value[0] == 1.5

    def test_gradients(self, rng):
        probe = ad.Node(rng.normal(size=3))

        def loss(nodes):
            return ad.nsum(ad.global_avg_pool(nodes[0]) * probe)

        fd_check(loss, [rng.normal(size=(3, 4, 4))], 1e-8)


class TestSoftmaxCrossEntropy:
    def test_uniform_case(self):
        loss = ad.softmax_cross_entropy(ad.Node(np.zeros(2)), 0)
        assert float(loss.value) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_stability_case(self):
        with np.errstate(over="raise"):
            loss = ad.softmax_cross_entropy(ad.Node(np.array([1000.0, 0.0])), 0)
        assert float(loss.value) == pytest.approx(0.0, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(ad.Node(np.zeros(3)), 3)

    def test_backward_is_softmax_minus_onehot(self, rng):
        logits = ad.Node(rng.normal(size=5), requires_grad=True)
        ad.backward(ad.softmax_cross_entropy(logits, 2))
        shifted = logits.value - logits.value.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        expected = probs.copy()
        expected[2] -= 1.0
        assert np.abs(logits.grad - expected).max() < 1e-12

    def test_gradients(self, rng):
        def loss(nodes):
            return ad.softmax_cross_entropy(nodes[0], 1)

        fd_check(loss, [rng.normal(size=6)], 1e-8)


class TestElementwiseGraph:
    def test_mixed_expression_gradients(self, rng):
        const = ad.Node(rng.normal(size=(3, 4)))

        def loss(nodes):
            a = nodes[0]
            b = ad.exp(a * ad.Node(0.3)) + const
            c = ad.sqrt(b * b, guard=1e-20)
            return ad.nmean(c / (ad.nsum(c) + 1.0))

        fd_check(loss, [rng.normal(size=(3, 4))], 1e-6)

    def test_broadcast_scalar_over_matrix(self, rng):
        def loss(nodes):
            scalar, mat = nodes[0], nodes[1]
            return ad.nsum(mat / (ad.nsum(scalar * scalar) + 2.0))

        fd_check(loss, [rng.normal(size=()), rng.normal(size=(2, 3))], 1e-6)

    def test_reshape_roundtrip_gradients(self, rng):
        probe = ad.Node(rng.normal(size=(6,)))

        def loss(nodes):
            return ad.nsum(ad.reshape(nodes[0], (6,)) * probe)

        fd_check(loss, [rng.normal(size=(2, 3))], 1e-8)

    def test_matmul_matches_tensor_ops(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert np.array_equal(ad.matmul(ad.Node(a), ad.Node(b)).value, T.matmul(a, b))

    def test_matmul_gradients(self, rng):
        probe = ad.Node(rng.normal(size=(3, 2)))

        def loss(nodes):
            return ad.nsum(ad.matmul(nodes[0], nodes[1]) * probe)

        fd_check(loss, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], 1e-6)

    def test_scale_channels_ones_identity(self, rng):
        f = rng.normal(size=(3, 2, 2))
        out = ad.scale_channels(ad.Node(f), ad.Node(np.ones(3)))
        assert np.array_equal(out.value, f)

    def test_scale_channels_gradients(self, rng):
        probe = ad.Node(rng.normal(size=(3, 2, 2)))

        def loss(nodes):
            return ad.nsum(ad.scale_channels(nodes[0], nodes[1]) * probe)

        fd_check(loss, [rng.normal(size=(3, 2, 2)), rng.normal(size=3)], 1e-6)

    def test_pairwise_sq_dist_matches_tensor_ops(self, rng):
        rows = rng.normal(size=(5, 7))
        out = ad.pairwise_sq_dist(ad.Node(rows))
        assert np.array_equal(out.value, T.pairwise_sq_dist(rows))

    def test_detach_blocks_gradient(self, rng):
        x = ad.Node(rng.normal(size=4), requires_grad=True)
        y = ad.detach(ad.exp(x))
        loss = ad.nsum(y * x)
        ad.backward(loss)
        assert np.abs(x.grad - y.value).max() < 1e-15  # only the direct use of x


class TestBackwardMechanics:
    def test_scalar_root_required(self):
        x = ad.Node(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(x + x)

    def test_shared_subgraph_accumulates_once_per_use(self):
        x = ad.Node(np.array([3.0]), requires_grad=True)
        y = x * x  # two uses of the same parent
        ad.backward(ad.nsum(y))
        assert x.grad[0] == pytest.approx(6.0, abs=1e-15)

    def test_two_backwards_with_zeroing_are_identical(self, rng):
        x = ad.Node(rng.normal(size=(3, 3)), requires_grad=True)

        def run():
            ad.zero_grad([x])
            ad.backward(ad.nmean(ad.exp(x) * ad.Node(2.0)))
            return x.grad.copy()

        assert np.array_equal(run(), run())

    def test_grad_shape_matches_value_shape(self, rng):
        x = ad.Node(rng.normal(size=(2, 5)), requires_grad=True)
        assert x.grad.shape == x.value.shape
        ad.backward(ad.nsum(x * x))
        assert x.grad.shape == x.value.shape

    def test_no_grad_skips_graph(self, rng):
        x = ad.Node(rng.normal(size=3), requires_grad=True)
        with ad.no_grad():
            y = ad.relu(x)
        assert not y.requires_grad
        assert y._parents == ()


class TestSgdStep:
    def test_vanilla_step(self):
        p = np.array([1.0])
        state = ad.OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0, nesterov=False)
        ad.sgd_step([p], [np.array([1.0])], state)
        assert p[0] == pytest.approx(0.9, abs=1e-15)

    def test_nesterov_two_steps_hand_simulation(self):
        # scalar oracle: buf <- 0.9*buf + 1; update = 1 + 0.9*buf
        # step 1: buf=1, update=1.9, param=1-0.19=0.81
        # step 2: buf=1.9, update=2.71, param=0.81-0.271=0.539
        p = np.array([1.0])
        state = ad.OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0, nesterov=True)
        ad.sgd_step([p], [np.array([1.0])], state)
        assert p[0] == pytest.approx(0.81, abs=1e-15)
        ad.sgd_step([p], [np.array([1.0])], state)
        assert p[0] == pytest.approx(0.539, abs=1e-15)

    def test_weight_decay_only(self):
        p = np.array([10.0])
        state = ad.OptimizerState(lr=1.0, momentum=0.0, weight_decay=1e-4, nesterov=False)
        ad.sgd_step([p], [np.array([0.0])], state)
        assert p[0] == pytest.approx(9.999, abs=1e-15)

    def test_reduces_to_plain_sgd(self, rng):
        p = rng.normal(size=(3, 2))
        g = rng.normal(size=(3, 2))
        expected = p - 0.05 * g
        state = ad.OptimizerState(lr=0.05, momentum=0.0, weight_decay=0.0, nesterov=False)
        ad.sgd_step([p], [g], state)
        assert np.array_equal(p, expected)

    def test_buffer_shapes_enforced(self):
        state = ad.OptimizerState(lr=0.1)
        with pytest.raises(ShapeMismatchError):
            ad.sgd_step([np.ones(3)], [np.ones(4)], state)

    def test_negative_lr_rejected(self):
        with pytest.raises(ValueError):
            ad.OptimizerState(lr=-0.1)


class TestFiniteDiffGradcheck:
    def test_quadratic(self, rng):
        def loss(nodes):
            return ad.nsum(nodes[0] * nodes[0])

        report = ad.finite_diff_gradcheck(loss, [rng.normal(size=6)])
        assert report.max_rel_error < 1e-9
        assert report.n_checked == 6
        assert not report.excluded

    def test_relu_kink_excluded_not_failed(self):
        def loss(nodes):
            return ad.nsum(ad.relu(nodes[0]))

        point = np.array([0.0, 1.0, -1.0])
        report = ad.finite_diff_gradcheck(loss, [point])
        assert (0, 0) in report.excluded
        assert report.max_rel_error < 1e-9

    def test_non_finite_value_raises(self):
        def loss(nodes):
            return ad.nsum(ad.exp(nodes[0] * ad.Node(1e6)))

        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            ad.finite_diff_gradcheck(loss, [np.array([1.0])])
