"""Forward oracles and gradient checks for the differentiable operator set."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tritrack import ndops
from tritrack.ndops import (
    Tensor,
    add,
    bilinear_sample,
    concat,
    conv2d,
    div,
    exp,
    global_avg_pool,
    global_max_pool,
    linear,
    matmul,
    maximum,
    mean_all,
    minimum,
    mul,
    parameter,
    pow_const,
    reduce_max,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    stack_max,
    stack_mean,
    sub,
    sum_all,
    take,
    tanh,
    transpose,
)
from tritrack.verify import gradcheck, naive_conv2d


def t(arr, grad=True):
    x = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)
    return x


class TestConv2d:
    def test_identity_1x1_kernel(self, rng):
        x = Tensor(rng.standard_normal((3, 6, 7)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        b = Tensor(np.zeros(3))
        y = conv2d(x, w, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_weights_constant_bias(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 5)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        b = Tensor(np.array([1.0, -2.0, 0.5, 3.0]))
        y = conv2d(x, w, b, pad=1)
        for k, bk in enumerate(b.data):
            np.testing.assert_array_equal(y.data[k], np.full((5, 5), bk))

    def test_matches_naive_direct_convolution(self, rng):
        for _ in range(5):
            x = rng.standard_normal((3, 8, 8))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
                got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
                want = naive_conv2d(x, w, b, stride, pad)
                assert np.abs(got - want).max() <= 1e-12 * max(1.0, np.abs(want).max())

    def test_same_padding_preserves_dims(self, rng):
        for k in (1, 3, 5):
            x = Tensor(rng.standard_normal((2, 9, 11)))
            w = Tensor(rng.standard_normal((2, 2, k, k)))
            y = conv2d(x, w, None, stride=1, pad=k // 2)
            assert y.shape == x.shape

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 4)))
        w = Tensor(rng.standard_normal((2, 4, 3, 3)))
        with pytest.raises(ndops.ShapeError):
            conv2d(x, w, None, pad=1)

    def test_kernel_too_large_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 2)))
        w = Tensor(rng.standard_normal((1, 1, 5, 5)))
        with pytest.raises(ndops.ShapeError):
            conv2d(x, w, None)


class TestBilinearSample:
    def test_on_grid_integer_coordinates(self, rng):
        fm = Tensor(rng.standard_normal((4, 5, 6)))
        for py in range(5):
            for px in range(6):
                v = bilinear_sample(fm, float(px), float(py))
                np.testing.assert_array_equal(v.data, fm.data[:, py, px])

    def test_constant_map_interior(self, rng):
        fm = Tensor(np.full((2, 4, 4), 7.25))
        v = bilinear_sample(fm, 1.3, 2.6)
        np.testing.assert_allclose(v.data, 7.25, rtol=0, atol=1e-15)

    def test_midpoint_between_two_values(self):
        fm = np.zeros((1, 3, 4))
        fm[0, 1, 1] = 2.0
        fm[0, 1, 2] = 4.0
        v = bilinear_sample(Tensor(fm), 1.5, 1.0)
        assert v.data[0] == pytest.approx(3.0, abs=1e-15)

    def test_far_outside_is_zero(self, rng):
        fm = Tensor(rng.standard_normal((3, 4, 4)))
        np.testing.assert_array_equal(bilinear_sample(fm, -5.0, 1.0).data, 0.0)
        np.testing.assert_array_equal(bilinear_sample(fm, 1.0, 10.0).data, 0.0)

    def test_edge_fades_to_zero_padding(self):
        fm = Tensor(np.ones((1, 3, 3)))
        v = bilinear_sample(fm, -0.5, 1.0)
        assert v.data[0] == pytest.approx(0.5)


class TestActivations:
    def test_relu_values(self):
        y = relu(Tensor(np.array([-1.0, 2.0, 0.0])))
        np.testing.assert_array_equal(y.data, [0.0, 2.0, 0.0])

    def test_softmax_uniform(self):
        for n in (2, 5, 9):
            y = softmax(Tensor(np.full(n, 3.7)), axis=0)
            np.testing.assert_allclose(y.data, 1.0 / n, rtol=0, atol=1e-15)

    def test_softmax_sums_to_one(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 3)))
        y = softmax(x, axis=0)
        np.testing.assert_allclose(y.data.sum(axis=0), 1.0, atol=1e-12)

    def test_sigmoid_extremes_stable(self):
        y = sigmoid(Tensor(np.array([-800.0, 0.0, 800.0])))
        assert np.all(np.isfinite(y.data))
        np.testing.assert_allclose(y.data, [0.0, 0.5, 1.0], atol=1e-12)

    def test_global_pools(self, rng):
        x = rng.standard_normal((3, 4, 5))
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, x.mean(axis=(1, 2)))
        np.testing.assert_allclose(global_max_pool(Tensor(x)).data, x.max(axis=(1, 2)))


class TestDeterminism:
    def test_forward_twice_bit_identical(self, rng):
        x = rng.standard_normal((3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)

        def run():
            h = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
            h = relu(h)
            h = softmax(h, axis=0)
            return sum_all(mul(h, h)).data.copy()

        a, b2 = run(), run()
        assert a.tobytes() == b2.tobytes()

    def test_no_grad_builds_no_graph(self, rng):
        x = parameter(rng.standard_normal((2, 3, 3)))
        with ndops.no_grad():
            y = relu(x)
        assert y._backward is None and not y.requires_grad


# Gradient checks: every operator against central finite differences on
# multiple seeds, per the max(1e-3 rel, 1e-6 abs) tolerance.

SEEDS = list(range(20))


def _check(build, shapes, seed, shift=0.0):
    rng = np.random.default_rng(seed)
    tensors = [
        Tensor(rng.standard_normal(s) + shift, requires_grad=True) for s in shapes
    ]
    gradcheck(build, tensors, rng)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_binary(seed):
    _check(lambda a, b: sum_all(mul(add(a, b), sub(a, b))), [(3, 4), (3, 4)], seed)
    _check(lambda a, b: sum_all(div(a, b)), [(3, 4), (3, 4)], seed, shift=3.0)
    _check(lambda a, b: sum_all(minimum(a, b)), [(5,), (5,)], seed)
    _check(lambda a, b: sum_all(maximum(a, b)), [(5,), (5,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_broadcast(seed):
    _check(lambda a, b: sum_all(mul(a, b)), [(3, 4, 4), (3, 1, 1)], seed)
    _check(lambda a, b: sum_all(add(a, b)), [(3, 4, 4), (1, 4, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_unary(seed):
    _check(lambda a: sum_all(relu(a)), [(4, 4)], seed, shift=0.3)
    _check(lambda a: sum_all(sigmoid(a)), [(4, 4)], seed)
    _check(lambda a: sum_all(tanh(a)), [(4, 4)], seed)
    _check(lambda a: sum_all(exp(a)), [(4, 4)], seed)
    _check(lambda a: sum_all(softplus(a)), [(4, 4)], seed)
    _check(lambda a: sum_all(pow_const(a, 2.0)), [(4, 4)], seed, shift=2.0)
    _check(lambda a: sum_all(pow_const(a, 0.5)), [(4,)], seed, shift=4.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_reductions(seed):
    _check(lambda a: sum_all(mul(softmax(a, axis=0), softmax(a, axis=0))), [(4, 5)], seed)
    _check(lambda a: mean_all(mul(a, a)), [(3, 4)], seed)
    _check(lambda a: sum_all(global_avg_pool(a)), [(3, 4, 4)], seed)
    _check(lambda a: sum_all(global_max_pool(a)), [(3, 4, 4)], seed)
    _check(lambda a: sum_all(reduce_max(a, axis=0, keepdims=True)), [(4, 5)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_shape_ops(seed):
    _check(lambda a: sum_all(mul(reshape(a, (2, 8)), 3.0)), [(4, 4)], seed)
    _check(
        lambda a: sum_all(pow_const(transpose(a, (1, 0, 2)), 2.0)), [(2, 3, 4)], seed
    )
    _check(lambda a, b: sum_all(pow_const(concat([a, b], axis=0), 2.0)), [(2, 3), (4, 3)], seed)
    _check(lambda a: sum_all(take(a, np.array([0, 2, 2]), axis=0)), [(4, 3)], seed)
    _check(lambda a: sum_all(take(a, np.array([1, 1, 0]), axis=1)), [(4, 3)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_stack_ops(seed):
    _check(lambda a, b, c: sum_all(stack_mean([a, b, c])), [(3, 3)] * 3, seed)
    _check(lambda a, b, c: sum_all(stack_max([a, b, c])), [(3, 3)] * 3, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear_matmul(seed):
    _check(lambda a, b: sum_all(matmul(a, b)), [(3, 4), (4, 5)], seed)
    _check(lambda x, w, b: sum_all(linear(x, w, b)), [(6,), (3, 6), (3,)], seed)
    _check(lambda x, w, b: sum_all(pow_const(linear(x, w, b), 2.0)), [(5, 6), (3, 6), (3,)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    _check(
        lambda x, w, b: sum_all(pow_const(conv2d(x, w, b, stride=1, pad=1), 2.0)),
        [(2, 5, 5), (3, 2, 3, 3), (3,)],
        seed,
    )
    _check(
        lambda x, w, b: sum_all(conv2d(x, w, b, stride=2, pad=1)),
        [(2, 6, 7), (3, 2, 3, 3), (3,)],
        seed,
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_bilinear_sample(seed):
    rng = np.random.default_rng(seed)
    px, py = rng.uniform(-0.8, 4.5, size=2)
    _check(lambda f: sum_all(bilinear_sample(f, px, py)), [(3, 5, 5)], seed)


@given(st.integers(min_value=2, max_value=8))
@settings(max_examples=20, deadline=None)
def test_softmax_uniform_property(n):
    y = softmax(Tensor(np.zeros(n)), axis=0)
    np.testing.assert_allclose(y.data, 1.0 / n, atol=1e-15)


def test_backward_accumulates_into_grad(rng):
    p = parameter(rng.standard_normal((3, 3)))
    loss = sum_all(mul(p, p))
    loss.backward()
    np.testing.assert_allclose(p.grad, 2.0 * p.data)
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, 0.0)
