"""Tensor engine tests: brute-force oracles for every primitive's forward
pass, and central finite differences as the independent gradient oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmnet import autodiff as ad
from mmnet.autodiff import Tensor
from mmnet.errors import ContractError, ShapeError

from gradcheck import finite_diff, rel_err

RNG = np.random.default_rng(7)


def rand(*shape):
    return RNG.uniform(-2, 2, size=shape)


# ---------------------------------------------------------------- oracles

def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def conv2d_oracle(x, k, b, stride, padding):
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for co in range(cout):
                acc = b[co]
                for di in range(kh):
                    for dj in range(kw):
                        for ci in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, ci] \
                                * k[di, dj, ci, co]
                out[i, j, co] = acc
    return out


def softmax_oracle(x):
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def bce_oracle(x, t):
    p = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
    return float(np.mean(-t * np.log(p) - (1 - t) * np.log(1 - p)))


# ---------------------------------------------------------------- matmul

class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor(np.array([[3., 4], [5, 6]])))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_computed(self):
        out = ad.matmul(Tensor(np.array([[1., 2]])),
                        Tensor(np.array([[3.], [4]])))
        np.testing.assert_array_equal(out.data, [[11]])

    def test_matches_triple_loop_oracle(self):
        a, b = rand(3, 4), rand(4, 2)
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, matmul_oracle(a, b), atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(rand(2, 3)), Tensor(rand(2, 2)))

    def test_many_random_instances_match_oracle(self):
        for _ in range(100):
            m, k, n = RNG.integers(1, 6, size=3)
            a, b = rand(m, k), rand(k, n)
            np.testing.assert_allclose(
                ad.matmul(Tensor(a), Tensor(b)).data,
                matmul_oracle(a, b), atol=1e-6)


# ---------------------------------------------------------------- conv2d

class TestConv2d:
    def test_identity_1x1_kernel(self):
        x = rand(4, 4, 1)
        k = np.ones((1, 1, 1, 1))
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_box_blur_impulse(self):
        x = np.zeros((3, 3, 1))
        x[1, 1, 0] = 1.0
        k = np.ones((3, 3, 1, 1))
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1)), padding=1)
        np.testing.assert_allclose(out.data[:, :, 0], np.ones((3, 3)))

    def test_matches_naive_oracle(self):
        x, k, b = rand(8, 8, 2), rand(3, 3, 2, 3), rand(3)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=1, padding=1)
        np.testing.assert_allclose(out.data, conv2d_oracle(x, k, b, 1, 1),
                                   atol=1e-6)

    def test_many_random_instances_match_oracle(self):
        for _ in range(100):
            cin, cout = RNG.integers(1, 4, size=2)
            kh = int(RNG.choice([1, 3]))
            stride = int(RNG.choice([1, 2]))
            pad = int(RNG.integers(0, 2))
            h = int(RNG.integers(kh, 7))
            if (h + 2 * pad - kh) % stride:
                h += stride - (h + 2 * pad - kh) % stride
            x, k, b = rand(h, h, cin), rand(kh, kh, cin, cout), rand(cout)
            out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
            np.testing.assert_allclose(
                out.data, conv2d_oracle(x, k, b, stride, pad), atol=1e-6)

    def test_non_integral_output_error(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(rand(4, 4, 1)), Tensor(rand(3, 3, 1, 1)),
                      stride=2, padding=1)


# ---------------------------------------------------------------- softmax

class TestSoftmax:
    def test_uniform_input(self):
        out = ad.softmax(Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3))

    def test_stability_under_large_values(self):
        out = ad.softmax(Tensor(np.array([1000.0, 0.0])))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_matches_direct_formula(self):
        x = rand(5)
        np.testing.assert_allclose(ad.softmax(Tensor(x)).data,
                                   softmax_oracle(x), atol=1e-7)

    def test_many_random_instances_match_oracle(self):
        for _ in range(100):
            x = rand(int(RNG.integers(1, 9)))
            np.testing.assert_allclose(ad.softmax(Tensor(x)).data,
                                       softmax_oracle(x), atol=1e-6)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
    @settings(max_examples=200, deadline=None)
    def test_probability_simplex(self, xs):
        out = ad.softmax(Tensor(np.array(xs))).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) <= 1e-6

    def test_masked_softmax_zero_on_pad(self):
        x = rand(2, 5)
        mask = np.array([True, True, False, True, False])
        out = ad.masked_softmax(Tensor(x), mask[None, :]).data
        assert (out[:, ~mask] == 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_masked_softmax_all_masked_raises(self):
        with pytest.raises(ShapeError):
            ad.masked_softmax(Tensor(rand(2, 3)), np.zeros(3, dtype=bool))


# ---------------------------------------------------------------- layer norm

class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = np.full((2, 8), 3.7)
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_affine_collapse(self):
        out = ad.layer_norm(Tensor(rand(3, 8)), Tensor(np.zeros(8)),
                            Tensor(np.full(8, 2.5)))
        np.testing.assert_allclose(out.data, 2.5)

    def test_standardizes_rows(self):
        x = rand(4, 8)
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(8)),
                            Tensor(np.zeros(8)), eps=1e-5).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


# ---------------------------------------------------------------- misc ops

class TestSpatialOps:
    def test_relu(self):
        np.testing.assert_array_equal(
            ad.relu(Tensor(np.array([-1.0, 2.0]))).data, [0, 2])

    def test_avgpool_constant(self):
        out = ad.avgpool2x2(Tensor(np.full((4, 4, 1), 3.0)))
        np.testing.assert_allclose(out.data, np.full((2, 2, 1), 3.0))

    def test_avgpool_odd_dims_raises(self):
        with pytest.raises(ShapeError):
            ad.avgpool2x2(Tensor(rand(3, 4, 1)))

    def test_upsample_then_avgpool_is_identity(self):
        x = rand(3, 5, 2)
        out = ad.avgpool2x2(ad.upsample2x(Tensor(x)))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_upsample_is_nearest_neighbor(self):
        x = np.arange(4.0).reshape(2, 2, 1)
        out = ad.upsample2x(Tensor(x)).data[:, :, 0]
        np.testing.assert_array_equal(
            out, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


# ---------------------------------------------------------------- bce

class TestBce:
    def test_saturated_logits_near_zero_loss(self):
        t = np.array([1.0, 0.0])
        x = np.array([50.0, -50.0])
        assert ad.bce_with_logits(Tensor(x), t).item() < 1e-8

    def test_zero_logits_ln2(self):
        t = RNG.integers(0, 2, size=16).astype(float)
        x = np.zeros(16)
        assert abs(ad.bce_with_logits(Tensor(x), t).item() - np.log(2)) < 1e-7

    def test_many_random_instances_match_oracle(self):
        for _ in range(100):
            n = int(RNG.integers(1, 20))
            x = rand(n)
            t = RNG.uniform(0, 1, size=n)
            got = ad.bce_with_logits(Tensor(np.asarray(x)), t).item()
            assert abs(got - bce_oracle(x, t)) < 1e-6


# ---------------------------------------------------------------- gradients

def check_grads(build, inputs, h=1e-4, tol=1e-4):
    """Compare analytic grads of scalar build(*tensors) with central
    finite differences for every input."""
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    loss = build(*tensors)
    loss.backward()
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [Tensor(v.data) for v in tensors]
            args[i] = Tensor(x)
            return float(build(*args).data)
        fd = finite_diff(f, t.data, h=h)
        err = rel_err(t.grad, fd)
        assert err.max() < tol, f"input {i}: max rel err {err.max():.2e}"


class TestGradients:
    def test_matmul(self):
        weights = rand(3, 2)
        check_grads(lambda a, b: ad.tsum(ad.mul(ad.matmul(a, b), weights)),
                    [rand(3, 4), rand(4, 2)])

    def test_sum_of_linear_map(self):
        w, x = rand(3, 4), rand(4, 2)
        wt = Tensor(w, requires_grad=True)
        loss = ad.tsum(ad.matmul(wt, Tensor(x)))
        loss.backward()
        fd = finite_diff(lambda v: float((v @ x).sum()), w)
        assert rel_err(wt.grad, fd).max() < 1e-4

    def test_grad_zero_for_unused_leaf(self):
        a = Tensor(rand(3), requires_grad=True)
        b = Tensor(rand(3), requires_grad=True)
        ad.tsum(ad.mul(a, 2.0)).backward()
        assert b.grad is None

    def test_conv2d(self):
        weights = rand(4, 4, 2)
        check_grads(lambda x, k, b: ad.tsum(ad.mul(
            ad.conv2d(x, k, b, stride=1, padding=1), weights)),
            [rand(4, 4, 3), rand(3, 3, 3, 2), rand(2)])

    def test_conv2d_strided(self):
        check_grads(lambda x, k, b: ad.tsum(
            ad.conv2d(x, k, b, stride=2, padding=0)),
            [rand(7, 7, 2), rand(3, 3, 2, 1), rand(1)])

    def test_softmax(self):
        weights = rand(4, 5)
        check_grads(lambda x: ad.tsum(ad.mul(ad.softmax(x), weights)),
                    [rand(4, 5)])

    def test_masked_softmax(self):
        mask = np.array([True, False, True, True, False])
        weights = rand(3, 5)
        check_grads(lambda x: ad.tsum(ad.mul(
            ad.masked_softmax(x, mask[None, :]), weights)),
            [rand(3, 5)])

    def test_layer_norm(self):
        weights = rand(3, 6)
        check_grads(lambda x, g, b: ad.tsum(ad.mul(
            ad.layer_norm(x, g, b), weights)),
            [rand(3, 6), rand(6), rand(6)])

    def test_sigmoid_relu_pool_upsample(self):
        weights = rand(6, 6, 2)
        check_grads(lambda x: ad.tsum(ad.mul(ad.upsample2x(
            ad.sigmoid(ad.avgpool2x2(x))), weights)),
            # relu kink excluded by keeping inputs away from 0
            [np.abs(rand(6, 6, 2)) + 0.1])

    def test_relu_away_from_kink(self):
        weights = rand(4)
        check_grads(lambda x: ad.tsum(ad.mul(ad.relu(x), weights)),
                    [np.array([-1.5, -0.3, 0.4, 1.9])])

    def test_bce(self):
        t = RNG.uniform(0, 1, size=(4, 4))
        check_grads(lambda x: ad.bce_with_logits(x, t), [rand(4, 4)])

    def test_concat_getitem_transpose_reshape(self):
        weights = rand(12)
        check_grads(
            lambda a, b: ad.tsum(ad.mul(ad.reshape(ad.transpose(
                ad.concat([a, b], axis=0)), (12,)), weights)),
            [rand(2, 3), rand(2, 3)])

    def test_all_primitives_random_sweep(self):
        # random composite graphs mixing every primitive
        for trial in range(5):
            rng = np.random.default_rng(trial)
            x0 = rng.uniform(-2, 2, (4, 4, 2))
            k0 = rng.uniform(-2, 2, (3, 3, 2, 2))
            g0 = rng.uniform(0.5, 1.5, (2,))
            b0 = rng.uniform(-1, 1, (2,))
            w0 = rng.uniform(-2, 2, (8, 4))

            def build(x, k, g, b, w):
                y = ad.conv2d(x, k, stride=1, padding=1)
                y = ad.layer_norm(y, g, b)
                y = ad.avgpool2x2(y)
                y = ad.reshape(y, (1, 8))
                y = ad.matmul(y, w)
                y = ad.softmax(y, axis=-1)
                return ad.tsum(ad.mul(ad.sigmoid(y), 1.7))

            check_grads(build, [x0, k0, g0, b0, w0])


# ---------------------------------------------------------------- contracts

class TestContracts:
    def test_backward_requires_scalar(self):
        with pytest.raises(ContractError):
            Tensor(rand(3), requires_grad=True).backward()

    def test_backward_twice_errors(self):
        x = Tensor(rand(3), requires_grad=True)
        loss = ad.tsum(x)
        loss.backward()
        with pytest.raises(ContractError):
            loss.backward()

    def test_forward_values_finite(self):
        x = Tensor(rand(6, 6, 3))
        k = Tensor(rand(3, 3, 3, 4))
        y = ad.softmax(ad.conv2d(x, k, padding=1), axis=-1)
        assert np.isfinite(y.data).all()

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(0)
            a = Tensor(rng.uniform(-1, 1, (5, 5)))
            return ad.softmax(ad.matmul(a, a)).data
        np.testing.assert_array_equal(run(), run())
