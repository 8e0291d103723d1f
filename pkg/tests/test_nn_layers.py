import numpy as np
import pytest
from numpy.testing import assert_allclose

from fusereg.nn import (
    BatchNorm,
    ConcatSkip,
    Conv3d,
    Flatten,
    Linear,
    MaxPool3d,
    ReLU,
    concat_skip,
    conv3d_backward,
    conv3d_forward,
    relu,
)
from oracles import central_fd, conv3d_naive, max_rel_err


class TestReLU:
    def test_pointwise_values(self):
        assert relu(np.array([-1.0]))[0] == 0.0
        assert relu(np.array([2.0]))[0] == 2.0
        assert relu(np.array([0.0]))[0] == 0.0

    def test_backward_subgradient_at_zero_is_one(self):
        layer = ReLU()
        x = np.array([[-2.0, 0.0, 3.0]])
        layer.forward(x, training=True)
        g = layer.backward(np.ones_like(x))
        assert_allclose(g, [[0.0, 1.0, 1.0]])


class TestConvForward:
    def test_one_cubed_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.random((2, 3, 4, 4, 4))
        w = np.zeros((3, 3, 1, 1, 1))
        for c in range(3):
            w[c, c, 0, 0, 0] = 1.0
        out = conv3d_forward(x, w, np.zeros(3))
        assert_allclose(out, x, atol=1e-12)

    def test_all_ones_kernel_counts_patch(self):
        x = np.ones((1, 1, 5, 5, 5))
        w = np.ones((1, 1, 3, 3, 3))
        out = conv3d_forward(x, w, np.array([0.5]))
        assert out.shape == (1, 1, 3, 3, 3)
        assert_allclose(out, 27.5)

    def test_matches_naive_oracle_random_cases(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            d = int(rng.integers(k, k + 4))
            x = rng.standard_normal((n, cin, d, d, d))
            w = rng.standard_normal((cout, cin, k, k, k))
            b = rng.standard_normal(cout)
            got = conv3d_forward(x, w, b)
            want = conv3d_naive(x, w, b)
            assert np.max(np.abs(got - want)) < 1e-12

    def test_stride_two_matches_naive(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 7, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        assert_allclose(conv3d_forward(x, w, b, stride=2), conv3d_naive(x, w, b, stride=2), atol=1e-12)

    def test_kernel_larger_than_input_rejected(self):
        x = np.zeros((1, 1, 2, 2, 2))
        w = np.zeros((1, 1, 3, 3, 3))
        with pytest.raises(ValueError):
            conv3d_forward(x, w, np.zeros(1))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            conv3d_forward(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))


class TestConvBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        gx, gw, gb = conv3d_backward(np.zeros((1, 2, 2, 2, 2)), x, w)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_impulse_grad_out_recovers_input_patch(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 4, 4, 4))
        w = rng.standard_normal((1, 1, 2, 2, 2))
        g = np.zeros((1, 1, 3, 3, 3))
        g[0, 0, 1, 2, 0] = 1.0
        _, gw, gb = conv3d_backward(g, x, w)
        assert_allclose(gw[0, 0], x[0, 0, 1:3, 2:4, 0:2], atol=1e-12)
        assert_allclose(gb, [1.0])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 2, 2, 2))
        b = rng.standard_normal(3)
        proj = rng.standard_normal((2, 3, 3, 3, 3))

        def loss():
            return float(np.sum(conv3d_forward(x, w, b) * proj))

        gx, gw, gb = conv3d_backward(proj, x, w)
        assert max_rel_err(gx, central_fd(loss, x)) < 1e-5
        assert max_rel_err(gw, central_fd(loss, w)) < 1e-5
        fd_b = central_fd(loss, b)
        assert max_rel_err(gb, fd_b) < 1e-5

    def test_padded_layer_matches_naive_on_padded_input(self):
        rng = np.random.default_rng(6)
        layer = Conv3d(2, 3, kernel=3, pad=1, dtype=np.float64, rng=rng)
        x = rng.standard_normal((2, 2, 5, 5, 5))  # (C, N, D, H, W)
        out = layer.forward(x, training=False)
        xp = np.pad(np.moveaxis(x, 1, 0), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        want = conv3d_naive(xp, layer.params["w"], layer.params["b"])
        assert np.max(np.abs(np.moveaxis(out, 0, 1) - want)) < 1e-12


class TestBatchNorm:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(7)
        bn = BatchNorm(3, dtype=np.float64)
        x = rng.standard_normal((3, 4, 5, 5, 5)) * 4 + 2
        y = bn.forward(x, training=True)
        m = y.mean(axis=(1, 2, 3, 4))
        v = y.var(axis=(1, 2, 3, 4))
        assert np.max(np.abs(m)) < 1e-6
        assert np.max(np.abs(v - 1.0)) < 1e-4  # eps shifts variance slightly

    def test_constant_input_gives_zeros(self):
        bn = BatchNorm(2, dtype=np.float64)
        x = np.full((2, 3, 4, 4, 4), 7.0)
        y = bn.forward(x, training=True)
        assert_allclose(y, 0.0, atol=1e-12)

    def test_eval_mode_uses_running_stats(self):
        rng = np.random.default_rng(8)
        bn = BatchNorm(2, momentum=0.0, dtype=np.float64)  # running <- batch
        x = rng.standard_normal((2, 8, 4, 4, 4)) * 3 + 1
        bn.forward(x, training=True)
        y = bn.forward(x, training=False)
        yt = bn.forward(x, training=True)
        assert np.max(np.abs(y - yt)) < 1e-9

    def test_running_variance_floor(self):
        bn = BatchNorm(1, momentum=0.0, eps=1e-5)
        bn.forward(np.full((1, 2, 2, 2, 2), 3.0, np.float32), training=True)
        assert bn.running_var[0] >= 1e-5

    def test_gradcheck(self):
        rng = np.random.default_rng(9)
        bn = BatchNorm(2, dtype=np.float64)
        x = rng.standard_normal((2, 3, 3, 3, 3))
        proj = rng.standard_normal(x.shape)

        def loss():
            return float(np.sum(bn.forward(x, training=True) * proj))

        bn.zero_grads()
        bn.forward(x, training=True)
        gx = bn.backward(proj)
        assert max_rel_err(gx, central_fd(loss, x)) < 1e-5
        assert max_rel_err(bn.grads["gamma"], central_fd(loss, bn.params["gamma"])) < 1e-5
        assert max_rel_err(bn.grads["beta"], central_fd(loss, bn.params["beta"])) < 1e-5


class TestMaxPool:
    def test_forward_matches_blockwise_max(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 3, 4, 4, 4))
        y = MaxPool3d(2).forward(x)
        for c in range(2):
            for n in range(3):
                for z in range(2):
                    for yy in range(2):
                        for xx in range(2):
                            block = x[c, n, 2 * z : 2 * z + 2, 2 * yy : 2 * yy + 2, 2 * xx : 2 * xx + 2]
                            assert y[c, n, z, yy, xx] == block.max()

    def test_backward_routes_to_argmax(self):
        pool = MaxPool3d(2)
        x = np.zeros((1, 1, 2, 2, 2))
        x[0, 0, 1, 0, 1] = 5.0
        pool.forward(x, training=True)
        g = pool.backward(np.full((1, 1, 1, 1, 1), 2.0))
        want = np.zeros_like(x)
        want[0, 0, 1, 0, 1] = 2.0
        assert_allclose(g, want)

    def test_tie_goes_to_first_position(self):
        pool = MaxPool3d(2)
        x = np.ones((1, 1, 2, 2, 2))
        pool.forward(x, training=True)
        g = pool.backward(np.ones((1, 1, 1, 1, 1)))
        assert g[0, 0, 0, 0, 0] == 1.0
        assert g.sum() == 1.0

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValueError):
            MaxPool3d(2).out_shape((1, 1, 5, 4, 4))


class TestConcatSkip:
    def test_shape_example(self):
        low = np.zeros((1, 4, 8, 8, 8))
        high = np.zeros((1, 8, 8, 8, 8))
        out = concat_skip(low, high)
        assert out.shape == (1, 12, 8, 8, 8)

    def test_channels_slice_back_bit_exact(self):
        rng = np.random.default_rng(11)
        low = rng.standard_normal((2, 3, 4, 4, 4))
        high = rng.standard_normal((2, 5, 4, 4, 4))
        out = concat_skip(low, high)
        assert np.array_equal(out[:, :3], low)
        assert np.array_equal(out[:, 3:], high)

    def test_pooling_to_match_and_backward_split(self):
        rng = np.random.default_rng(12)
        low = rng.standard_normal((2, 2, 8, 8, 8))  # (C, N, ...)
        high = rng.standard_normal((4, 2, 2, 2, 2))
        layer = ConcatSkip(source_index=0)
        out = layer.forward_pair(low, high, training=True)
        assert out.shape == (6, 2, 2, 2, 2)
        g = rng.standard_normal(out.shape)
        g_low, g_high = layer.backward_pair(g)
        assert g_low.shape == low.shape
        assert np.array_equal(g_high, g[2:])
        # pooled-skip gradient is sparse: one nonzero per 4^3 block
        assert np.count_nonzero(g_low) == 2 * 2 * 2 * 2 * 2

    def test_incompatible_spatial_rejected(self):
        layer = ConcatSkip(source_index=0)
        # skip smaller than the trunk can never match
        with pytest.raises(ValueError):
            layer.out_shape_pair((2, 1, 2, 2, 2), (4, 1, 3, 3, 3))
        # mixed case: one axis too small even though another is larger
        with pytest.raises(ValueError):
            layer.out_shape_pair((2, 1, 5, 1, 5), (4, 1, 2, 2, 2))

    def test_odd_to_even_crop_is_centered(self):
        rng = np.random.default_rng(20)
        low = rng.standard_normal((1, 1, 3, 3, 3))
        high = rng.standard_normal((1, 1, 2, 2, 2))
        layer = ConcatSkip(source_index=0)
        out = layer.forward_pair(low, high)
        assert np.array_equal(out[0], low[0, :, 0:2, 0:2, 0:2])


class TestFlattenLinear:
    def test_flatten_round_trip(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 2, 4, 4, 4))
        f = Flatten()
        y = f.forward(x, training=True)
        assert y.shape == (3 * 64, 2)
        back = f.backward(y)
        assert np.array_equal(back, x)

    def test_flatten_feature_order_is_channel_major(self):
        x = np.zeros((2, 1, 2, 2, 2))
        x[1, 0, 0, 0, 1] = 3.0
        y = Flatten().forward(x)
        assert y[8 + 1, 0] == 3.0

    def test_linear_gradcheck(self):
        rng = np.random.default_rng(14)
        lin = Linear(5, 3, dtype=np.float64, rng=rng)
        x = rng.standard_normal((5, 4))
        proj = rng.standard_normal((3, 4))

        def loss():
            return float(np.sum(lin.forward(x) * proj))

        lin.zero_grads()
        lin.forward(x, training=True)
        gx = lin.backward(proj)
        assert max_rel_err(gx, central_fd(loss, x)) < 1e-6
        assert max_rel_err(lin.grads["w"], central_fd(loss, lin.params["w"])) < 1e-6
        assert max_rel_err(lin.grads["b"], central_fd(loss, lin.params["b"])) < 1e-6
