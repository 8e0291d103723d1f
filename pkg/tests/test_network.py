import numpy as np
import pytest
from numpy.testing import assert_allclose

from fusereg import Volume3D
from fusereg.nn import (
    LayerSpec,
    Network,
    NetworkSpec,
    default_metric_spec,
    normalize_intensities,
    predict_tre,
    predict_tre_batch,
)
from oracles import mini_metric_spec, network_gradcheck


class TestSpecValidation:
    def test_default_spec_passes_structure_check(self):
        spec = default_metric_spec()
        spec.validate_structure()
        assert sum(1 for l in spec.layers if l.kind == "conv3d") == 9

    def test_shape_mismatch_caught_at_construction(self):
        layers = (
            LayerSpec("conv3d", {"in_ch": 3, "out_ch": 4, "kernel": 3}),  # input has 2 ch
        )
        with pytest.raises(ValueError):
            Network(NetworkSpec((2, 8, 8, 8), layers))

    def test_fc_feature_mismatch_caught(self):
        layers = (
            LayerSpec("flatten"),
            LayerSpec("fc", {"in_features": 999, "out_features": 1}),
        )
        with pytest.raises(ValueError):
            Network(NetworkSpec((2, 4, 4, 4), layers))

    def test_structure_check_rejects_wrong_conv_count(self):
        spec = mini_metric_spec()
        with pytest.raises(ValueError):
            spec.validate_structure()

    def test_concat_source_out_of_range(self):
        layers = (LayerSpec("concat", {"source_index": 5}),)
        with pytest.raises(ValueError):
            Network(NetworkSpec((2, 4, 4, 4), layers))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            LayerSpec("dropout")


class TestForward:
    def test_default_net_forward_shape_and_finite(self):
        net = Network(default_metric_spec(), seed=1)
        x = np.random.default_rng(0).random((2, 2, 32, 32, 32), dtype=np.float32)
        out = net.forward(x)
        assert out.shape == (1, 2)
        assert np.all(np.isfinite(out))

    def test_zero_head_predicts_zero(self):
        net = Network(default_metric_spec(), seed=2)
        rng = np.random.default_rng(3)
        vol = Volume3D(rng.random((32, 32, 32), dtype=np.float32), (2, 2, 2), (0, 0, 0))
        mov = Volume3D(rng.random((32, 32, 32), dtype=np.float32), (2, 2, 2), (0, 0, 0))
        assert predict_tre(net, vol, mov) == 0.0

    def test_same_seed_same_outputs(self):
        x = np.random.default_rng(4).random((2, 1, 8, 8, 8), dtype=np.float32)
        a = Network(mini_metric_spec(), seed=7).forward(x)
        b = Network(mini_metric_spec(), seed=7).forward(x)
        assert np.array_equal(a, b)
        c = Network(mini_metric_spec(), seed=8).forward(x)
        assert not np.array_equal(a, c)

    def test_eval_mode_is_pure(self):
        net = Network(mini_metric_spec(), seed=1)
        x = np.random.default_rng(5).random((2, 3, 8, 8, 8), dtype=np.float32)
        before = {k: v.copy() for k, v in net.named_params()}
        y1 = net.forward(x, training=False)
        y2 = net.forward(x, training=False)
        assert np.array_equal(y1, y2)
        for k, v in net.named_params():
            assert np.array_equal(before[k], v)

    def test_bad_input_shape_rejected(self):
        net = Network(mini_metric_spec())
        with pytest.raises(ValueError):
            net.forward(np.zeros((2, 1, 4, 4, 4), np.float32))

    def test_swapped_channels_both_finite(self):
        net = Network(mini_metric_spec(), seed=3)
        rng = np.random.default_rng(6)
        x = rng.random((2, 1, 8, 8, 8), dtype=np.float32)
        xs = x[::-1].copy()
        a = float(net.forward(x)[0, 0])
        b = float(net.forward(xs)[0, 0])
        assert np.isfinite(a) and np.isfinite(b)


class TestGradcheck:
    def test_miniature_network_matches_finite_differences(self):
        net = Network(mini_metric_spec(), dtype=np.float64, seed=11)
        x = np.random.default_rng(12).standard_normal((2, 2, 8, 8, 8))
        assert network_gradcheck(net, x) < 1e-4


class TestPredictHelpers:
    def test_normalize_intensities(self):
        x = np.array([2.0, 4.0, 6.0], np.float32)
        assert_allclose(normalize_intensities(x), [0.0, 0.5, 1.0])
        assert_allclose(normalize_intensities(np.full(4, 3.0)), 0.0)

    def test_geometry_mismatch_rejected(self):
        net = Network(mini_metric_spec())
        a = Volume3D(np.zeros((8, 8, 8), np.float32), (1, 1, 1), (0, 0, 0))
        b = Volume3D(np.zeros((8, 8, 8), np.float32), (2, 2, 2), (0, 0, 0))
        with pytest.raises(ValueError):
            predict_tre(net, a, b)
        with pytest.raises(ValueError):
            predict_tre(net, Volume3D(np.zeros((4, 4, 4), np.float32)), a)

    def test_batch_matches_single(self):
        # one shared forward for N movings must agree with per-call results
        spec = mini_metric_spec()
        net = Network(spec, seed=21)
        # give the head nonzero weights so the check is not vacuous
        net.layers[-1].params["w"][...] = 0.01
        rng = np.random.default_rng(22)
        fixed = Volume3D(rng.random((8, 8, 8), dtype=np.float32))
        movs = [Volume3D(rng.random((8, 8, 8), dtype=np.float32)) for _ in range(4)]
        batch = predict_tre_batch(net, fixed, movs)
        singles = [predict_tre(net, fixed, m) for m in movs]
        assert_allclose(batch, singles, rtol=1e-5, atol=1e-7)
