import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from lapsegan import models, ops, tensor as T
from lapsegan.errors import ConfigError, DimensionError
from lapsegan.models import (build_discriminator, build_generator,
                             duplicate_frame, forward_discriminator,
                             forward_generator, format_spec, parameter_count)
from lapsegan.tensor import Tensor

EXPECTED_CONV_SHAPES_128 = {
    "conv1": (32, 32, 64, 64),
    "conv2": (64, 16, 32, 32),
    "conv3": (128, 8, 16, 16),
    "conv4": (256, 4, 8, 8),
    "conv5": (512, 2, 4, 4),
    "conv6": (512, 1, 1, 1),
    "deconv1": (512, 2, 4, 4),
    "deconv2": (256, 4, 8, 8),
    "deconv3": (128, 8, 16, 16),
    "deconv4": (64, 16, 32, 32),
    "deconv5": (32, 32, 64, 64),
    "deconv6": (3, 32, 128, 128),
}


class TestBuildGenerator:
    def test_stage1_128_structure(self):
        spec = build_generator(1, 128)
        assert len(spec.layers) == 12
        assert sum(1 for l in spec.layers if not l.params.transposed) == 6
        assert len(spec.skip_map) == 5
        for layer in spec.layers:
            assert layer.out_shape == EXPECTED_CONV_SHAPES_128[layer.name]

    def test_stage2_drops_outer_skips(self):
        spec = build_generator(2, 128)
        assert set(spec.skip_map) == {"deconv2", "deconv3", "deconv4"}
        assert spec.skip_map == {"deconv2": "conv5", "deconv3": "conv4",
                                 "deconv4": "conv3"}

    def test_stage_specs_share_parameter_shapes(self):
        s1 = build_generator(1, 128, 0.25)
        s2 = build_generator(2, 128, 0.25)
        assert [(l.name, l.in_channels, l.out_channels, l.params) for l in s1.layers] \
            == [(l.name, l.in_channels, l.out_channels, l.params) for l in s2.layers]
        assert s1.skip_map != s2.skip_map

    def test_64_resolution_variant(self):
        spec = build_generator(1, 64)
        names = [l.name for l in spec.layers]
        assert names == ["conv2", "conv3", "conv4", "conv5", "conv6",
                         "deconv1", "deconv2", "deconv3", "deconv4", "deconv5"]
        assert spec.input_shape == (3, 32, 64, 64)
        assert spec.layers[-1].out_shape == (3, 32, 64, 64)
        assert spec.layers[-1].activation == "tanh"
        assert not spec.layers[-1].batch_norm
        assert len(spec.skip_map) == 4
        assert build_generator(2, 64).skip_map == {
            "deconv2": "conv5", "deconv3": "conv4", "deconv4": "conv3"}

    def test_normalization_rules(self):
        spec = build_generator(1, 128)
        bn = {l.name: l.batch_norm for l in spec.layers}
        act = {l.name: l.activation for l in spec.layers}
        assert not bn["conv1"] and not bn["conv6"] and not bn["deconv6"]
        assert all(bn[f"conv{i}"] for i in range(2, 6))
        assert all(bn[f"deconv{i}"] for i in range(1, 6))
        assert act["conv1"] == "leaky_relu"
        assert all(act[f"deconv{i}"] == "relu" for i in range(1, 6))
        assert act["deconv6"] == "tanh"

    def test_invalid_inputs(self):
        with pytest.raises(ConfigError):
            build_generator(3, 128)
        with pytest.raises(ConfigError):
            build_generator(1, 96)
        with pytest.raises(ConfigError):
            build_generator(1, 128, width_multiplier=0.0)

    @pytest.mark.parametrize("width", [1.0, 0.5, 0.25, 0.125])
    @pytest.mark.parametrize("resolution", [128, 64])
    @pytest.mark.parametrize("stage", [1, 2])
    def test_skip_symmetry_across_widths(self, width, resolution, stage):
        spec = build_generator(stage, resolution, width)
        shapes = {l.name: l.out_shape for l in spec.layers}
        inputs = {}
        prev = spec.input_shape
        for l in spec.layers:
            inputs[l.name] = prev
            prev = l.out_shape
        for dec, enc in spec.skip_map.items():
            assert shapes[enc] == inputs[dec]

    def test_broken_table_fails_loudly(self):
        rows = list(models._generator_rows(128))
        # corrupt deconv1's temporal kernel back to the shape-inconsistent 4
        name, f, k, s, p, bn, act = rows[6]
        rows[6] = (name, f, (4, 4, 4), s, p, bn, act)
        with pytest.raises(DimensionError):
            models._assemble(rows, models._SKIPS_STAGE1, 128, 1.0, "generator", 1)


class TestBuildDiscriminator:
    def test_structure_128(self):
        spec = build_discriminator(128)
        names = [l.name for l in spec.layers]
        assert names == ["conv1", "conv2", "conv3", "conv4", "conv5", "score"]
        assert spec.layers[-1].out_shape == (1, 1, 1, 1)
        assert spec.layers[-1].activation == "sigmoid"
        assert spec.taps == ("conv1", "conv3")

    def test_taps_64(self):
        spec = build_discriminator(64)
        assert spec.taps == ("conv2", "conv4")

    def test_encoder_matches_generator(self):
        g = build_generator(1, 128, 0.5)
        d = build_discriminator(128, 0.5)
        for dl in d.layers[:-1]:
            gl = g.layer(dl.name)
            assert (dl.params, dl.in_channels, dl.out_channels) == \
                (gl.params, gl.in_channels, gl.out_channels)


class TestDuplicateFrame:
    def test_every_slice_equals_frame(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        out = duplicate_frame(x, 32)
        assert out.shape == (2, 3, 32, 4, 4)
        for t in range(32):
            assert_array_equal(out.values[:, :, t], x.values)

    def test_t1_adds_singleton_axis(self):
        x = Tensor(np.ones((1, 3, 2, 2), dtype=np.float32))
        assert duplicate_frame(x, 1).shape == (1, 3, 1, 2, 2)

    def test_sum_linearity(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((1, 3, 5, 5)))
        out = duplicate_frame(x, 7)
        assert_allclose(out.values.sum(), 7.0 * x.values.sum(), rtol=1e-12)

    def test_backward(self):
        x = Tensor(np.random.default_rng(2).standard_normal((1, 2, 3, 3)))
        err = T.grad_check(lambda v: (duplicate_frame(v, 4)
                                      * duplicate_frame(v, 4)).sum(), x)
        assert err < 1e-6


def tiny_generator(stage=1, seed=0, dtype=np.float32):
    spec = build_generator(stage, 64, width_multiplier=0.125)
    return spec, ops.init_parameters(spec, seed, dtype=dtype)


class TestForwardGenerator:
    def test_video_to_video_closure_and_range(self):
        spec, params = tiny_generator()
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, size=(2, 3, 32, 64, 64)).astype(np.float32))
        out = forward_generator(spec, params, x)
        assert out.video.shape == x.shape
        assert np.all(out.video.values > -1.0) and np.all(out.video.values < 1.0)

    def test_zero_weights_still_finite(self):
        spec, params = tiny_generator()
        for name, t in params.tensors.items():
            if name.endswith(".weight"):
                t.values[...] = 0.0
        x = Tensor(np.zeros((2, 3, 32, 64, 64), dtype=np.float32))
        out = forward_generator(spec, params, x)
        assert np.all(np.isfinite(out.video.values))

    def test_shape_mismatch_rejected(self):
        spec, params = tiny_generator()
        with pytest.raises(DimensionError):
            forward_generator(spec, params,
                              Tensor(np.zeros((1, 3, 32, 32, 32), dtype=np.float32)))

    def test_activation_cache(self):
        spec, params = tiny_generator()
        x = Tensor(np.zeros((2, 3, 32, 64, 64), dtype=np.float32))
        out = forward_generator(spec, params, x, cache_activations=True)
        assert set(out.activations) == {l.name for l in spec.layers}


class TestForwardDiscriminator:
    def test_score_and_tap_shapes(self):
        spec = build_discriminator(64, 0.125)
        params = ops.init_parameters(spec, 1)
        rng = np.random.default_rng(4)
        v = Tensor(rng.uniform(-1, 1, (2, 3, 32, 64, 64)).astype(np.float32))
        score, feats = forward_discriminator(spec, params, v)
        assert score.shape == (2, 1)
        assert np.all(score.values > 0) and np.all(score.values < 1)
        assert feats[0].shape == (2, 8, 16, 32, 32)   # conv2 tap at 1/8 width
        assert feats[1].shape == (2, 32, 4, 8, 8)     # conv4 tap

    def test_tap_shapes_full_width_formula(self):
        spec = build_discriminator(128)
        assert spec.layer("conv1").out_shape == (32, 32, 64, 64)
        assert spec.layer("conv3").out_shape == (128, 8, 16, 16)

    def test_out_of_range_clamped_with_warning(self, caplog):
        spec = build_discriminator(64, 0.125)
        params = ops.init_parameters(spec, 1)
        v = Tensor(np.full((1, 3, 32, 64, 64), 1.2, dtype=np.float32))
        with caplog.at_level("WARNING"):
            score, _ = forward_discriminator(spec, params, v)
        assert any("clamping" in r.message for r in caplog.records)
        assert np.all(np.isfinite(score.values))


class TestEndToEnd:
    def test_composite_gradcheck(self):
        # gradient of D(G(X)) score through both nets at f64, sampled probes
        gspec = build_generator(2, 64, 0.125)
        dspec = build_discriminator(64, 0.125)
        gp = ops.init_parameters(gspec, 11, dtype=np.float64)
        dp = ops.init_parameters(dspec, 12, dtype=np.float64)
        rng = np.random.default_rng(5)
        x0 = rng.uniform(-0.5, 0.5, (1, 3, 32, 64, 64))

        def f(v):
            y = forward_generator(gspec, gp, v, update_running=False)
            score, _ = forward_discriminator(dspec, dp, y.video,
                                             update_running=False)
            return T.log(score).sum()

        err = T.grad_check(f, Tensor(x0, dtype=np.float64), step=1e-5,
                           floor=1e-3, sample=6, rng=np.random.default_rng(0))
        assert err < 1e-4


class TestSummary:
    def test_format_lists_all_layers(self):
        spec = build_generator(1, 128)
        text = format_spec(spec)
        for l in spec.layers:
            assert l.name in text
        assert "conv5" in text and "(3, 32, 128, 128)" in text

    def test_parameter_count_positive(self):
        assert parameter_count(build_generator(1, 64, 0.125)) > 0
