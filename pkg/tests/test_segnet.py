"""Segmentation sub-network tests on default and miniature configurations."""

import numpy as np
import pytest

from r2ios.diffcore import Tensor, grad_check, pixel_ce_loss, softmax
from r2ios.geometry import Box
from r2ios.recursion import RecursionConfig, image_to_tensor, init_model_params
from r2ios.segnet import (
    ModelConfig,
    backbone_forward,
    build_feature_cache,
    seg_forward,
    seg_forward_batch,
    seg_target,
)

MINI = ModelConfig(num_classes=3, mask_size=4, roi_size=3, feat_stride=2,
                   backbone_channels=(4, 6), seg_hidden=5, ae_hidden=8, fc_width=7)


def mini_params(seed=0, **rcfg_kw):
    return init_model_params(MINI, RecursionConfig(**rcfg_kw), seed)


def rand_image(h=8, w=8, seed=1):
    return np.random.default_rng(seed).integers(0, 255, size=(h, w, 3)).astype(np.uint8)


class TestModelConfig:
    def test_ae_hidden_must_be_compressive(self):
        with pytest.raises(ValueError):
            ModelConfig(mask_size=4, ae_hidden=32)

    def test_stride_power_of_two(self):
        with pytest.raises(ValueError):
            ModelConfig(feat_stride=3)


class TestBackbone:
    def test_default_output_stride(self):
        cfg = ModelConfig()
        params = init_model_params(cfg, RecursionConfig(), 0)
        img = rand_image(64, 64)
        feat = backbone_forward(image_to_tensor(img), params, cfg, None)
        assert feat.shape == (1, 64, 16, 16)

    def test_zero_image_zero_biases_gives_zero_map(self):
        params = mini_params()
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        feat = backbone_forward(image_to_tensor(img), params, MINI, None)
        np.testing.assert_array_equal(feat.data, np.zeros_like(feat.data))

    def test_doubling_input_doubles_output(self):
        params = mini_params()
        f1 = backbone_forward(image_to_tensor(rand_image(8, 8)), params, MINI, None)
        f2 = backbone_forward(image_to_tensor(rand_image(16, 16)), params, MINI, None)
        assert f2.shape[2] == 2 * f1.shape[2]
        assert f2.shape[3] == 2 * f1.shape[3]

    def test_indivisible_size_raises(self):
        params = mini_params()
        with pytest.raises(ValueError):
            backbone_forward(image_to_tensor(rand_image(9, 8)), params, MINI, None)


class TestSegForward:
    def test_default_shapes(self):
        cfg = ModelConfig()
        params = init_model_params(cfg, RecursionConfig(), 0)
        feat = backbone_forward(image_to_tensor(rand_image(64, 64)), params, cfg, None)
        cm, dm, hidden = seg_forward(feat, Box(32, 30, 28, 22), params, cfg)
        assert cm.C.shape == (2, 40, 40)
        assert dm.v.shape == (2, 40, 40)
        assert hidden.shape == (512,)
        assert dm.fg_prob.shape == (40, 40)

    def test_zero_parameters_give_uniform_half(self):
        params = mini_params()
        for name in params.names():
            params[name].data[...] = 0.0
        feat = backbone_forward(image_to_tensor(rand_image()), params, MINI, None)
        _, dm, _ = seg_forward(feat, Box(4, 4, 5, 5), params, MINI)
        np.testing.assert_allclose(dm.fg_prob, 0.5, atol=1e-15)

    def test_channel_probabilities_sum_to_one(self):
        params = mini_params(seed=3)
        feat = backbone_forward(image_to_tensor(rand_image(seed=5)), params, MINI, None)
        _, dm, _ = seg_forward(feat, Box(3.7, 4.2, 6.0, 5.0), params, MINI)
        probs = softmax(dm.v.data, axis=0)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(probs[1], dm.fg_prob, atol=1e-15)

    def test_shapes_independent_of_box_size(self):
        params = mini_params(seed=2)
        feat = backbone_forward(image_to_tensor(rand_image(seed=2)), params, MINI, None)
        for box in (Box(4, 4, 7, 7), Box(2, 2, 1.3, 2.0), Box(6, 5, 3.1, 4.6)):
            cm, dm, hidden = seg_forward(feat, box, params, MINI)
            assert cm.C.shape == (2, 4, 4) and dm.v.shape == (2, 4, 4)
            assert hidden.shape == (8,)

    def test_no_autoencoder_bypass_is_identity_with_same_shapes(self):
        params = mini_params(seed=4, no_autoencoder=True)
        feat = backbone_forward(image_to_tensor(rand_image(seed=4)), params, MINI, None)
        cm, dm, hidden = seg_forward(feat, Box(4, 4, 6, 6), params, MINI,
                                     no_autoencoder=True)
        assert hidden is None
        np.testing.assert_array_equal(dm.v.data, cm.C.data)
        assert dm.v.shape == (2, 4, 4)

    def test_fully_no_autoencoder_shapes(self):
        params = mini_params(seed=5, fully_no_autoencoder=True)
        assert "ae.fc1.w" in params and "ae.enc.w" not in params
        assert params["ae.fc1.w"].shape == (32, 32)
        feat = backbone_forward(image_to_tensor(rand_image(seed=6)), params, MINI, None)
        cm, dm, hidden = seg_forward(feat, Box(4, 4, 6, 6), params, MINI,
                                     fully_no_autoencoder=True)
        assert dm.v.shape == (2, 4, 4)
        assert hidden.shape == (32,)

    def test_batch_matches_single(self):
        params = mini_params(seed=7)
        img = rand_image(seed=7)
        feat = backbone_forward(image_to_tensor(img), params, MINI, None)
        boxes = [Box(4, 4, 6, 6), Box(3, 5, 2.5, 4.0), Box(6, 2, 3.0, 3.0)]
        cache = build_feature_cache(image_to_tensor(img), params, MINI, None)
        batch = seg_forward_batch(cache, boxes, params, MINI, None)
        for i, box in enumerate(boxes):
            _, dm, _ = seg_forward(feat, box, params, MINI)
            # BLAS may pick different kernels for different batch heights, so
            # single- and batched-path values agree to rounding, not bitwise
            np.testing.assert_allclose(
                batch.vvec.data[i].reshape(2, 4, 4), dm.v.data,
                rtol=1e-12, atol=1e-14)

    def test_end_to_end_gradient(self):
        params = mini_params(seed=8)
        img = rand_image(seed=8)
        box = Box(4, 4, 5.5, 6.5)
        target = np.random.default_rng(0).integers(0, 2, size=(4, 4)).astype(float)

        def f(ins, tape):
            feat = backbone_forward(image_to_tensor(img), params, MINI, tape)
            _, dm, _ = seg_forward(feat, box, params, MINI, tape)
            return pixel_ce_loss(dm.v, target, tape)

        for name in ("ae.enc.w", "ae.dec.b", "seg.conv1.w", "backbone.conv2.w"):
            rep = grad_check(f, [params[name]])
            assert rep.passed, f"{name}: {rep}"


class TestSegTarget:
    def test_mask_filling_box_gives_all_ones(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 2:10] = True
        tgt = seg_target(mask, Box.from_corners(2, 4, 10, 12), 5)
        np.testing.assert_array_equal(tgt, np.ones((5, 5)))

    def test_half_on_mask_left_half(self):
        # mask covers image columns 0..8 of 16; a box over columns 0..16 sees
        # ones in its left half and zeros in its right half at any M
        mask = np.zeros((16, 16), dtype=bool)
        mask[:, :8] = True
        for m in (4, 6, 8):
            tgt = seg_target(mask, Box.from_corners(0, 0, 16, 16), m)
            np.testing.assert_array_equal(tgt[:, :m // 2], np.ones((m, m // 2)))
            np.testing.assert_array_equal(tgt[:, m // 2:], np.zeros((m, m - m // 2)))

    def test_nearest_neighbour_oracle(self):
        rng = np.random.default_rng(3)
        mask = rng.integers(0, 2, size=(16, 16)).astype(bool)
        box = Box.from_corners(1.5, 2.5, 13.0, 11.0)
        m = 6
        tgt = seg_target(mask, box, m)
        x0, y0, x1, y1 = box.corners()
        for i in range(m):
            for j in range(m):
                px = min(max(int(np.floor(x0 + (j + 0.5) * (x1 - x0) / m)), 0), 15)
                py = min(max(int(np.floor(y0 + (i + 0.5) * (y1 - y0) / m)), 0), 15)
                assert tgt[i, j] == float(mask[py, px])

    def test_binary_output(self):
        mask = np.random.default_rng(1).integers(0, 2, size=(8, 8)).astype(bool)
        tgt = seg_target(mask, Box(4, 4, 6, 6), 4)
        assert set(np.unique(tgt)) <= {0.0, 1.0}
