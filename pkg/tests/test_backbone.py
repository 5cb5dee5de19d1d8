"""Branch network contracts: shapes, scaling law, cost model, checkpoints."""

import numpy as np
import pytest

from altseg.backbone import MIN_BRANCH_EXTENT, Backbone, BackboneConfig
from altseg.tensor import FileFormatError, ShapeError, Tensor


def small_config(alpha=1.0):
    return BackboneConfig(in_channels=1, hidden=8, feature_channels=4,
                          classes=3, alpha=alpha)


class TestConfig:
    @pytest.mark.parametrize("alpha", [0.0, -0.5, 1.5])
    def test_alpha_outside_unit_interval_rejected(self, alpha):
        with pytest.raises(ValueError, match="alpha"):
            BackboneConfig(alpha=alpha)

    def test_nonpositive_extents_rejected(self):
        with pytest.raises(ValueError, match="classes"):
            BackboneConfig(classes=0)
        with pytest.raises(ValueError, match="hidden"):
            BackboneConfig(hidden=-1)

    def test_full_scale_is_valid(self):
        assert BackboneConfig(alpha=1.0).alpha == 1.0


class TestBranchExtent:
    def test_half_scale(self):
        model = Backbone(small_config(0.5))
        assert model.branch_extent(32, 48) == (16, 24)

    def test_full_scale_identity(self):
        model = Backbone(small_config(1.0))
        assert model.branch_extent(32, 48) == (32, 48)

    def test_rounds_to_nearest(self):
        model = Backbone(small_config(0.75))
        # 0.75 is dyadic so the products are exact: 22.5 rounds half to
        # even giving 22, and 33.0 stays 33
        assert model.branch_extent(30, 44) == (22, 33)

    def test_below_minimum_rejected(self):
        model = Backbone(small_config(0.5))
        with pytest.raises(ShapeError, match=str(MIN_BRANCH_EXTENT)):
            model.branch_extent(14, 48)


class TestForward:
    def test_feature_and_logit_shapes_full_scale(self, rng):
        model = Backbone(small_config(1.0), seed=1)
        frame = Tensor(rng.uniform(0, 1, (1, 32, 48)))
        feats = model.forward_features(frame)
        assert feats.data.shape == (4, 32, 48)
        logits = model.forward_logits(feats)
        assert logits.data.shape == (3, 32, 48)

    def test_feature_shape_on_branch_grid(self, rng):
        model = Backbone(small_config(0.5), seed=1)
        feats = model.forward_features(Tensor(rng.uniform(0, 1, (1, 32, 48))))
        assert feats.data.shape == (4, 16, 24)

    def test_rejects_wrong_channel_counts(self, rng):
        model = Backbone(small_config(1.0))
        with pytest.raises(ShapeError, match="channels"):
            model.forward_features(Tensor(rng.uniform(0, 1, (2, 32, 48))))
        with pytest.raises(ShapeError, match="channels"):
            model.forward_logits(Tensor(np.zeros((7, 8, 8))))

    def test_forward_is_deterministic(self, rng):
        model = Backbone(small_config(0.5), seed=3)
        frame = Tensor(rng.uniform(0, 1, (1, 16, 16)))
        a = model.forward_features(frame).data
        b = model.forward_features(frame).data
        np.testing.assert_array_equal(a, b)

    def test_seed_controls_initialization(self):
        a = Backbone(small_config(), seed=1)
        b = Backbone(small_config(), seed=1)
        c = Backbone(small_config(), seed=2)
        np.testing.assert_array_equal(a.params["enc1_w"].data, b.params["enc1_w"].data)
        assert not np.array_equal(a.params["enc1_w"].data, c.params["enc1_w"].data)

    def test_zero_weights_give_zero_features(self, rng):
        model = Backbone(small_config(1.0))
        for t in model.parameters():
            t.data[...] = 0.0
        feats = model.forward_features(Tensor(rng.uniform(0, 1, (1, 16, 16))))
        np.testing.assert_array_equal(feats.data, np.zeros((4, 16, 16)))

    def test_identity_final_conv_passes_features_through(self, rng):
        cfg = BackboneConfig(in_channels=1, hidden=8, feature_channels=3,
                             classes=3, alpha=1.0)
        model = Backbone(cfg, seed=2)
        model.params["final_w"].data[...] = np.eye(3).reshape(3, 3, 1, 1)
        model.params["final_b"].data[...] = 0.0
        feats = model.forward_features(Tensor(rng.uniform(0, 1, (1, 16, 16))))
        logits = model.forward_logits(feats)
        np.testing.assert_allclose(logits.data, feats.data, atol=1e-12)


class TestFlops:
    def test_single_conv_reference_count(self):
        # one 3x3 conv, 1 channel in and out, 8x8 output: 64 * 9 * 2
        assert 2 * 3 * 3 * 1 * 1 * 8 * 8 == 1152

    def test_alpha_squared_law_is_exact(self):
        full = Backbone(small_config(1.0)).flops_of(32, 48)
        half = Backbone(small_config(0.5)).flops_of(32, 48)
        assert half["conv"] / full["conv"] == 0.25

    def test_total_is_component_sum(self):
        parts = Backbone(small_config(0.5)).flops_of(32, 48)
        assert parts["total"] == parts["conv"] + parts["resize"] + parts["pointwise"]

    def test_full_scale_does_no_resizing(self):
        parts = Backbone(small_config(1.0)).features_flops(32, 32)
        # the encoder downsamples by 4, so features are resized back up,
        # but there is no input resize at full scale
        assert parts["resize"] == 8 * 4 * 32 * 32

    def test_final_conv_cost(self):
        model = Backbone(small_config())
        assert model.final_conv_flops(16, 24) == 2 * 4 * 3 * 16 * 24

    def test_counts_are_positive_integers(self):
        parts = Backbone(small_config(0.5)).flops_of(32, 48)
        for v in parts.values():
            assert v > 0 and float(v) == int(v)


class TestCheckpoints:
    def test_round_trip(self, tmp_path, rng):
        model = Backbone(small_config(0.5), seed=7)
        path = tmp_path / "m.arwt"
        model.save_weights(path)
        loaded = Backbone.load_weights(path)
        assert loaded.config == model.config
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          model.params[name].data)
        frame = Tensor(rng.uniform(0, 1, (1, 16, 16)))
        np.testing.assert_array_equal(model.forward_features(frame).data,
                                      loaded.forward_features(frame).data)

    def test_corrupt_file_is_diagnosed(self, tmp_path):
        path = tmp_path / "m.arwt"
        Backbone(small_config()).save_weights(path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(blob)
        with pytest.raises(FileFormatError):
            Backbone.load_weights(path)

    def test_truncated_file_is_diagnosed(self, tmp_path):
        path = tmp_path / "m.arwt"
        Backbone(small_config()).save_weights(path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FileFormatError):
            Backbone.load_weights(path)
