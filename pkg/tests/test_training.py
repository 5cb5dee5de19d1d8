"""Training loop behavior: freezing, sharing, determinism, divergence."""

import numpy as np
import pytest

from altseg.backbone import Backbone, BackboneConfig
from altseg.fusion import Fusion, FusionConfig
from altseg.tensor import ShapeError, Tensor
from altseg.training import (SGD, TrainConfig, TrainingDiverged, TrainPair,
                             fst_loss, save_history, train_hr_branch,
                             train_lr_branch)

from conftest import lattice_frames


def hr_config():
    return BackboneConfig(in_channels=1, hidden=6, feature_channels=4,
                          classes=3, alpha=1.0)


def lr_config():
    return BackboneConfig(in_channels=1, hidden=6, feature_channels=4,
                          classes=3, alpha=0.5)


def make_samples(rng, count=3, h=16, w=16):
    frames = lattice_frames(rng, count, 1, h, w)
    return [(frames[i], rng.integers(0, 3, (h, w))) for i in range(count)]


def make_pairs(rng, count=2, h=16, w=16):
    pairs = []
    for _ in range(count):
        frames = lattice_frames(rng, 2, 1, h, w)
        pairs.append(TrainPair(
            keyframe=frames[0], frame=frames[1],
            motion=rng.integers(-1, 2, (2, h, w)),
            labels=rng.integers(0, 3, (h, w)),
            key_index=0, frame_index=1))
    return pairs


def param_bytes(model):
    return {name: t.data.tobytes() for name, t in model.params.items()}


class TestConfigAndLoss:
    def test_negative_epochs_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=-1)

    def test_unknown_loss_variant_rejected(self):
        with pytest.raises(ValueError, match="loss_variant"):
            TrainConfig(loss_variant="l1")

    def test_fst_loss_splits_into_terms(self, rng):
        logits = Tensor(rng.standard_normal((3, 8, 8)))
        labels = rng.integers(0, 3, (8, 8))
        fused = Tensor(rng.standard_normal((4, 8, 8)))
        target = Tensor(rng.standard_normal((4, 8, 8)))
        total, ce, aux = fst_loss(logits, labels, fused, target)
        np.testing.assert_allclose(total.item(), ce.item() + aux.item(), atol=1e-12)

    def test_fst_loss_rejects_mismatched_features(self, rng):
        logits = Tensor(rng.standard_normal((3, 8, 8)))
        with pytest.raises(ShapeError, match="shapes differ"):
            fst_loss(logits, np.zeros((8, 8), dtype=int),
                     Tensor(np.zeros((4, 8, 8))), Tensor(np.zeros((4, 6, 8))))


class TestSGD:
    def test_momentum_update_by_hand(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9])
        p.grad = np.array([1.0])
        opt.step()
        # buffer = 0.5 * 1 + 1 = 1.5
        np.testing.assert_allclose(p.data, [0.75])

    def test_none_grad_is_skipped(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, [2.0])


class TestHrTraining:
    def test_zero_epochs_changes_nothing(self, rng):
        model = Backbone(hr_config(), seed=1)
        before = param_bytes(model)
        history = train_hr_branch(model, make_samples(rng), TrainConfig(epochs=0))
        assert history == []
        assert param_bytes(model) == before

    def test_zero_learning_rate_changes_nothing(self, rng):
        model = Backbone(hr_config(), seed=1)
        before = param_bytes(model)
        history = train_hr_branch(model, make_samples(rng),
                                  TrainConfig(epochs=1, lr=0.0))
        assert len(history) == 3
        assert param_bytes(model) == before

    def test_loss_decreases_on_repeated_sample(self, rng):
        model = Backbone(hr_config(), seed=1)
        samples = make_samples(rng, count=1)
        history = train_hr_branch(model, samples,
                                  TrainConfig(epochs=30, lr=0.05))
        assert history[-1][1] < history[0][1]

    def test_reduced_scale_branch_trains_on_full_grid_labels(self, rng):
        # logits at the branch grid are resized up to the label grid
        model = Backbone(BackboneConfig(1, 6, 4, 3, 0.5), seed=1)
        samples = make_samples(rng, count=1)
        history = train_hr_branch(model, samples,
                                  TrainConfig(epochs=20, lr=0.05))
        assert history[-1][1] < history[0][1]

    def test_training_is_deterministic(self, rng):
        samples = make_samples(rng)
        runs = []
        for _ in range(2):
            model = Backbone(hr_config(), seed=4)
            h = train_hr_branch(model, samples, TrainConfig(epochs=2, seed=11))
            runs.append((h, param_bytes(model)))
        assert runs[0] == runs[1]

    def test_history_rows_are_step_total_ce_zero(self, rng):
        model = Backbone(hr_config(), seed=1)
        history = train_hr_branch(model, make_samples(rng), TrainConfig(epochs=2))
        assert [row[0] for row in history] == list(range(6))
        for _, total, ce, aux in history:
            assert total == ce
            assert aux == 0.0

    def test_nan_input_diagnosed_at_step_zero(self, rng):
        model = Backbone(hr_config(), seed=1)
        samples = [(np.full((1, 16, 16), np.nan), rng.integers(0, 3, (16, 16)))]
        with pytest.raises(TrainingDiverged) as info:
            train_hr_branch(model, samples, TrainConfig(epochs=1))
        assert info.value.step == 0
        assert info.value.term == "cross-entropy"


class TestLrTraining:
    def setup_models(self):
        hr = Backbone(hr_config(), seed=2)
        lr = Backbone(lr_config(), seed=3)
        fusion = Fusion(FusionConfig(variant="la", channels=4, neighborhood=3),
                        seed=4)
        return hr, lr, fusion

    def test_hr_branch_stays_bit_identical(self, rng):
        hr, lr, fusion = self.setup_models()
        before = param_bytes(hr)
        train_lr_branch(lr, fusion, hr, make_pairs(rng), TrainConfig(epochs=2))
        assert param_bytes(hr) == before

    def test_final_conv_is_shared_and_frozen(self, rng):
        hr, lr, fusion = self.setup_models()
        train_lr_branch(lr, fusion, hr, make_pairs(rng), TrainConfig(epochs=1))
        assert lr.params["final_w"] is hr.params["final_w"]
        assert lr.params["final_b"] is hr.params["final_b"]
        assert not lr.params["final_w"].requires_grad

    def test_non_final_parameters_do_move(self, rng):
        hr, lr, fusion = self.setup_models()
        before = param_bytes(lr)
        fusion_before = param_bytes(fusion)
        train_lr_branch(lr, fusion, hr, make_pairs(rng),
                        TrainConfig(epochs=1, lr=0.05))
        after = param_bytes(lr)
        assert any(after[n] != before[n] for n in before if not n.startswith("final_"))
        assert param_bytes(fusion) != fusion_before

    def test_history_totals_are_term_sums(self, rng):
        hr, lr, fusion = self.setup_models()
        history = train_lr_branch(lr, fusion, hr, make_pairs(rng),
                                  TrainConfig(epochs=1))
        assert len(history) == 2
        for _, total, ce, aux in history:
            np.testing.assert_allclose(total, ce + aux, atol=1e-12)
            assert aux > 0.0

    def test_kl_variant_trains(self, rng):
        hr, lr, fusion = self.setup_models()
        history = train_lr_branch(lr, fusion, hr, make_pairs(rng),
                                  TrainConfig(epochs=1, loss_variant="kl"))
        for _, total, ce, aux in history:
            assert np.isfinite(total)
            assert aux >= -1e-12  # KL term is nonnegative

    def test_deterministic_given_seed(self, rng):
        pairs = make_pairs(rng)
        runs = []
        for _ in range(2):
            hr, lr, fusion = self.setup_models()
            h = train_lr_branch(lr, fusion, hr, pairs,
                                TrainConfig(epochs=2, seed=5))
            runs.append((h, param_bytes(lr), param_bytes(fusion)))
        assert runs[0] == runs[1]

    def test_nan_keyframe_diagnosed(self, rng):
        hr, lr, fusion = self.setup_models()
        pairs = make_pairs(rng, count=1)
        pairs[0].keyframe[...] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            train_lr_branch(lr, fusion, hr, pairs, TrainConfig(epochs=1))
        assert info.value.step == 0


class TestHistoryFile:
    def test_round_trips_through_csv(self, tmp_path):
        history = [(0, 1.5, 1.0, 0.5), (1, 0.75, 0.5, 0.25)]
        path = tmp_path / "h.csv"
        save_history(path, history)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,total,ce,aux"
        for row, line in zip(history, lines[1:]):
            parts = line.split(",")
            assert int(parts[0]) == row[0]
            assert [float(p) for p in parts[1:]] == list(row[1:])
