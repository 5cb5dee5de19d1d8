"""Autograd semantics, loss oracles, and the tensor golden-file format."""

import numpy as np
import pytest

from altseg import tensor as T
from altseg.tensor import (FileFormatError, ShapeError, Tensor, cross_entropy,
                           grad_check, kl_logits, load_labels, load_tensor, mse,
                           relu, save_labels, save_tensor, softmax)


class TestAutograd:
    def test_add_sub_scale_chain(self):
        a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        b = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
        # loss = mean((2a - b)^2); d/da = 4(2a - b)/n, d/db = -2(2a - b)/n
        out = mse(2.0 * a - b, Tensor(np.zeros(3)))
        out.backward()
        d = 2.0 * a.data - b.data
        np.testing.assert_allclose(a.grad, 4.0 * d / 3.0)
        np.testing.assert_allclose(b.grad, -2.0 * d / 3.0)

    def test_reused_node_accumulates(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        out = mse(a + a, Tensor(np.zeros(1)))
        out.backward()
        # loss = (2a)^2, d/da = 8a
        np.testing.assert_allclose(a.grad, 8.0 * a.data)

    def test_backward_needs_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (a + a).backward()

    def test_no_grad_tracking_when_not_requested(self):
        a = Tensor(np.ones(3))
        out = a + a
        assert not out.requires_grad
        assert out._parents == ()

    def test_relu_gates_gradient(self):
        a = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
        mse(relu(a), Tensor(np.zeros(3))).backward()
        np.testing.assert_allclose(a.grad, [0.0, 2 * 0.5 / 3, 2 * 3.0 / 3])

    def test_shape_mismatch_is_diagnosed(self):
        with pytest.raises(ShapeError, match="shapes"):
            T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_rank_and_extent_limits(self):
        with pytest.raises(ShapeError, match="rank"):
            Tensor(np.ones((1, 1, 1, 1, 1)))
        with pytest.raises(ShapeError, match="extents"):
            Tensor(np.ones((0, 3)))


class TestSoftmax:
    def test_two_class_example(self):
        out = softmax(Tensor(np.array([1.0, -1.0])))
        np.testing.assert_allclose(np.round(out.data, 4), [0.8808, 0.1192])

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.standard_normal((5, 7)))
        out = softmax(x, axis=0)
        np.testing.assert_allclose(out.data.sum(axis=0), np.ones(7), atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        a = softmax(Tensor(x), axis=0).data
        b = softmax(Tensor(x + 123.456), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_temperature_scale(self, rng):
        x = rng.standard_normal(6)
        a = softmax(Tensor(x), scale=0.25).data
        b = softmax(Tensor(0.25 * x)).data
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_gradient_matches_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))

        def f(t):
            return mse(softmax(t, axis=0, scale=0.7), Tensor(w))

        assert grad_check(f, [x]) < 1e-6


class TestCrossEntropy:
    def test_hand_computed_value(self):
        logits = Tensor(np.log(np.array([[[0.7]], [[0.3]]])))
        out = cross_entropy(logits, np.array([[0]]))
        np.testing.assert_allclose(out.item(), -np.log(0.7), atol=1e-12)

    def test_mean_over_non_ignored_only(self, rng):
        logits = Tensor(rng.standard_normal((3, 4, 4)))
        labels = rng.integers(0, 3, (4, 4))
        labels[0] = -1
        z = logits.data - logits.data.max(axis=0)
        logp = z - np.log(np.exp(z).sum(axis=0))
        want = np.mean([-logp[labels[y, x], y, x]
                        for y in range(1, 4) for x in range(4)])
        np.testing.assert_allclose(
            cross_entropy(logits, labels).item(), want, atol=1e-12)

    def test_all_ignored_warns_and_returns_zero(self):
        logits = Tensor(np.zeros((2, 2, 2)))
        with pytest.warns(RuntimeWarning):
            out = cross_entropy(logits, np.full((2, 2), -1))
        assert out.item() == 0.0

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="labels outside"):
            cross_entropy(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 5))

    def test_gradient(self, rng):
        labels = rng.integers(0, 3, (4, 5))
        labels[2, 2] = -1
        x = Tensor(rng.standard_normal((3, 4, 5)))
        assert grad_check(lambda t: cross_entropy(t, labels), [x]) < 1e-6


class TestKLLogits:
    def test_zero_when_distributions_match(self, rng):
        x = rng.standard_normal((3, 4, 4))
        out = kl_logits(Tensor(x), Tensor(x + 7.0))
        np.testing.assert_allclose(out.item(), 0.0, atol=1e-12)

    def test_nonnegative_and_hand_value(self):
        s = Tensor(np.zeros((2, 1, 1)))
        t = Tensor(np.array([np.log(0.8), np.log(0.2)]).reshape(2, 1, 1))
        want = 0.8 * np.log(0.8 / 0.5) + 0.2 * np.log(0.2 / 0.5)
        np.testing.assert_allclose(kl_logits(s, t).item(), want, atol=1e-12)

    def test_gradient_reaches_student_only(self, rng):
        s = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
        t = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
        kl_logits(s, t).backward()
        assert s.grad is not None
        assert t.grad is None

    def test_gradient_matches_finite_differences(self, rng):
        teacher = Tensor(rng.standard_normal((3, 3, 3)))
        x = Tensor(rng.standard_normal((3, 3, 3)))
        assert grad_check(lambda t: kl_logits(t, teacher), [x]) < 1e-6


class TestGradCheck:
    def test_eps_bounds_enforced(self):
        x = Tensor(np.ones(2))
        with pytest.raises(ValueError, match="eps"):
            grad_check(lambda t: mse(t, Tensor(np.zeros(2))), [x], eps=0.5)
        with pytest.raises(ValueError, match="eps"):
            grad_check(lambda t: mse(t, Tensor(np.zeros(2))), [x], eps=1e-9)

    def test_quadratic_is_tiny_error(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        err = grad_check(lambda t: mse(t, Tensor(np.ones((3, 3)))), [x])
        assert err < 1e-9


class TestTensorFiles:
    @pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 4), (2, 2, 2, 2)])
    def test_round_trip(self, shape, rng, tmp_path):
        arr = rng.standard_normal(shape)
        path = tmp_path / "t.tnsr"
        save_tensor(path, arr)
        got = load_tensor(path)
        assert got.shape == shape
        np.testing.assert_array_equal(got, arr)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.tnsr"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(FileFormatError, match="magic"):
            load_tensor(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "t.tnsr"
        save_tensor(path, rng.standard_normal((3, 3)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FileFormatError, match="payload"):
            load_tensor(path)

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        path = tmp_path / "t.tnsr"
        save_tensor(path, rng.standard_normal(4))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FileFormatError, match="payload"):
            load_tensor(path)

    def test_oversized_rank_rejected(self, tmp_path):
        path = tmp_path / "t.tnsr"
        path.write_bytes(b"TNSR" + bytes([5]))
        with pytest.raises(FileFormatError, match="rank"):
            load_tensor(path)

    def test_label_round_trip_keeps_ignore_marker(self, tmp_path):
        labels = np.array([[0, 1], [2, -1]])
        path = tmp_path / "l.tnsr"
        save_labels(path, labels)
        got = load_labels(path)
        assert got.dtype == np.int64
        np.testing.assert_array_equal(got, labels)

    def test_non_integral_labels_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="non-integral"):
            save_labels(tmp_path / "l.tnsr", np.array([0.5]))
        path = tmp_path / "m.tnsr"
        save_tensor(path, np.array([0.25]))
        with pytest.raises(FileFormatError, match="non-integral"):
            load_labels(path)
