"""Forward-pass contracts for every tensor op, checked against independent oracles."""

import math

import numpy as np
import pytest

from spirit import tensor as T


def conv2d_bruteforce(x, w, b, stride=1, padding=0, groups=1):
    """Quadruple-loop dense/grouped convolution, the reference for conv2d."""
    n, in_ch, h, width = x.shape
    out_ch, cig, k, _ = w.shape
    cog = out_ch // groups
    hp, wp = h + 2 * padding, width + 2 * padding
    xp = np.zeros((n, in_ch, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + width] = x
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.zeros((n, out_ch, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(out_ch):
            g = o // cog
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for c in range(cig):
                        for i in range(k):
                            for j in range(k):
                                acc += (
                                    xp[ni, g * cig + c, oy * stride + i, ox * stride + j]
                                    * w[o, c, i, j]
                                )
                    out[ni, o, oy, ox] = acc + b[o]
    return out


class TestConv2d:
    def test_scalar_scaling(self):
        x = T.Tensor(np.ones((1, 1, 3, 3), np.float32))
        w = T.Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
        b = T.Tensor(np.zeros(1, np.float32))
        out = T.conv2d(x, w, b)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0, np.float32))

    def test_matches_bruteforce_dense(self, rng):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((3, 4, 3, 3))
        b = rng.standard_normal(3)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1).data
        want = conv2d_bruteforce(x, w, b, stride=2, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_matches_bruteforce_grouped(self, rng):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((6, 2, 3, 3))
        b = rng.standard_normal(6)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1, groups=2).data
        want = conv2d_bruteforce(x, w, b, padding=1, groups=2)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_depthwise_equals_per_channel_conv(self, rng):
        x = rng.standard_normal((1, 3, 6, 6))
        w = rng.standard_normal((3, 1, 3, 3))
        b = rng.standard_normal(3)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1, groups=3).data
        for c in range(3):
            single = T.conv2d(
                T.Tensor(x[:, c : c + 1]), T.Tensor(w[c : c + 1]),
                T.Tensor(b[c : c + 1]), padding=1,
            ).data
            np.testing.assert_allclose(got[:, c : c + 1], single, atol=1e-6)

    def test_grouped_equals_blockdiagonal_dense(self, rng):
        # Dense conv with zeroed cross-group weights must match the grouped conv.
        x = rng.standard_normal((2, 4, 8, 8))
        wg = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        dense = np.zeros((4, 4, 3, 3))
        for o in range(4):
            g = o // 2
            dense[o, g * 2 : (g + 1) * 2] = wg[o]
        grouped = T.conv2d(T.Tensor(x), T.Tensor(wg), T.Tensor(b), padding=1, groups=2).data
        blockdiag = T.conv2d(T.Tensor(x), T.Tensor(dense), T.Tensor(b), padding=1).data
        np.testing.assert_allclose(grouped, blockdiag, atol=1e-6)

    def test_group_independence(self, rng):
        # Output channels of one group ignore input channels of the other.
        x = rng.standard_normal((1, 4, 6, 6))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        base = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1, groups=2).data
        x2 = x.copy()
        x2[:, 2:] += 5.0  # disturb only the second group's inputs
        moved = T.conv2d(T.Tensor(x2), T.Tensor(w), T.Tensor(b), padding=1, groups=2).data
        np.testing.assert_array_equal(base[:, :2], moved[:, :2])
        assert not np.allclose(base[:, 2:], moved[:, 2:])

    def test_bad_groups_raises(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4), np.float32))
        w = T.Tensor(np.zeros((2, 1, 1, 1), np.float32))
        b = T.Tensor(np.zeros(2, np.float32))
        with pytest.raises(ValueError, match="groups"):
            T.conv2d(x, w, b, groups=2)

    def test_weight_channel_mismatch_raises(self):
        x = T.Tensor(np.zeros((1, 4, 4, 4), np.float32))
        w = T.Tensor(np.zeros((2, 3, 1, 1), np.float32))
        b = T.Tensor(np.zeros(2, np.float32))
        with pytest.raises(ValueError, match="in-channel"):
            T.conv2d(x, w, b)

    def test_bias_shape_mismatch_raises(self):
        x = T.Tensor(np.zeros((1, 2, 4, 4), np.float32))
        w = T.Tensor(np.zeros((2, 2, 1, 1), np.float32))
        b = T.Tensor(np.zeros(3, np.float32))
        with pytest.raises(ValueError, match="bias"):
            T.conv2d(x, w, b)

    def test_output_spatial_dims(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 9, 9)))
        w = T.Tensor(rng.standard_normal((1, 1, 3, 3)))
        b = T.Tensor(np.zeros(1))
        out = T.conv2d(x, w, b, stride=2, padding=1)
        assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


class TestBatchNorm2d:
    def test_normalizes_batch(self, rng):
        x = T.Tensor(rng.standard_normal((4, 3, 8, 8)).astype(np.float32) * 3 + 1)
        gamma = T.Tensor(np.ones(3, np.float32))
        beta = T.Tensor(np.zeros(3, np.float32))
        state = T.BatchNormState(3)
        out = T.batchnorm2d(x, gamma, beta, state, training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)

    def test_zero_gamma_gives_beta(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        gamma = T.Tensor(np.zeros(3, np.float32))
        beta = T.Tensor(np.array([1.0, -2.0, 0.5], np.float32))
        out = T.batchnorm2d(x, gamma, beta, T.BatchNormState(3), training=True)
        for c, value in enumerate([1.0, -2.0, 0.5]):
            np.testing.assert_array_equal(out.data[:, c], np.full((2, 4, 4), value, np.float32))

    def test_eval_uses_running_stats(self, rng):
        x1 = T.Tensor(rng.standard_normal((8, 2, 4, 4)).astype(np.float32))
        gamma = T.Tensor(np.ones(2, np.float32))
        beta = T.Tensor(np.zeros(2, np.float32))
        state = T.BatchNormState(2)
        for _ in range(50):
            T.batchnorm2d(x1, gamma, beta, state, training=True)
        x2 = T.Tensor(np.zeros((1, 2, 4, 4), np.float32))
        out = T.batchnorm2d(x2, gamma, beta, state, training=False)
        expect = -state.running_mean / np.sqrt(state.running_var + 1e-5)
        np.testing.assert_allclose(out.data[0, :, 0, 0], expect, rtol=1e-5)

    def test_eval_before_train_raises(self):
        x = T.Tensor(np.zeros((1, 2, 4, 4), np.float32))
        gamma = T.Tensor(np.ones(2, np.float32))
        beta = T.Tensor(np.zeros(2, np.float32))
        with pytest.raises(RuntimeError, match="eval mode"):
            T.batchnorm2d(x, gamma, beta, T.BatchNormState(2), training=False)

    def test_channel_mismatch_raises(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4), np.float32))
        g2 = T.Tensor(np.ones(2, np.float32))
        b2 = T.Tensor(np.zeros(2, np.float32))
        with pytest.raises(ValueError, match="gamma"):
            T.batchnorm2d(x, g2, b2, T.BatchNormState(2), training=True)


class TestPoolAndUpsample:
    def test_relu(self):
        out = T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0], np.float32)))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_maxpool_2x2(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 1, 2, 2))
        out = T.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_maxpool_halves_dims(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 8, 6)).astype(np.float32))
        out = T.maxpool2d(x, 2, 2)
        assert out.shape == (2, 3, 4, 3)
        want = x.data.reshape(2, 3, 4, 2, 3, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(out.data, want)

    def test_maxpool_indivisible_raises(self):
        x = T.Tensor(np.zeros((1, 1, 5, 4), np.float32))
        with pytest.raises(ValueError, match="divisible"):
            T.maxpool2d(x, 2, 2)

    def test_upsample_constant(self):
        x = T.Tensor(np.full((1, 2, 3, 3), 0.75, np.float32))
        out = T.bilinear_upsample(x, 4)
        assert out.shape == (1, 2, 12, 12)
        np.testing.assert_allclose(out.data, 0.75, atol=1e-6)

    def test_upsample_corners_align(self):
        x = T.Tensor(np.array([[0.0, 1.0], [2.0, 3.0]], np.float64).reshape(1, 1, 2, 2))
        out = T.bilinear_upsample(x, 3).data[0, 0]
        assert out[0, 0] == pytest.approx(0.0)
        assert out[0, -1] == pytest.approx(1.0)
        assert out[-1, 0] == pytest.approx(2.0)
        assert out[-1, -1] == pytest.approx(3.0)
        # Midpoints interpolate linearly between the corners.
        assert out[0, 2] == pytest.approx(2.0 / 5.0)

    def test_upsample_matches_dense_matrix_oracle(self, rng):
        x = rng.standard_normal((1, 1, 3, 4))
        out = T.bilinear_upsample(T.Tensor(x), 2).data[0, 0]
        # Independent evaluation straight from the sampling definition.
        h, w = 3, 4
        want = np.zeros((6, 8))
        for p in range(6):
            for q in range(8):
                sy = p * (h - 1) / (6 - 1)
                sx = q * (w - 1) / (8 - 1)
                y0, x0 = int(math.floor(sy)), int(math.floor(sx))
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                ty, tx = sy - y0, sx - x0
                want[p, q] = (
                    x[0, 0, y0, x0] * (1 - ty) * (1 - tx)
                    + x[0, 0, y1, x0] * ty * (1 - tx)
                    + x[0, 0, y0, x1] * (1 - ty) * tx
                    + x[0, 0, y1, x1] * ty * tx
                )
        np.testing.assert_allclose(out, want, atol=1e-12)


class TestLosses:
    def test_mse_identity(self, rng):
        a = T.Tensor(rng.standard_normal(10).astype(np.float32))
        assert T.mse_loss(a, T.Tensor(a.data.copy())).item() == 0.0

    def test_mse_hand_value(self):
        a = T.Tensor(np.array([0.0, 0.0], np.float32))
        b = T.Tensor(np.array([1.0, 3.0], np.float32))
        assert T.mse_loss(a, b).item() == pytest.approx(5.0)
        assert T.mse_loss(b, a).item() == pytest.approx(5.0)

    def test_mse_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            T.mse_loss(T.Tensor(np.zeros(2)), T.Tensor(np.zeros(3)))

    def test_cross_entropy_uniform_logits(self):
        logits = T.Tensor(np.zeros((1, 2, 4, 4), np.float32))
        labels = np.random.default_rng(0).integers(0, 2, size=(1, 4, 4))
        assert T.pixel_cross_entropy(logits, labels).item() == pytest.approx(math.log(2.0), rel=1e-6)

    def test_cross_entropy_saturated(self):
        labels = np.random.default_rng(1).integers(0, 3, size=(1, 4, 4))
        logits = np.zeros((1, 3, 4, 4), np.float32)
        nn, hh, ww = np.indices(labels.shape)
        logits[nn, labels, hh, ww] = 20.0
        assert T.pixel_cross_entropy(T.Tensor(logits), labels).item() < 1e-6

    def test_cross_entropy_matches_bruteforce(self, rng):
        logits = rng.standard_normal((1, 2, 4, 4))
        labels = rng.integers(0, 2, size=(1, 4, 4))
        got = T.pixel_cross_entropy(T.Tensor(logits), labels).item()
        total = 0.0
        for h in range(4):
            for w in range(4):
                z = logits[0, :, h, w]
                p = np.exp(z) / np.exp(z).sum()
                total += -math.log(p[labels[0, h, w]])
        assert got == pytest.approx(total / 16.0, rel=1e-6)

    def test_cross_entropy_nonnegative(self, rng):
        for _ in range(5):
            logits = T.Tensor(rng.standard_normal((2, 3, 4, 4)) * 10)
            labels = rng.integers(0, 3, size=(2, 4, 4))
            assert T.pixel_cross_entropy(logits, labels).item() >= 0.0

    def test_cross_entropy_bad_label_names_pixel(self):
        logits = T.Tensor(np.zeros((1, 2, 2, 2), np.float32))
        labels = np.array([[[0, 1], [5, 0]]])
        with pytest.raises(ValueError, match=r"\(0, 1, 0\)"):
            T.pixel_cross_entropy(logits, labels)
