"""DCT exactness, log-feature composition, median denoiser, residual pipeline."""

import numpy as np
import pytest

from dfbench import features as F


def dct2_reference(x):
    """Direct double-sum evaluation of the orthonormal 2-D DCT-II."""
    n = x.shape[0]
    out = np.zeros((n, n))
    for k in range(n):
        for l in range(n):
            ak = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
            al = np.sqrt(1.0 / n) if l == 0 else np.sqrt(2.0 / n)
            acc = 0.0
            for m in range(n):
                for p in range(n):
                    acc += (
                        x[m, p]
                        * np.cos(np.pi * (2 * m + 1) * k / (2 * n))
                        * np.cos(np.pi * (2 * p + 1) * l / (2 * n))
                    )
            out[k, l] = ak * al * acc
    return out


class TestDct:
    def test_constant_image_dc_only(self):
        coeffs = F.dct2d(np.ones((8, 8)))
        assert abs(coeffs[0, 0] - 8.0) < 1e-12
        off = coeffs.copy()
        off[0, 0] = 0.0
        assert np.max(np.abs(off)) < 1e-12

    def test_two_by_two_formula_oracle(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(F.dct2d(x), dct2_reference(x), atol=1e-12)

    def test_random_small_formula_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(5, 5))
        np.testing.assert_allclose(F.dct2d(x), dct2_reference(x), atol=1e-12)

    def test_roundtrip_and_parseval_100_images(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            x = rng.random((64, 64))
            c = F.dct2d(x)
            assert np.max(np.abs(F.idct2d(c) - x)) < 1e-9
            assert abs(np.sum(x * x) - np.sum(c * c)) < 1e-9

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(7)
        batch = rng.random((4, 16, 16))
        out = F.dct2d(batch)
        for i in range(4):
            np.testing.assert_allclose(out[i], F.dct2d(batch[i]), atol=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            F.dct2d(np.zeros((4, 6)))


class TestLogDctFeatures:
    def test_constant_image_values(self):
        n = 8
        feats = F.log_dct_features(np.ones((n, n)))
        assert feats.shape == (n * n,)
        assert abs(feats[0] - np.log(n + 1e-12)) < 1e-12
        # off-DC coefficients are ~1e-14 rounding residue, shifting the log by ~1e-2
        np.testing.assert_allclose(feats[1:], np.log(1e-12), atol=0.02)

    def test_scaling_monotone(self):
        rng = np.random.default_rng(8)
        x = rng.random((16, 16)) * 0.5
        f1 = F.log_dct_features(x)
        f2 = F.log_dct_features(2.0 * x)
        assert np.all(f2 >= f1 - 1e-12)

    def test_composition_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.random((32, 32))
        want = np.log(np.abs(F.dct2d(x)) + 1e-12).ravel()
        np.testing.assert_array_equal(F.log_dct_features(x), want)

    def test_epsilon_validated(self):
        with pytest.raises(ValueError):
            F.DctConfig(log_epsilon=0.0)


class TestMedianDenoise:
    def test_constant_unchanged(self):
        x = np.full((6, 6), 0.3)
        np.testing.assert_array_equal(F.median_denoise(x), x)

    def test_impulse_removed(self):
        x = np.full((7, 7), 0.5)
        x[3, 3] = 1.0
        np.testing.assert_array_equal(F.median_denoise(x), np.full((7, 7), 0.5))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(10)
        x = rng.random((5, 5))
        xp = np.pad(x, 1, mode="edge")
        want = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                want[i, j] = np.median(xp[i : i + 3, j : j + 3])
        np.testing.assert_array_equal(F.median_denoise(x, 3), want)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            F.median_denoise(np.zeros((4, 4)), k=2)

    def test_batched(self):
        rng = np.random.default_rng(11)
        batch = rng.random((3, 8, 8))
        out = F.median_denoise(batch)
        for i in range(3):
            np.testing.assert_array_equal(out[i], F.median_denoise(batch[i]))


class TestResidualFeatures:
    def test_constant_image_all_log_eps(self):
        feats = F.residual_features(np.full((8, 8), 0.7))
        np.testing.assert_allclose(feats, np.log(1e-12), atol=1e-6)

    def test_lengths(self):
        x = np.random.default_rng(12).random((16, 16))
        assert F.residual_features(x).shape == (256,)
        assert F.combined_features(x).shape == (512,)

    def test_composition_oracle(self):
        x = np.random.default_rng(13).random((16, 16))
        want = F.log_dct_features(x - F.median_denoise(x))
        np.testing.assert_array_equal(F.residual_features(x), want)

    def test_combined_is_concatenation(self):
        x = np.random.default_rng(14).random((16, 16))
        want = np.concatenate([F.log_dct_features(x), F.residual_features(x)])
        np.testing.assert_array_equal(F.combined_features(x), want)

    def test_pure_function_bitwise(self):
        x = np.random.default_rng(15).random((16, 16))
        a = F.combined_features(x)
        b = F.combined_features(x)
        assert a.tobytes() == b.tobytes()
