"""PSNR and SSIM behavior."""

import math

import numpy as np
import pytest

from mtair import oracles
from mtair.errors import ShapeError
from mtair.metrics import psnr, ssim
from mtair.tensor import Tensor


class TestPsnr:
    def test_identical_images_are_infinite(self, rng):
        img = rng.random((1, 16, 16, 3)).astype(np.float32)
        assert psnr(img, img.copy()) == float("inf")

    def test_known_constant_offset(self):
        a = np.zeros((8, 8), dtype=np.float64)
        b = np.full((8, 8), 0.1)
        # mse = 0.01 -> 10*log10(1/0.01) = 20 dB
        assert abs(psnr(a, b) - 20.0) < 1e-12

    def test_peak_rescales(self):
        a = np.zeros((8, 8))
        b = np.full((8, 8), 25.5)
        assert abs(psnr(a, b, peak=255.0) - 20.0) < 1e-12

    def test_matches_oracle(self, rng):
        a = rng.random((2, 12, 12, 3))
        b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
        assert abs(psnr(a, b) - oracles.psnr_oracle(a, b)) < 1e-10

    def test_accepts_tensors_and_rejects_mismatch(self, rng):
        a = Tensor(rng.random((12, 12, 3)).astype(np.float32))
        assert psnr(a, a) == float("inf")
        with pytest.raises(ShapeError):
            psnr(np.zeros((8, 8)), np.zeros((9, 8)))

    def test_more_noise_means_lower_psnr(self, rng):
        a = rng.random((16, 16, 3))
        small = np.clip(a + 0.01 * rng.standard_normal(a.shape), 0, 1)
        large = np.clip(a + 0.10 * rng.standard_normal(a.shape), 0, 1)
        assert psnr(a, small) > psnr(a, large)


class TestSsim:
    def test_identical_images_score_one(self, rng):
        img = rng.random((14, 14, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_bounded_and_symmetric(self, rng):
        a = rng.random((16, 16, 3))
        b = rng.random((16, 16, 3))
        s1, s2 = ssim(a, b), ssim(b, a)
        assert -1.0 <= s1 <= 1.0
        assert abs(s1 - s2) < 1e-12

    def test_matches_oracle(self, rng):
        a = rng.random((1, 14, 15, 2))
        b = np.clip(a + 0.08 * rng.standard_normal(a.shape), 0, 1)
        assert abs(ssim(a, b) - oracles.ssim_oracle(a, b)) < 1e-10

    def test_structure_beats_noise(self, rng):
        a = rng.random((20, 20, 1))
        shifted = np.clip(a + 0.1, 0, None)  # luminance shift keeps structure
        noisy = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, None)
        assert ssim(a, shifted) > ssim(a, noisy)

    def test_window_too_large_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))
