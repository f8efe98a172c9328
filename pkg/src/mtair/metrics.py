"""Image quality metrics, evaluated at 64-bit precision.

Both metrics accept channel-last arrays (or Tensor wrappers) shaped
(B,H,W,C), (H,W,C), or (H,W) and return python floats.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as_batched(x, name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 2-4 dims, got shape {arr.shape}")
    return arr


def _pair(a, b, name: str):
    a = _as_batched(a, name)
    b = _as_batched(b, name)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _window_means(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Gaussian-weighted mean of every valid window: (B,H,W,C) -> (B,h',w',C)."""
    size = win.shape[0]
    patches = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(1, 2))
    return np.einsum("bijckl,kl->bijc", patches, win, optimize=True)


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean structural similarity over all valid 11x11 windows and channels."""
    a, b = _pair(a, b, "ssim")
    _, h, w, _ = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(
            f"ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    win = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx = _window_means(a, win)
    my = _window_means(b, win)
    vx = _window_means(a * a, win) - mx * mx
    vy = _window_means(b * b, win) - my * my
    cov = _window_means(a * b, win) - mx * my
    score = ((2 * mx * my + c1) * (2 * cov + c2)) / (
        (mx * mx + my * my + c1) * (vx + vy + c2)
    )
    return float(score.mean())
