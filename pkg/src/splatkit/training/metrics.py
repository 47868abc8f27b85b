"""PSNR and SSIM for images in [0, 1]."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _check(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit dynamic range; +inf when identical."""
    err = mse(a, b)
    if err == 0:
        return float("inf")
    return float(10 * np.log10(1.0 / err))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ShapeError(f"expected (H, W) or (H, W, 3), got {img.shape}")


def gaussian_window(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    rows = sliding_window_view(x, len(g), axis=1) @ g
    return sliding_window_view(rows, len(g), axis=0) @ g


def ssim_map(a, b, data_range=1.0):
    a, b = _check(to_gray(a), to_gray(b))
    if min(a.shape) < WINDOW:
        raise ShapeError(f"image {a.shape} is smaller than the {WINDOW}x{WINDOW} window")
    g = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range=1.0):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) of the luma channel."""
    return float(np.mean(ssim_map(a, b, data_range)))
