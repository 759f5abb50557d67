"""Image quality metrics."""

import numpy as np
from scipy.ndimage import correlate1d

PSNR_INF = float("inf")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1] (inf when equal)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter(img, win):
    # separable 'valid' filtering over the two spatial axes
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    h = len(win) // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Mean SSIM with a Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    win = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, win), _filter(y, win)
        sxx = _filter(x * x, win) - mx * mx
        syy = _filter(y * y, win) - my * my
        sxy = _filter(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
