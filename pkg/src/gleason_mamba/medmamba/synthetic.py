"""Seeded 4-class texture images: oriented gratings whose spatial frequency
depends on the class, with random colour mix, phase and pixel noise."""
import numpy as np

CLASS_FREQUENCIES = (1.5, 3.0, 5.0, 8.0)  # cycles per image side


def make_textures(n, size=32, seed=0, noise=0.3, frequencies=CLASS_FREQUENCIES):
    """Returns ``X (n, 3, size, size)`` float64 and balanced labels ``y (n,)``."""
    rng = np.random.default_rng(seed)
    k = len(frequencies)
    y = np.arange(n) % k
    y = y[rng.permutation(n)]
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    X = np.empty((n, 3, size, size))
    for i in range(n):
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        f = frequencies[y[i]] * rng.uniform(0.9, 1.1)
        wave = np.sin(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        colour = rng.uniform(0.5, 1.0, size=3)
        X[i] = colour[:, None, None] * wave[None] + noise * rng.standard_normal((3, size, size))
    return X, y


def to_uint8(X):
    """Map roughly [-2, 2] floats into 8-bit images ``(n, size, size, 3)``."""
    img = np.clip(np.round((X + 2.0) * 63.75), 0, 255).astype(np.uint8)
    return img.transpose(0, 2, 3, 1)


def from_uint8(img):
    """Inverse of :func:`to_uint8` up to quantization: ``(n, H, W, 3)`` -> ``(n, 3, H, W)``."""
    return img.astype(np.float64).transpose(0, 3, 1, 2) / 63.75 - 2.0
