"""Synthetic image generators shared by the test modules."""

import numpy as np


def smooth_image(rng, height, width, channels=1, blobs=12):
    """Piecewise-smooth test picture in [0, 1]: gradients, blobs and a few edges."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((height, width, channels))
    for c in range(channels):
        img = rng.uniform(0.2, 0.8) + rng.uniform(-0.3, 0.3) * (xx / width) + rng.uniform(-0.3, 0.3) * (yy / height)
        for _ in range(blobs):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            s = rng.uniform(0.05, 0.3) * max(height, width)
            img += rng.uniform(-0.4, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        a, b = rng.uniform(-1, 1, size=2)
        img += 0.15 * ((a * (xx - width / 2) + b * (yy - height / 2)) > 0)
        img += 0.02 * rng.normal(size=img.shape)
        out[..., c] = img
    out = np.clip(out, 0.0, 1.0)
    return out[..., 0] if channels == 1 else out


def patch_set(seed, count, size):
    rng = np.random.default_rng(seed)
    return np.stack([smooth_image(rng, size, size)[None] for _ in range(count)])


def central_difference(f, arr, h=1e-5):
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)
