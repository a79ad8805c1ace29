"""Quality metrics and rate-distortion tooling: PSNR, MS-SSIM, BD-rate."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import CodecError, ShapeError

PSNR_CAP_DB = 100.0
PLANE_WEIGHTS = (6 / 8, 1 / 8, 1 / 8)

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WINDOW = 11
MSSSIM_SIGMA = 1.5
MSSSIM_MIN_SIZE = MSSSIM_WINDOW * 2 ** (len(MSSSIM_WEIGHTS) - 1)


class ImageTooSmallError(CodecError, ValueError):
    pass


class NoOverlapError(CodecError, ValueError):
    pass


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ShapeError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def mse(ref, test) -> float:
    ref, test = _pair(ref, test)
    return float(np.mean((ref - test) ** 2))


def psnr(ref, test, peak: float = 1.0) -> float:
    """PSNR in dB, capped at 100 dB for identical inputs."""
    err = mse(ref, test)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / err))


def weighted_psnr(y_db: float, cb_db: float, cr_db: float, weights=PLANE_WEIGHTS) -> float:
    """Weighted average of per-plane PSNR values (6:1:1 by default)."""
    wy, wb, wr = weights
    return (wy * y_db + wb * cb_db + wr * cr_db) / (wy + wb + wr)


def _gaussian_window(size=MSSSIM_WINDOW, sigma=MSSSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_terms(x, y, win, c1, c2):
    def filt(a):
        return convolve2d(a, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(luminance * cs)), float(np.mean(cs))


def _halve(a):
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def ms_ssim(ref, test, peak: float = 1.0) -> float:
    """Five-scale MS-SSIM of two single-plane images.

    Negative contrast-structure terms are clipped to zero before taking
    powers, which keeps the index in [0, 1].
    """
    x, y = _pair(ref, test)
    if x.ndim != 2:
        raise ShapeError(f"ms_ssim expects a 2-D plane, got shape {x.shape}")
    if min(x.shape) < MSSSIM_MIN_SIZE:
        raise ImageTooSmallError(
            f"MS-SSIM needs both extents >= {MSSSIM_MIN_SIZE}, got {x.shape}"
        )
    win = _gaussian_window()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    value = 1.0
    levels = len(MSSSIM_WEIGHTS)
    for level, weight in enumerate(MSSSIM_WEIGHTS):
        ssim, cs = _ssim_terms(x, y, win, c1, c2)
        term = ssim if level == levels - 1 else cs
        value *= max(term, 0.0) ** weight
        if level < levels - 1:
            x, y = _halve(x), _halve(y)
    return float(min(max(value, 0.0), 1.0))


# --------------------------------------------------------------------------
# RD curves

@dataclass
class RdPoint:
    bpp: float
    psnr_db: float
    msssim: float = float("nan")


@dataclass
class RdCurve:
    label: str
    points: list = field(default_factory=list)

    def sorted(self) -> "RdCurve":
        return RdCurve(self.label, sorted(self.points, key=lambda p: p.bpp))

    def validate(self):
        if len(self.points) < 4:
            raise ValueError(f"curve {self.label!r} has {len(self.points)} points, BD-rate needs at least 4")
        bpp = [p.bpp for p in self.points]
        if any(b <= 0 or not math.isfinite(b) for b in bpp):
            raise ValueError(f"curve {self.label!r} has non-positive or non-finite bpp")
        if any(b1 >= b2 for b1, b2 in zip(bpp, bpp[1:])):
            raise ValueError(f"curve {self.label!r} bpp values must be strictly increasing")
        if any(not math.isfinite(p.psnr_db) for p in self.points):
            raise ValueError(f"curve {self.label!r} has non-finite PSNR")


RD_FIELDS = ("label", "bpp", "psnr_db", "msssim")


def write_rd_csv(curves, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RD_FIELDS)
    for curve in curves:
        for p in curve.points:
            w.writerow([curve.label, repr(float(p.bpp)), repr(float(p.psnr_db)), repr(float(p.msssim))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_rd_csv(path) -> dict:
    """Curves keyed by label, in file order."""
    curves = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RD_FIELDS[:3]) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ms = row.get("msssim") or "nan"
            curves.setdefault(row["label"], RdCurve(row["label"])).points.append(
                RdPoint(float(row["bpp"]), float(row["psnr_db"]), float(ms))
            )
    return curves


def _fit(curve: RdCurve):
    c = curve.sorted()
    c.validate()
    q = np.array([p.psnr_db for p in c.points])
    r = np.log10([p.bpp for p in c.points])
    return np.polyfit(q, r, 3), q.min(), q.max()


def bd_rate(anchor: RdCurve, test: RdCurve) -> float:
    """Bjøntegaard delta rate in percent; negative means the test saves bits.

    log10(bpp) is fitted as a cubic in PSNR for each curve and the fits are
    integrated in closed form over the common PSNR interval.
    """
    pa, lo_a, hi_a = _fit(anchor)
    pt, lo_t, hi_t = _fit(test)
    lo, hi = max(lo_a, lo_t), min(hi_a, hi_t)
    if not hi > lo:
        raise NoOverlapError(f"PSNR ranges [{lo_a}, {hi_a}] and [{lo_t}, {hi_t}] do not overlap")
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    avg = (area_t - area_a) / (hi - lo)
    return float((10.0**avg - 1.0) * 100.0)
