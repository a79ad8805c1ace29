"""Fixed-point quantisation of rotated latents and vertical-scan tiling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bitplane import num_bitplanes
from .errors import ShapeError

DEFAULT_PRECISION = 12


@dataclass
class QuantizedPlane:
    coefficients: np.ndarray
    precision_B: int = DEFAULT_PRECISION

    @property
    def num_bitplanes(self) -> int:
        return num_bitplanes(self.coefficients)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(values, B: int = DEFAULT_PRECISION) -> QuantizedPlane:
    """``round(2**(B-1) * v)``, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    return QuantizedPlane(round_half_away(np.ldexp(values, B - 1)).astype(np.int64), B)


def dequantize(plane: QuantizedPlane) -> np.ndarray:
    return np.ldexp(plane.coefficients.astype(np.float64), -(plane.precision_B - 1))


def grid_shape(n_maps: int):
    """Tile grid ``(rows, cols)`` for ``n_maps`` feature maps.

    Columns: ceil(sqrt(n)) rounded down to a power of two; rows fill the rest.
    """
    if n_maps < 1:
        raise ShapeError("need at least one feature map")
    side = math.isqrt(n_maps - 1) + 1
    cols = 1 << (side.bit_length() - 1)
    return -(-n_maps // cols), cols


def tile_vertical_scan(maps: np.ndarray) -> np.ndarray:
    """Arranges (N, h, w) maps column-major on a tile grid: down first, then across."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ShapeError(f"expected (N, h, w) maps, got shape {maps.shape}")
    n, h, w = maps.shape
    g_rows, g_cols = grid_shape(n)
    out = np.zeros((g_rows * h, g_cols * w), dtype=maps.dtype)
    for k in range(n):
        r, c = k % g_rows, k // g_rows
        out[r * h : (r + 1) * h, c * w : (c + 1) * w] = maps[k]
    return out


def untile_vertical_scan(grid: np.ndarray, n_maps: int, h: int, w: int) -> np.ndarray:
    g_rows, g_cols = grid_shape(n_maps)
    if grid.shape != (g_rows * h, g_cols * w):
        raise ShapeError(f"grid shape {grid.shape} does not hold {n_maps} maps of {h}x{w}")
    out = np.empty((n_maps, h, w), dtype=grid.dtype)
    for k in range(n_maps):
        r, c = k % g_rows, k // g_rows
        out[k] = grid[r * h : (r + 1) * h, c * w : (c + 1) * w]
    return out


def tile_patches(latents: np.ndarray, patch_rows: int, patch_cols: int) -> np.ndarray:
    """Places every patch's tiled maps at its raster position in one big grid."""
    p, n, h, w = latents.shape
    if p != patch_rows * patch_cols:
        raise ShapeError(f"{p} patches do not fill a {patch_rows}x{patch_cols} grid")
    tiles = [tile_vertical_scan(latents[i]) for i in range(p)]
    th, tw = tiles[0].shape
    out = np.empty((patch_rows * th, patch_cols * tw), dtype=latents.dtype)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, patch_cols)
        out[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = tile
    return out


def untile_patches(grid: np.ndarray, patch_rows: int, patch_cols: int, n_maps: int, h: int, w: int) -> np.ndarray:
    g_rows, g_cols = grid_shape(n_maps)
    th, tw = g_rows * h, g_cols * w
    if grid.shape != (patch_rows * th, patch_cols * tw):
        raise ShapeError(f"grid shape {grid.shape} does not match {patch_rows}x{patch_cols} patches")
    out = np.empty((patch_rows * patch_cols, n_maps, h, w), dtype=grid.dtype)
    for i in range(patch_rows * patch_cols):
        r, c = divmod(i, patch_cols)
        out[i] = untile_vertical_scan(grid[r * th : (r + 1) * th, c * tw : (c + 1) * tw], n_maps, h, w)
    return out
