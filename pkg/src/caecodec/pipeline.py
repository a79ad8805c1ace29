"""Colour conversion, patch splitting and training-set ingestion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, ImageFormatError, ShapeError
from .imageio import read_image

log = logging.getLogger(__name__)

# Full-range BT.601, the JPEG/JFIF convention. Rows give Y, Cb, Cr.
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)


@dataclass
class PlanarImage:
    """Y, Cb, Cr (or a single luma) planes of equal extent, values in [0, 1]."""

    planes: np.ndarray  # (C, H, W)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3 or self.planes.shape[0] not in (1, 3):
            raise ShapeError(f"expected (1|3, H, W) planes, got {self.planes.shape}")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def is_color(self) -> bool:
        return self.planes.shape[0] == 3

    @classmethod
    def from_array(cls, image: np.ndarray) -> "PlanarImage":
        """(H, W, 3) RGB becomes YCbCr; (H, W) is taken as luma."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            return cls(np.clip(image, 0.0, 1.0)[None])
        return rgb_to_ycbcr(image)

    def to_array(self) -> np.ndarray:
        return ycbcr_to_rgb(self) if self.is_color else self.planes[0].copy()


def rgb_to_ycbcr(rgb: np.ndarray) -> PlanarImage:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) RGB array, got {rgb.shape}")
    ycc = rgb @ RGB_TO_YCBCR.T + YCBCR_OFFSET
    return PlanarImage(np.clip(ycc, 0.0, 1.0).transpose(2, 0, 1))


def ycbcr_to_rgb(image: PlanarImage) -> np.ndarray:
    ycc = image.planes.transpose(1, 2, 0) - YCBCR_OFFSET
    return np.clip(ycc @ YCBCR_TO_RGB.T, 0.0, 1.0)


@dataclass
class PatchGrid:
    """Non-overlapping square patches covering an edge-padded plane, raster order."""

    patches: np.ndarray  # (rows * cols, P, P)
    rows: int
    cols: int
    height: int  # original extents
    width: int

    @property
    def patch_size(self) -> int:
        return self.patches.shape[-1]

    @property
    def padded_height(self) -> int:
        return self.rows * self.patch_size

    @property
    def padded_width(self) -> int:
        return self.cols * self.patch_size

    def batch(self) -> np.ndarray:
        """Patches as an (N, 1, P, P) network batch."""
        return self.patches[:, None]

    def positions(self):
        return [divmod(i, self.cols) for i in range(self.rows * self.cols)]


def _check_patch_size(patch_size):
    if patch_size < 8 or patch_size % 2:
        raise ShapeError(f"patch_size must be even and >= 8, got {patch_size}")


def pad_to(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Edge-replicates ``plane`` on the bottom and right up to the given extents."""
    h, w = plane.shape
    return np.pad(plane, ((0, max(0, height - h)), (0, max(0, width - w))), mode="edge")


def split_patches(plane: np.ndarray, patch_size: int = 128) -> PatchGrid:
    _check_patch_size(patch_size)
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.size == 0:
        raise ShapeError(f"expected a non-empty 2-D plane, got shape {plane.shape}")
    h, w = plane.shape
    rows, cols = -(-h // patch_size), -(-w // patch_size)
    padded = pad_to(plane, rows * patch_size, cols * patch_size)
    patches = (
        padded.reshape(rows, patch_size, cols, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(rows * cols, patch_size, patch_size)
    )
    return PatchGrid(np.ascontiguousarray(patches), rows, cols, h, w)


def merge_patches(grid: PatchGrid, patches: np.ndarray | None = None) -> np.ndarray:
    """Reassembles the plane and crops the padding; ``patches`` overrides ``grid.patches``."""
    p = grid.patches if patches is None else np.asarray(patches)
    p = p.reshape(grid.rows * grid.cols, grid.patch_size, grid.patch_size)
    full = (
        p.reshape(grid.rows, grid.cols, grid.patch_size, grid.patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(grid.padded_height, grid.padded_width)
    )
    return full[: grid.height, : grid.width].copy()


def luma(image: np.ndarray) -> np.ndarray:
    return PlanarImage.from_array(image).planes[0]


@dataclass
class PatchSource:
    patches: np.ndarray  # (count, 1, P, P)
    rejects: list = field(default_factory=list)  # (path, reason)
    images: list = field(default_factory=list)

    def __len__(self):
        return self.patches.shape[0]


def ingest_dataset(directory, patch_size: int = 128, count: int = 1000, seed: int = 0) -> PatchSource:
    """Seeded uniform random luma crops from every decodable image in ``directory``.

    Files are visited in sorted order and each crop picks an image uniformly,
    then a top-left corner uniformly, so the sequence depends only on the seed
    and the directory contents. Images smaller than a patch are edge-padded.
    """
    _check_patch_size(patch_size)
    if count < 0:
        raise ValueError("count must be >= 0")
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    planes, names, rejects = [], [], []
    for path in sorted(p for p in directory.iterdir() if p.is_file()):
        try:
            y = luma(read_image(path))
        except (ImageFormatError, ShapeError, OSError) as exc:
            rejects.append((str(path), str(exc)))
            continue
        planes.append(pad_to(y, patch_size, patch_size))
        names.append(str(path))
    for path, reason in rejects:
        log.warning("skipping %s: %s", path, reason)
    if not planes:
        listing = "; ".join(f"{p}: {r}" for p, r in rejects) or "no files"
        raise DatasetError(f"no decodable images in {directory} ({listing})", rejects)

    rng = np.random.default_rng(seed)
    out = np.empty((count, 1, patch_size, patch_size))
    for i in range(count):
        y = planes[rng.integers(len(planes))]
        top = rng.integers(y.shape[0] - patch_size + 1)
        left = rng.integers(y.shape[1] - patch_size + 1)
        out[i, 0] = y[top : top + patch_size, left : left + patch_size]
    return PatchSource(out, rejects, names)
