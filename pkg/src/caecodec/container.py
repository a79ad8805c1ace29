"""Container format and whole-image encode/decode.

Layout (little-endian)::

    magic "CAEC" | version u8 | width u16 | height u16 | patch_size u16
    | B u8 | N6 u8 | plane_count u8 | model_id 8 bytes
    then per plane: rotation block (bits u8, n u8, n*n codes) | coded plane

Planes are Y, Cb, Cr for colour images, a single luma plane otherwise.
Each plane is coded independently with its own rotation matrix.
"""

from __future__ import annotations

import logging
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bitplane, pca
from .coefficients import DEFAULT_PRECISION, QuantizedPlane, dequantize, quantize, tile_patches, untile_patches
from .errors import ContainerError, RateTooSmallError, ShapeError, StreamError, UnsupportedVersionError
from .network import CaeParams, decode, encode
from .pipeline import PlanarImage, merge_patches, split_patches

log = logging.getLogger(__name__)

MAGIC = b"CAEC"
VERSION = 1
HEADER = struct.Struct("<4sBHHHBBB8s")
HEADER_BYTES = HEADER.size
PLANE_RATE_WEIGHTS = (6, 1, 1)
CHUNK_PATCHES = 8


class ModelMismatchWarning(UserWarning):
    pass


@dataclass
class RateTarget:
    """Total file size budget in bits; ``None`` keeps every bitplane."""

    total_bits: int | None = None

    @classmethod
    def from_bpp(cls, bpp: float, width: int, height: int) -> "RateTarget":
        if not bpp > 0:
            raise ValueError(f"bpp must be positive, got {bpp}")
        return cls(int(bpp * width * height))

    @property
    def lossless(self) -> bool:
        return self.total_bits is None


@dataclass
class PlaneRecord:
    u_codes: np.ndarray
    u_bits: int
    stream: bytes

    def to_bytes(self) -> bytes:
        return pca.pack_rotation(self.u_codes, self.u_bits) + self.stream


@dataclass
class CompressedImage:
    width: int
    height: int
    patch_size: int
    precision_B: int
    n_maps: int
    model_id: bytes
    planes: list
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = HEADER.pack(
            MAGIC,
            self.version,
            self.width,
            self.height,
            self.patch_size,
            self.precision_B,
            self.n_maps,
            len(self.planes),
            self.model_id,
        )
        return head + b"".join(p.to_bytes() for p in self.planes)

    @property
    def num_bits(self) -> int:
        return 8 * len(self.to_bytes())

    @property
    def bpp(self) -> float:
        return self.num_bits / (self.width * self.height)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedImage":
        data = bytes(data)
        if len(data) < HEADER_BYTES:
            raise ContainerError(f"file is {len(data)} bytes, shorter than the {HEADER_BYTES}-byte header", "header")
        magic, version, width, height, patch, B, n_maps, count, model_id = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}", "header")
        if version != VERSION:
            raise UnsupportedVersionError(f"container version {version}, this decoder reads version {VERSION}", "header")
        if width < 1 or height < 1 or count not in (1, 3) or n_maps < 1 or not 1 <= B <= 30:
            raise ContainerError(f"invalid header fields {width}x{height}, planes={count}, N6={n_maps}, B={B}", "header")
        if patch < 8 or patch % 8:
            raise ContainerError(f"invalid patch size {patch}", "header")
        pos = HEADER_BYTES
        planes = []
        for k in range(count):
            codes, bits, pos = pca.unpack_rotation(data, pos)
            if codes.shape[0] != n_maps:
                raise ContainerError(f"plane {k}: rotation is {codes.shape[0]}x{codes.shape[0]}, header says N6={n_maps}", "rotation")
            try:
                _, _, end = bitplane.split_segments(data, pos)
            except StreamError as exc:
                raise ContainerError(f"plane {k}: {exc}", "payload") from exc
            planes.append(PlaneRecord(codes, bits, data[pos:end]))
            pos = end
        if pos != len(data):
            raise ContainerError(f"{len(data) - pos} trailing bytes", "trailer")
        return cls(width, height, patch, B, n_maps, model_id, planes, version)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CAE_THREADS", "1")))
    except ValueError:
        return 1


def _chunked(fn, batch: np.ndarray):
    """Applies ``fn`` to batch chunks, optionally on a thread pool, in order."""
    chunks = [batch[i : i + CHUNK_PATCHES] for i in range(0, batch.shape[0], CHUNK_PATCHES)]
    workers = min(_threads(), len(chunks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.concatenate(list(pool.map(fn, chunks)))
    return np.concatenate([fn(c) for c in chunks])


def _latents_to_samples(latents):
    # (P, N, h, w) -> one N-vector per spatial position
    return latents.transpose(0, 2, 3, 1).reshape(-1, latents.shape[1])


def _samples_to_latents(samples, shape):
    p, n, h, w = shape
    return samples.reshape(p, h, w, n).transpose(0, 3, 1, 2)


def plane_budgets(total_bits: int, n_planes: int, fixed_bits: int):
    """Splits the payload budget 6:1:1 (Y:Cb:Cr); a single plane gets everything."""
    payload = total_bits - fixed_bits
    weights = PLANE_RATE_WEIGHTS[:n_planes] if n_planes == 3 else (1,)
    budgets = [payload * w // sum(weights) for w in weights]
    # the stream is byte-granular
    budgets = [b - b % 8 for b in budgets]
    floor = bitplane.HEADER_BYTES * 8
    if min(budgets) < floor:
        raise RateTooSmallError(
            f"target of {total_bits} bits leaves {budgets} bits per plane after {fixed_bits} bits of "
            f"header and rotation side information; each plane needs at least {floor}"
        )
    return budgets


def encode_image(
    image: np.ndarray,
    params: CaeParams,
    rate: RateTarget | None = None,
    precision_B: int = DEFAULT_PRECISION,
    u_bits: int = pca.DEFAULT_U_BITS,
) -> CompressedImage:
    """Compresses an (H, W, 3) RGB or (H, W) grey image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3) or min(image.shape[:2]) < 1:
        raise ShapeError(f"expected an (H, W) or (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h > 0xFFFF or w > 0xFFFF:
        raise ShapeError(f"image extents {w}x{h} exceed 65535")
    rate = rate or RateTarget()
    arch = params.architecture
    planar = PlanarImage.from_array(image)
    n_planes = planar.planes.shape[0]
    n_maps = arch.latent_channels

    budgets = [None] * n_planes
    if not rate.lossless:
        fixed = 8 * HEADER_BYTES + n_planes * pca.side_info_bits(n_maps, u_bits)
        budgets = plane_budgets(rate.total_bits, n_planes, fixed)

    records = []
    for k in range(n_planes):
        grid = split_patches(planar.planes[k], arch.patch_size)
        latents = _chunked(lambda b: encode(params, b), grid.batch())
        samples = _latents_to_samples(latents)
        _, codes, U_hat = pca.fit_rotation(samples, u_bits)
        rotated = _samples_to_latents(pca.rotate(samples, U_hat), latents.shape)
        q = quantize(rotated, precision_B).coefficients
        coeff = tile_patches(q, grid.rows, grid.cols)
        stream = bitplane.encode_plane(coeff, budgets[k])
        records.append(PlaneRecord(codes, u_bits, stream))
    model_id = params.model_id()
    out = CompressedImage(w, h, arch.patch_size, precision_B, n_maps, model_id, records)
    log.debug("encoded %dx%d at %.4f bpp", w, h, out.bpp)
    return out


def _check_model(comp: CompressedImage, params: CaeParams):
    arch = params.architecture
    if comp.patch_size != arch.patch_size or comp.n_maps != arch.latent_channels:
        raise ContainerError(
            f"file needs patch {comp.patch_size} and N6={comp.n_maps}, model has patch "
            f"{arch.patch_size} and N6={arch.latent_channels}",
            "header",
        )
    if comp.model_id != params.model_id():
        warnings.warn(
            f"file was encoded with model {comp.model_id.hex()}, decoding with {params.model_id().hex()}",
            ModelMismatchWarning,
            stacklevel=3,
        )


def decode_image(data, params: CaeParams) -> np.ndarray:
    """Inverse of :func:`encode_image`; returns (H, W, 3) RGB or (H, W) grey in [0, 1]."""
    comp = data if isinstance(data, CompressedImage) else CompressedImage.from_bytes(data)
    _check_model(comp, params)
    arch = params.architecture
    s = arch.latent_size
    rows, cols = -(-comp.height // comp.patch_size), -(-comp.width // comp.patch_size)
    planes = []
    for k, rec in enumerate(comp.planes):
        try:
            coeff, _, _, _ = bitplane.decode_plane_at(rec.stream)
            q = untile_patches(coeff, rows, cols, comp.n_maps, s, s)
        except (StreamError, ShapeError) as exc:
            raise ContainerError(f"plane {k}: {exc}", "payload") from exc
        rotated = dequantize(QuantizedPlane(q, comp.precision_B))
        U_hat = pca.dequantize_U(rec.u_codes, rec.u_bits)
        latents = _samples_to_latents(pca.inverse_rotate(_latents_to_samples(rotated), U_hat), rotated.shape)
        recon = _chunked(lambda b: decode(params, b), latents)
        grid = split_patches(np.zeros((comp.height, comp.width)), comp.patch_size)
        planes.append(merge_patches(grid, recon[:, 0]))
    return PlanarImage(np.clip(np.stack(planes), 0.0, 1.0)).to_array()


def cae_reconstruct(image: np.ndarray, params: CaeParams) -> np.ndarray:
    """Reference path with no rotation, quantisation or entropy coding."""
    planar = PlanarImage.from_array(image)
    planes = []
    for plane in planar.planes:
        grid = split_patches(plane, params.architecture.patch_size)
        recon = _chunked(lambda b: decode(params, encode(params, b)), grid.batch())
        planes.append(merge_patches(grid, recon[:, 0]))
    return PlanarImage(np.clip(np.stack(planes), 0.0, 1.0)).to_array()

