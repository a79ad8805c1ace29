"""Per-plane PCA rotation of latent vectors.

The second-moment matrix is computed without mean removal, diagonalised with
cyclic Jacobi rotations, and its eigenvectors (sorted by descending
eigenvalue, sign- and tie-normalised so the result is unique) form the
rotation ``U``. The encoder sends ``U`` as quantised side information.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ContainerError, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9
DEFAULT_U_BITS = 16


@dataclass
class RotationMatrix:
    U: np.ndarray
    eigenvalues: np.ndarray
    sweeps: int = 0

    @property
    def dim(self) -> int:
        return self.U.shape[0]


def compute_covariance(samples: np.ndarray) -> np.ndarray:
    """``(1/m) * sum(y y^T)`` over the rows of an (m, n) sample matrix."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ShapeError(f"samples must be (m, n), got shape {samples.shape}")
    m = samples.shape[0]
    if m == 0:
        raise ShapeError("cannot compute a covariance from zero samples")
    if not np.all(np.isfinite(samples)):
        raise ShapeError("samples contain non-finite values")
    cov = samples.T @ samples / m
    return 0.5 * (cov + cov.T)


@numba.njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    norm = np.sqrt(np.sum(a * a))
    sweeps = 0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(n):
                if p != q:
                    off += a[p, q] * a[p, q]
        if np.sqrt(off) <= tol * norm:
            break
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    sign = 1.0 if theta >= 0.0 else -1.0
                    t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return np.diag(a).copy(), v, sweeps


def _canonical_basis(columns: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span(columns) built from projected e_0, e_1, ..."""
    n, g = columns.shape
    out = []
    for j in range(n):
        vec = columns @ columns[j]
        for b in out:
            vec = vec - (b @ vec) * b
        norm = np.linalg.norm(vec)
        if norm > 1e-6:
            out.append(vec / norm)
            if len(out) == g:
                break
    return np.stack(out, axis=1)


def _fix_signs(U: np.ndarray) -> np.ndarray:
    U = U.copy()
    for k in range(U.shape[1]):
        mags = np.abs(U[:, k])
        # near-equal magnitudes count as a tie, resolved by the lowest index
        lead = int(np.argmax(mags >= mags.max() - 1e-12))
        if U[lead, k] < 0:
            U[:, k] = -U[:, k]
    return U


def eigendecompose(cov: np.ndarray, tie_tol: float = 1e-10) -> RotationMatrix:
    """Eigenvectors of a symmetric matrix as columns, largest eigenvalue first."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {cov.shape}")
    scale = max(np.max(np.abs(cov)), 1.0) if cov.size else 1.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ShapeError("matrix is not symmetric")
    evals, evecs, sweeps = _jacobi(0.5 * (cov + cov.T), JACOBI_TOL, JACOBI_MAX_SWEEPS)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]

    # regroup (near-)degenerate eigenvalues and pick a canonical basis for each
    tol = tie_tol * max(np.max(np.abs(evals), initial=0.0), 1e-300)
    start = 0
    n = len(evals)
    while start < n:
        stop = start + 1
        while stop < n and evals[start] - evals[stop] <= tol:
            stop += 1
        if stop - start > 1:
            evecs[:, start:stop] = _canonical_basis(evecs[:, start:stop])
        start = stop
    return RotationMatrix(_fix_signs(evecs), evals, int(sweeps))


def _check_dims(vectors, U):
    if vectors.ndim != 2 or vectors.shape[1] != U.shape[0] or U.shape[0] != U.shape[1]:
        raise ShapeError(f"cannot rotate vectors of shape {vectors.shape} with U of shape {U.shape}")


def rotate(samples: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``U^T y`` for every row ``y`` of ``samples``."""
    _check_dims(samples, U)
    return samples @ U


def inverse_rotate(rotated: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``U y~`` for every row of ``rotated``."""
    _check_dims(rotated, U)
    return rotated @ U.T


def u_half_levels(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def u_step(bits: int = DEFAULT_U_BITS) -> float:
    return 1.0 / u_half_levels(bits)


def quantize_U(U: np.ndarray, bits: int = DEFAULT_U_BITS):
    """Mid-tread uniform quantiser over [-1, 1]; returns ``(codes, step)``.

    Codes are unsigned, ``0 .. 2**bits - 2``; -1, 0 and +1 are exact.
    """
    if not 2 <= bits <= 32:
        raise ValueError(f"bits must be in [2, 32], got {bits}")
    half = u_half_levels(bits)
    scaled = np.clip(np.asarray(U, dtype=np.float64), -1.0, 1.0) * half
    codes = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5) + half
    return codes.astype(np.int64), 1.0 / half


def dequantize_U(codes: np.ndarray, bits: int = DEFAULT_U_BITS) -> np.ndarray:
    half = u_half_levels(bits)
    return (np.asarray(codes, dtype=np.float64) - half) / half


def _code_dtype(bits):
    if bits <= 8:
        return np.dtype("<u1")
    if bits <= 16:
        return np.dtype("<u2")
    return np.dtype("<u4")


def side_info_bits(dim: int, bits: int = DEFAULT_U_BITS) -> int:
    """Serialised size of one rotation block, 16-bit block header included."""
    return 16 + dim * dim * 8 * _code_dtype(bits).itemsize


def pack_rotation(codes: np.ndarray, bits: int = DEFAULT_U_BITS) -> bytes:
    n = codes.shape[0]
    return struct.pack("<BB", bits, n) + codes.astype(_code_dtype(bits)).tobytes(order="C")


def unpack_rotation(data, offset: int = 0):
    """Returns ``(codes, bits, next_offset)``."""
    if offset + 2 > len(data):
        raise ContainerError("truncated rotation header", section="rotation")
    bits, n = struct.unpack_from("<BB", data, offset)
    if not 2 <= bits <= 32:
        raise ContainerError(f"invalid bits-per-entry {bits}", section="rotation")
    dt = _code_dtype(bits)
    size = n * n * dt.itemsize
    start = offset + 2
    if start + size > len(data):
        raise ContainerError("truncated rotation matrix", section="rotation")
    codes = np.frombuffer(data, dtype=dt, count=n * n, offset=start).reshape(n, n).astype(np.int64)
    if codes.max(initial=0) > 2 * u_half_levels(bits):
        raise ContainerError("rotation code out of range", section="rotation")
    return codes, bits, start + size


def fit_rotation(samples: np.ndarray, bits: int = DEFAULT_U_BITS):
    """Full encoder-side PCA: returns ``(rotation, codes, U_hat)``.

    ``U_hat`` is the dequantised matrix both encoder and decoder must use.
    """
    rot = eigendecompose(compute_covariance(samples))
    codes, _ = quantize_U(rot.U, bits)
    return rot, codes, dequantize_U(codes, bits)
