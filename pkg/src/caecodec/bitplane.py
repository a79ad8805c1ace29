"""Embedded bitplane coder with an adaptive binary arithmetic back end.

Integer coefficients are coded as sign/magnitude, most significant bitplane
first, in raster order of the (tiled) grid. Each coefficient in a plane emits
either a significance bit (if it has not become significant yet) or a
refinement bit; the sign follows the first 1. Four adaptive binary contexts
are used:

    0  significance, no 4-neighbour significant yet
    1  significance, at least one 4-neighbour significant
    2  refinement
    3  sign

Probabilities are Laplace-smoothed bit counts, halved when their sum exceeds
``COUNT_LIMIT``. Contexts persist across planes, but the arithmetic coder is
flushed at every plane boundary, so each plane is a separate byte-aligned
segment and any prefix of whole segments decodes on its own.

Coded-plane layout, little-endian::

    u16 rows | u16 cols | u8 num_bitplanes | u8 flags | u32 payload_len | payload

``payload`` is a sequence of ``(LEB128 length, segment bytes)`` pairs, one per
transmitted plane, MSB plane first. Flag bit 0 marks a truncated stream.
"""

from __future__ import annotations

import struct

import numba
import numpy as np

from .errors import RateTooSmallError, ShapeError, StreamError

HEADER = struct.Struct("<HHBBI")
HEADER_BYTES = HEADER.size
MAX_BITPLANES = 30
FLAG_TRUNCATED = 0x01

N_CONTEXTS = 4
CTX_SIG, CTX_SIG_NEIGHBOUR, CTX_REFINE, CTX_SIGN = 0, 1, 2, 3
COUNT_LIMIT = 1024

_TOP = (1 << 32) - 1
_HALF = 1 << 31
_QUARTER = 1 << 30
_THREE_QUARTERS = 3 * _QUARTER


@numba.njit(cache=True, inline="always")
def _put_bit(buf, pos, bit):
    if bit:
        buf[pos >> 3] |= np.uint8(1 << (7 - (pos & 7)))
    return pos + 1


@numba.njit(cache=True, inline="always")
def _emit(buf, pos, bit, pending):
    pos = _put_bit(buf, pos, bit)
    for _ in range(pending):
        pos = _put_bit(buf, pos, 1 - bit)
    return pos


@numba.njit(cache=True, inline="always")
def _adapt(counts, ctx, bit):
    counts[ctx, bit] += 1
    if counts[ctx, 0] + counts[ctx, 1] > COUNT_LIMIT:
        counts[ctx, 0] = (counts[ctx, 0] + 1) >> 1
        counts[ctx, 1] = (counts[ctx, 1] + 1) >> 1


@numba.njit(cache=True)
def _encode_symbol(state, buf, counts, ctx, bit):
    # state = [low, high, pending, bitpos]
    low, high, pending, pos = state[0], state[1], state[2], state[3]
    c0 = counts[ctx, 0]
    total = c0 + counts[ctx, 1]
    split = low + (high - low + 1) * c0 // total - 1
    if bit == 0:
        high = split
    else:
        low = split + 1
    while True:
        if high < _HALF:
            pos = _emit(buf, pos, 0, pending)
            pending = 0
        elif low >= _HALF:
            pos = _emit(buf, pos, 1, pending)
            pending = 0
            low -= _HALF
            high -= _HALF
        elif low >= _QUARTER and high < _THREE_QUARTERS:
            pending += 1
            low -= _QUARTER
            high -= _QUARTER
        else:
            break
        low = 2 * low
        high = 2 * high + 1
    state[0], state[1], state[2], state[3] = low, high, pending, pos
    _adapt(counts, ctx, bit)


@numba.njit(cache=True)
def _finish(state, buf):
    low, pending, pos = state[0], state[2] + 1, state[3]
    if low < _QUARTER:
        pos = _emit(buf, pos, 0, pending)
    else:
        pos = _emit(buf, pos, 1, pending)
    return pos


@numba.njit(cache=True)
def _sig_context(sig, r, c):
    rows, cols = sig.shape
    if (r > 0 and sig[r - 1, c]) or (r + 1 < rows and sig[r + 1, c]):
        return CTX_SIG_NEIGHBOUR
    if (c > 0 and sig[r, c - 1]) or (c + 1 < cols and sig[r, c + 1]):
        return CTX_SIG_NEIGHBOUR
    return CTX_SIG


@numba.njit(cache=True)
def _encode_planes(mag, neg, nplanes, buf):
    """Codes planes nplanes-1 .. 0; returns the byte length of each segment."""
    rows, cols = mag.shape
    sig = np.zeros((rows, cols), dtype=np.uint8)
    counts = np.ones((N_CONTEXTS, 2), dtype=np.int64)
    seg_len = np.zeros(nplanes, dtype=np.int64)
    state = np.zeros(4, dtype=np.int64)
    byte_start = 0
    for k in range(nplanes):
        p = nplanes - 1 - k
        state[0] = 0
        state[1] = _TOP
        state[2] = 0
        state[3] = byte_start * 8
        for r in range(rows):
            for c in range(cols):
                bit = (mag[r, c] >> p) & 1
                if sig[r, c]:
                    _encode_symbol(state, buf, counts, CTX_REFINE, bit)
                else:
                    _encode_symbol(state, buf, counts, _sig_context(sig, r, c), bit)
                    if bit:
                        _encode_symbol(state, buf, counts, CTX_SIGN, 1 if neg[r, c] else 0)
                        sig[r, c] = 1
        end_bit = _finish(state, buf)
        end = (end_bit + 7) >> 3
        seg_len[k] = end - byte_start
        byte_start = end
    return seg_len


@numba.njit(cache=True, inline="always")
def _get_bit(buf, start, nbits, i):
    if i >= nbits:
        return 0
    return (buf[start + (i >> 3)] >> (7 - (i & 7))) & 1


@numba.njit(cache=True)
def _decode_planes(buf, seg_start, seg_len, nplanes, rows, cols):
    """Inverse of ``_encode_planes`` for the first ``len(seg_start)`` planes."""
    mag = np.zeros((rows, cols), dtype=np.int64)
    neg = np.zeros((rows, cols), dtype=np.uint8)
    sig = np.zeros((rows, cols), dtype=np.uint8)
    counts = np.ones((N_CONTEXTS, 2), dtype=np.int64)
    for k in range(len(seg_start)):
        p = nplanes - 1 - k
        start = seg_start[k]
        nbits = seg_len[k] * 8
        low = 0
        high = _TOP
        value = 0
        i = 0
        for _ in range(32):
            value = 2 * value + _get_bit(buf, start, nbits, i)
            i += 1
        for r in range(rows):
            for c in range(cols):
                if sig[r, c]:
                    n_sym = 1
                    ctx = CTX_REFINE
                else:
                    n_sym = 1
                    ctx = _sig_context(sig, r, c)
                j = 0
                while j < n_sym:
                    c0 = counts[ctx, 0]
                    total = c0 + counts[ctx, 1]
                    split = low + (high - low + 1) * c0 // total - 1
                    if value <= split:
                        bit = 0
                        high = split
                    else:
                        bit = 1
                        low = split + 1
                    while True:
                        if high < _HALF:
                            pass
                        elif low >= _HALF:
                            low -= _HALF
                            high -= _HALF
                            value -= _HALF
                        elif low >= _QUARTER and high < _THREE_QUARTERS:
                            low -= _QUARTER
                            high -= _QUARTER
                            value -= _QUARTER
                        else:
                            break
                        low = 2 * low
                        high = 2 * high + 1
                        value = 2 * value + _get_bit(buf, start, nbits, i)
                        i += 1
                    _adapt(counts, ctx, bit)
                    if ctx == CTX_REFINE:
                        mag[r, c] |= bit << p
                    elif ctx == CTX_SIGN:
                        neg[r, c] = bit
                        sig[r, c] = 1
                    elif bit:
                        mag[r, c] |= 1 << p
                        # significance bit was 1: a sign symbol follows
                        n_sym = 2
                        ctx = CTX_SIGN
                    j += 1
    return mag, neg, sig


def num_bitplanes(coefficients: np.ndarray) -> int:
    """Smallest n with max|c| < 2**n."""
    peak = int(np.max(np.abs(coefficients), initial=0))
    return peak.bit_length()


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _read_varint(data, pos, end):
    shift = value = 0
    while True:
        if pos >= end:
            raise StreamError("premature end of payload inside a segment length")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7
        if shift > 35:
            raise StreamError("segment length varint too long")


def _check_grid(coefficients):
    c = np.asarray(coefficients)
    if c.ndim != 2:
        raise ShapeError(f"coefficient grid must be 2-D, got shape {c.shape}")
    if not np.issubdtype(c.dtype, np.integer):
        raise ShapeError("coefficient grid must hold integers")
    if c.shape[0] > 0xFFFF or c.shape[1] > 0xFFFF:
        raise ShapeError(f"grid {c.shape} exceeds the 16-bit dimension fields")
    nb = num_bitplanes(c)
    if nb > MAX_BITPLANES:
        raise ShapeError(f"coefficients need {nb} bitplanes, at most {MAX_BITPLANES} supported")
    return c.astype(np.int64), nb


def encode_segments(coefficients: np.ndarray):
    """Code every bitplane; returns ``(num_bitplanes, [segment bytes, ...])``."""
    c, nb = _check_grid(coefficients)
    if nb == 0 or c.size == 0:
        return nb, []
    mag = np.abs(c)
    neg = c < 0
    # each decision costs at most log2(COUNT_LIMIT + 1) < 11 bits
    cap = nb * ((2 * c.size * 11 + 64) // 8 + 8)
    buf = np.zeros(cap, dtype=np.uint8)
    seg_len = _encode_planes(mag, neg, nb, buf)
    out, pos = [], 0
    for n in seg_len:
        out.append(buf[pos : pos + n].tobytes())
        pos += n
    return nb, out


def assemble(shape, nb, segments, planes=None) -> bytes:
    """Header plus the first ``planes`` segments (all when ``None``)."""
    if planes is None:
        planes = len(segments)
    payload = b"".join(_varint(len(s)) + s for s in segments[:planes])
    flags = FLAG_TRUNCATED if planes < nb else 0
    return HEADER.pack(shape[0], shape[1], nb, flags, len(payload)) + payload


def segment_costs(segments):
    """Cumulative stream size in bits after 0, 1, 2, ... planes."""
    sizes = [HEADER_BYTES * 8]
    for s in segments:
        sizes.append(sizes[-1] + 8 * (len(_varint(len(s))) + len(s)))
    return sizes


def encode_plane(coefficients: np.ndarray, target_bits: int | None = None) -> bytes:
    """Embedded stream for an integer grid.

    With ``target_bits=None`` every plane is sent (lossless). Otherwise whole
    planes are kept, most significant first, while the stream fits the budget.
    """
    c = np.asarray(coefficients)
    if target_bits is not None and target_bits < HEADER_BYTES * 8:
        raise RateTooSmallError(f"target of {target_bits} bits is below the {HEADER_BYTES * 8}-bit plane header")
    nb, segments = encode_segments(c)
    planes = len(segments)
    if target_bits is not None:
        costs = segment_costs(segments)
        planes = max(k for k, bits in enumerate(costs) if bits <= target_bits)
    return assemble(c.shape, nb, segments, planes)


def read_header(data, offset: int = 0):
    if offset + HEADER_BYTES > len(data):
        raise StreamError("truncated coded-plane header")
    rows, cols, nb, flags, plen = HEADER.unpack_from(data, offset)
    if nb > MAX_BITPLANES:
        raise StreamError(f"corrupt header: {nb} bitplanes")
    if flags & ~FLAG_TRUNCATED:
        raise StreamError(f"corrupt header: unknown flag bits {flags:#x}")
    return rows, cols, nb, flags, plen


def split_segments(data, offset: int = 0):
    """Parses one coded plane; returns ``(header, [segments], next_offset)``."""
    rows, cols, nb, flags, plen = read_header(data, offset)
    pos = offset + HEADER_BYTES
    end = pos + plen
    if end > len(data):
        raise StreamError(f"payload declares {plen} bytes, only {len(data) - pos} available")
    segments = []
    while pos < end:
        n, pos = _read_varint(data, pos, end)
        if n == 0 or pos + n > end:
            raise StreamError("premature end of payload: segment does not end on a plane boundary")
        segments.append(bytes(data[pos : pos + n]))
        pos += n
    if len(segments) > nb:
        raise StreamError(f"{len(segments)} segments for {nb} bitplanes")
    if rows * cols == 0 and segments:
        raise StreamError("segments present for an empty grid")
    return (rows, cols, nb, flags), segments, end


def decode_segments(shape, nb, segments):
    """Returns ``(magnitudes, negative, significant, transmitted_planes)``."""
    rows, cols = shape
    if not segments:
        z = np.zeros((rows, cols), dtype=np.int64)
        return z, z.astype(np.uint8), z.astype(np.uint8), 0
    lens = np.array([len(s) for s in segments], dtype=np.int64)
    starts = np.concatenate(([0], np.cumsum(lens)[:-1])).astype(np.int64)
    buf = np.frombuffer(b"".join(segments), dtype=np.uint8)
    mag, neg, sig = _decode_planes(buf, starts, lens, nb, rows, cols)
    return mag, neg, sig, len(segments)


def reconstruct(mag, neg, sig, nb, transmitted):
    """Reconstruction of coefficients known down to plane ``lowest = nb - transmitted``.

    A coefficient that became significant at plane ``s`` starts at the
    midpoint ``1.5 * 2**s`` of its first interval. Later refinements clamp
    that value into the narrowed interval ``[m, m + 2**lowest - 1]`` instead
    of jumping to the new midpoint. Clamping onto an interval that still
    contains the true value never moves away from it, so the error of every
    coefficient, and hence the MSE, is non-increasing as planes are added.
    """
    lowest = nb - transmitted
    mag = mag.astype(np.int64)
    if lowest == 0:
        value = mag
    else:
        s = np.frexp(np.maximum(mag, 1).astype(np.float64))[1].astype(np.int64) - 1
        first = np.where(s >= 1, (np.int64(3) << np.maximum(s, 1)) >> 1, mag)
        value = np.clip(first, mag, mag + (1 << lowest) - 1)
    value = np.where(sig.astype(bool), value, 0)
    return np.where(neg.astype(bool), -value, value).astype(np.int64)


def decode_plane_at(data, offset: int = 0):
    """Decodes the coded plane starting at ``offset``; returns ``(grid, transmitted, nb, next_offset)``."""
    (rows, cols, nb, _), segments, end = split_segments(data, offset)
    mag, neg, sig, transmitted = decode_segments((rows, cols), nb, segments)
    return reconstruct(mag, neg, sig, nb, transmitted), transmitted, nb, end


def decode_plane(data: bytes, expected_dims=None) -> np.ndarray:
    grid, _, _, end = decode_plane_at(data)
    if end != len(data):
        raise StreamError(f"{len(data) - end} trailing bytes after coded plane")
    if expected_dims is not None and grid.shape != tuple(expected_dims):
        raise StreamError(f"plane is {grid.shape}, expected {tuple(expected_dims)}")
    return grid


def truncate_stream(data: bytes, planes: int) -> bytes:
    """Keeps only the first ``planes`` segments of an encoded plane."""
    (rows, cols, nb, _), segments, _ = split_segments(data)
    return assemble((rows, cols), nb, segments, min(planes, len(segments)))
