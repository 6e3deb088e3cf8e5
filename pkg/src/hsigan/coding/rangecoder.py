"""Carry-less range coder with 64-bit state.

Frequencies are quantized to a total of ``2**32``; the coder keeps
``range >= 2**48`` and emits whole bytes whenever the top byte of ``low`` is
settled. ``flush`` writes the 8 bytes of ``low``. Encoding and decoding run in
numba-compiled loops; the decoder never reads past the payload and reports
underrun or corruption through a status code.
"""
from __future__ import annotations

import numpy as np
from numba import njit, uint8, uint64

PRECISION = 32
TOTAL = 1 << PRECISION
_TOP = 1 << 56
_BOT = 1 << 48
_MASK = (1 << 64) - 1

OK, UNDERRUN, CORRUPT = 0, 1, 2


class BitstreamError(ValueError):
    pass


def pmf_to_cdf(pmf: np.ndarray) -> np.ndarray:
    """Quantize rows of ``pmf`` to integer cumulative tables summing to 2**32.

    Every symbol gets frequency >= 1; rounding error is absorbed by the most
    probable symbol. Returns uint64 array ``[T, nsym + 1]``.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise ValueError("pmf must be finite and nonnegative")
    nsym = pmf.shape[1]
    if nsym > TOTAL // 2:
        raise ValueError("alphabet too large for the coder precision")
    p = pmf / pmf.sum(axis=1, keepdims=True)
    freq = np.maximum(np.rint(p * TOTAL).astype(np.int64), 1)
    rows = np.arange(freq.shape[0])
    top = np.argmax(freq, axis=1)
    freq[rows, top] += TOTAL - freq.sum(axis=1)
    if np.any(freq < 1):
        raise ValueError("pmf too flat to quantize")
    cdf = np.zeros((freq.shape[0], nsym + 1), dtype=np.uint64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:].view(np.int64))
    return cdf


@njit(cache=True)
def _encode(sym, tab, cdf, out):
    top = uint64(_TOP)
    bot_mask = uint64(_BOT - 1)
    bot = uint64(_BOT)
    low = uint64(0)
    rng = uint64(_MASK)
    shift = uint64(PRECISION)
    pos = 0
    for i in range(sym.shape[0]):
        t = tab[i]
        s = sym[i]
        c = cdf[t, s]
        f = cdf[t, s + 1] - c
        r = rng >> shift
        low = low + c * r
        rng = f * r
        while True:
            if (low ^ (low + rng)) < top:
                pass
            elif rng < bot:
                rng = (~low + uint64(1)) & bot_mask
            else:
                break
            out[pos] = uint8(low >> uint64(56))
            pos += 1
            low = low << uint64(8)
            rng = rng << uint64(8)
    for _ in range(8):
        out[pos] = uint8(low >> uint64(56))
        pos += 1
        low = low << uint64(8)
    return pos


@njit(cache=True)
def _decode(data, tab, cdf, nsym, out):
    top = uint64(_TOP)
    bot_mask = uint64(_BOT - 1)
    bot = uint64(_BOT)
    total = uint64(TOTAL)
    shift = uint64(PRECISION)
    n_bytes = data.shape[0]
    if n_bytes < 8:
        return 1, 0
    low = uint64(0)
    rng = uint64(_MASK)
    code = uint64(0)
    for k in range(8):
        code = (code << uint64(8)) | uint64(data[k])
    pos = 8
    for i in range(out.shape[0]):
        t = tab[i]
        r = rng >> shift
        v = (code - low) // r
        if v >= total:
            return 2, i
        lo_i = 0
        hi_i = nsym
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if cdf[t, mid] <= v:
                lo_i = mid
            else:
                hi_i = mid
        out[i] = lo_i
        c = cdf[t, lo_i]
        f = cdf[t, lo_i + 1] - c
        low = low + c * r
        rng = f * r
        while True:
            if (low ^ (low + rng)) < top:
                pass
            elif rng < bot:
                rng = (~low + uint64(1)) & bot_mask
            else:
                break
            if pos >= n_bytes:
                return 1, i
            code = (code << uint64(8)) | uint64(data[pos])
            pos += 1
            low = low << uint64(8)
            rng = rng << uint64(8)
    return 0, pos


def encode_indices(sym_idx, table_idx, cdf) -> bytes:
    """Code symbol indices (0-based into each table) with per-symbol tables."""
    sym_idx = np.ascontiguousarray(sym_idx, dtype=np.int64).ravel()
    n = sym_idx.size
    if n == 0:
        return b""
    table_idx = np.ascontiguousarray(np.broadcast_to(table_idx, sym_idx.shape), dtype=np.int64).ravel()
    cdf = np.ascontiguousarray(cdf, dtype=np.uint64)
    nsym = cdf.shape[1] - 1
    if sym_idx.min() < 0 or sym_idx.max() >= nsym:
        raise ValueError("symbol outside the coder alphabet")
    if table_idx.min() < 0 or table_idx.max() >= cdf.shape[0]:
        raise ValueError("table index out of range")
    out = np.empty(5 * n + 16, dtype=np.uint8)
    pos = _encode(sym_idx, table_idx, cdf, out)
    return out[:pos].tobytes()


def decode_indices(data: bytes, table_idx, cdf, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    table_idx = np.ascontiguousarray(np.broadcast_to(table_idx, (n,)), dtype=np.int64).ravel()
    cdf = np.ascontiguousarray(cdf, dtype=np.uint64)
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(n, dtype=np.int64)
    status, _ = _decode(buf, table_idx, cdf, cdf.shape[1] - 1, out)
    if status == UNDERRUN:
        raise BitstreamError("bitstream underrun")
    if status == CORRUPT:
        raise BitstreamError("corrupt bitstream")
    return out


def code_length_bound(info_bits: float) -> float:
    """Upper bound on payload bytes asserted by the tests."""
    return info_bits / 8 + 32
