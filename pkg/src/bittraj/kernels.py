"""Hot inner loops, compiled with numba when available.

Set ``BITTRAJ_NO_NUMBA=1`` to force the pure-numpy implementations (useful for
debugging and for the comparison benchmark). Both paths produce identical
results; the test suite runs each kernel through both.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - import guard
    import numba
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("BITTRAJ_NO_NUMBA", "0") not in ("1", "true", "yes")

# two_bit code -> trit value: 00=0, 01=+1, 10=-1, 11 invalid (rejected on load)
TWO_BIT_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# fused fake quantization (round half away from zero, clamp, dequantize)
# ---------------------------------------------------------------------------

def _fake_quant_np(v2d, scale, lo, hi):
    z = v2d.astype(np.float64) * scale[:, None]
    whole = np.trunc(z)
    frac = z - whole
    r = whole + np.where(np.abs(frac) >= 0.5, np.sign(frac), 0.0)
    mask = (r >= lo) & (r <= hi)
    r = np.clip(r, lo, hi)
    return (r / scale[:, None]).astype(v2d.dtype), mask


@_njit
def _fake_quant_nb(v2d, scale, lo, hi):
    n, m = v2d.shape
    out = np.empty_like(v2d)
    mask = np.empty((n, m), dtype=np.bool_)
    for i in range(n):
        s = scale[i]
        for j in range(m):
            z = np.float64(v2d[i, j]) * s
            whole = np.trunc(z)
            frac = z - whole
            r = whole
            if frac >= 0.5:
                r += 1.0
            elif frac <= -0.5:
                r -= 1.0
            ok = r >= lo and r <= hi
            mask[i, j] = ok
            if r < lo:
                r = lo
            elif r > hi:
                r = hi
            out[i, j] = r / s
    return out, mask


def fake_quant(v: np.ndarray, scale, lo: float, hi: float):
    """Return ``(round_clamp(v * scale) / scale, clamp_passthrough_mask)``.

    ``scale`` is a scalar or an array with one entry per row of
    ``v.reshape(-1, v.shape[-1])``.
    """
    v = np.ascontiguousarray(v)
    shape = v.shape
    v2d = v.reshape(-1, shape[-1]) if v.ndim else v.reshape(1, 1)
    s = np.asarray(scale, dtype=np.float64).reshape(-1)
    if s.size == 1:
        s = np.full(v2d.shape[0], s[0])
    if USE_NUMBA:
        out, mask = _fake_quant_nb(v2d, s, float(lo), float(hi))
    else:
        out, mask = _fake_quant_np(v2d, s, lo, hi)
    return out.reshape(shape), mask.reshape(shape)


def _trit_table(k: int, decode) -> np.ndarray:
    """Byte -> ``k`` trit values as float64; bytes that decode to nothing stay 0."""
    lut = np.zeros((256, k), dtype=np.float64)
    for byte in range(256):
        lut[byte] = decode(byte)
    return lut


TWO_BIT_TABLE = _trit_table(4, lambda v: TWO_BIT_DECODE[[(v >> (2 * j)) & 3 for j in range(4)]])
BASE243_TABLE = _trit_table(5, lambda v: [(v // 3 ** j) % 3 - 1 for j in range(5)] if v < 243 else 0)
TWO_BIT_TABLE_I8 = TWO_BIT_TABLE.astype(np.int8)
BASE243_TABLE_I8 = BASE243_TABLE.astype(np.int8)


# ---------------------------------------------------------------------------
# ternary packing
# ---------------------------------------------------------------------------

def _pack_two_bit_np(t):
    rows, cols = t.shape
    nbytes = (cols + 3) // 4
    codes = np.zeros((rows, nbytes * 4), dtype=np.uint8)
    codes[:, :cols] = np.where(t == 1, 1, np.where(t == -1, 2, 0))
    codes = codes.reshape(rows, nbytes, 4)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    return (codes << shifts).sum(axis=2, dtype=np.uint16).astype(np.uint8)


@_njit
def _pack_two_bit_nb(t):
    rows, cols = t.shape
    nbytes = (cols + 3) // 4
    out = np.zeros((rows, nbytes), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            v = t[r, c]
            code = 1 if v == 1 else (2 if v == -1 else 0)
            out[r, c >> 2] |= np.uint8(code << (2 * (c & 3)))
    return out


def _unpack_two_bit_np(p, cols):
    rows = p.shape[0]
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    codes = (p[:, :, None] >> shifts) & 3
    return TWO_BIT_DECODE[codes].reshape(rows, -1)[:, :cols]


@_njit
def _unpack_table_nb(p, cols, table):
    rows, nbytes = p.shape
    k = table.shape[1]
    out = np.empty((rows, nbytes * k), dtype=np.int8)
    for r in range(rows):
        for b in range(nbytes):
            s = table[p[r, b]]
            for j in range(k):
                out[r, b * k + j] = s[j]
    return out[:, :cols]


_POW3 = np.array([1, 3, 9, 27, 81], dtype=np.int64)


def _pack_base243_np(t):
    rows, cols = t.shape
    nbytes = (cols + 4) // 5
    digits = np.ones((rows, nbytes * 5), dtype=np.int64)  # padding trits are 0 -> digit 1
    digits[:, :cols] = t.astype(np.int64) + 1
    return (digits.reshape(rows, nbytes, 5) * _POW3).sum(axis=2).astype(np.uint8)


@_njit
def _pack_base243_nb(t):
    rows, cols = t.shape
    nbytes = (cols + 4) // 5
    out = np.empty((rows, nbytes), dtype=np.uint8)
    for r in range(rows):
        for b in range(nbytes):
            acc = 0
            p = 1
            for i in range(5):
                c = b * 5 + i
                d = 1 if c >= cols else t[r, c] + 1
                acc += d * p
                p *= 3
            out[r, b] = acc
    return out


def _unpack_base243_np(p, cols):
    rows = p.shape[0]
    v = p.astype(np.int64)[:, :, None]
    digits = (v // _POW3) % 3
    return (digits.reshape(rows, -1)[:, :cols] - 1).astype(np.int8)


def pack_two_bit(t: np.ndarray) -> np.ndarray:
    t = np.ascontiguousarray(t, dtype=np.int8)
    return _pack_two_bit_nb(t) if USE_NUMBA else _pack_two_bit_np(t)


def unpack_two_bit(p: np.ndarray, cols: int) -> np.ndarray:
    p = np.ascontiguousarray(p, dtype=np.uint8)
    if USE_NUMBA:
        return np.ascontiguousarray(_unpack_table_nb(p, cols, TWO_BIT_TABLE_I8))
    return _unpack_two_bit_np(p, cols)


def pack_base243(t: np.ndarray) -> np.ndarray:
    t = np.ascontiguousarray(t, dtype=np.int8)
    return _pack_base243_nb(t) if USE_NUMBA else _pack_base243_np(t)


def unpack_base243(p: np.ndarray, cols: int) -> np.ndarray:
    p = np.ascontiguousarray(p, dtype=np.uint8)
    if USE_NUMBA:
        return np.ascontiguousarray(_unpack_table_nb(p, cols, BASE243_TABLE_I8))
    return _unpack_base243_np(p, cols)


# ---------------------------------------------------------------------------
# packed ternary products: accumulate add / subtract, no weight multiplies
# ---------------------------------------------------------------------------

@_njit
def _matmul_table_nb(x, p, table):
    # branchless: each byte expands to k signs in {-1, 0, +1}; adding 0 * x is exact.
    # One accumulator per byte lane keeps the adds independent.
    n = x.shape[0]
    rows, nbytes = p.shape
    k = table.shape[1]
    out = np.zeros((n, rows), dtype=np.float64)
    lanes = np.zeros(k, dtype=np.float64)
    for i in range(n):
        xi = x[i]
        for r in range(rows):
            lanes[:] = 0.0
            for b in range(nbytes):
                s = table[p[r, b]]
                base = b * k
                for j in range(k):
                    lanes[j] += s[j] * xi[base + j]
            out[i, r] = lanes.sum()
    return out


@_njit
def _matmul_table_batched_nb(xt, p, table):
    # xt is [cols, n]: decode each byte once and update all n outputs of the row
    n = xt.shape[1]
    rows, nbytes = p.shape
    k = table.shape[1]
    out = np.zeros((rows, n), dtype=np.float64)
    for r in range(rows):
        acc = out[r]
        for b in range(nbytes):
            s = table[p[r, b]]
            base = b * k
            for j in range(k):
                sj = s[j]
                xc = xt[base + j]
                for i in range(n):
                    acc[i] += sj * xc[i]
    return out


_BATCHED_MIN_ROWS = 8


def _padded(x, width):
    if x.shape[1] == width:
        return x
    out = np.zeros((x.shape[0], width), dtype=x.dtype)
    out[:, : x.shape[1]] = x
    return out


def _matmul_two_bit_np(x, p, cols):
    # add where the code is +1, subtract where it is -1; reserved codes count as 0
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    codes = ((p[:, :, None] >> shifts) & 3).reshape(p.shape[0], -1)
    xp = _padded(x, codes.shape[1])
    plus = (codes == 1).astype(np.float64)
    minus = (codes == 2).astype(np.float64)
    return xp @ plus.T - xp @ minus.T


def _matmul_base243_np(x, p, cols):
    t = _unpack_base243_np(p, cols)
    plus = (t == 1).astype(np.float64)
    minus = (t == -1).astype(np.float64)
    return x @ plus.T - x @ minus.T


def ternary_matmul(x: np.ndarray, payload: np.ndarray, cols: int, encoding: str) -> np.ndarray:
    """``x @ T^T`` for a packed ternary ``T`` of shape ``[rows, cols]``; ``x`` is ``[n, cols]``.

    Accumulates in float64 and returns float64.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if encoding == "two_bit":
        table, fallback = TWO_BIT_TABLE, _matmul_two_bit_np
    elif encoding == "base243":
        table, fallback = BASE243_TABLE, _matmul_base243_np
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    if USE_NUMBA:
        xp = _padded(x, payload.shape[1] * table.shape[1])
        if x.shape[0] >= _BATCHED_MIN_ROWS:
            return _matmul_table_batched_nb(np.ascontiguousarray(xp.T), payload, table).T
        return _matmul_table_nb(xp, payload, table)
    return fallback(x, payload, cols)


def warmup() -> None:
    """Trigger compilation of every kernel on tiny inputs."""
    t = np.array([[1, 0, -1, 1, 0, -1]], dtype=np.int8)
    x = np.ones((1, 6), dtype=np.float64)
    for enc, packer in (("two_bit", pack_two_bit), ("base243", pack_base243)):
        ternary_matmul(x, packer(t), 6, enc)
    unpack_two_bit(pack_two_bit(t), 6)
    unpack_base243(pack_base243(t), 6)
    fake_quant(x, 1.0, -1, 1)
