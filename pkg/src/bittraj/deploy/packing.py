"""Dense storage of ternary matrices and products against them.

Layouts (row-major, each row padded to whole bytes):

``two_bit``
    4 trits per byte, 2-bit codes ``00 = 0``, ``01 = +1``, ``10 = -1``
    (``11`` invalid), first column in the least significant bits.
``base243``
    5 trits per byte, byte value ``sum((t_i + 1) * 3**i)`` over the group.
    Padding trits are 0, so an all-zero group stores 121.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels

ENCODINGS = ("two_bit", "base243")
TRITS_PER_BYTE = {"two_bit": 4, "base243": 5}


class PackError(ValueError):
    pass


def _check_encoding(encoding: str) -> None:
    if encoding not in ENCODINGS:
        raise ValueError(f"unknown encoding {encoding!r}; expected one of {ENCODINGS}")


def payload_width(cols: int, encoding: str) -> int:
    _check_encoding(encoding)
    k = TRITS_PER_BYTE[encoding]
    return (cols + k - 1) // k


@dataclass(frozen=True)
class PackedTernaryMatrix:
    """Ternary ``[rows, cols]`` matrix ``T`` plus the scale that dequantizes it.

    ``scale`` is ``1 / beta``, so the float weight is ``scale * T``.
    """
    rows: int
    cols: int
    encoding: str
    payload: np.ndarray   # uint8 [rows, payload_width(cols)]
    scale: float = 1.0
    layout: str = "row-major"

    def __post_init__(self):
        _check_encoding(self.encoding)
        expect = (self.rows, payload_width(self.cols, self.encoding))
        if self.payload.dtype != np.uint8 or self.payload.shape != expect:
            raise PackError(f"payload must be uint8 {expect}, got {self.payload.dtype} {self.payload.shape}")
        if self.encoding == "base243":
            bad = self.payload >= 243
        else:
            bad = (self.payload & (self.payload >> 1) & 0x55) != 0  # some field is 11
        if bad.any():
            i, j = (int(v) for v in np.argwhere(bad)[0])
            raise PackError(f"byte {int(self.payload[i, j])} at ({i}, {j}) is not a valid {self.encoding} group")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def nbytes(self) -> int:
        return int(self.payload.nbytes)

    def unpack(self) -> np.ndarray:
        return unpack(self)

    def dense(self) -> np.ndarray:
        """Float32 weight ``scale * T``."""
        return (unpack(self).astype(np.float64) * self.scale).astype(np.float32)


def pack(t, encoding: str = "two_bit", scale: float = 1.0) -> PackedTernaryMatrix:
    """Pack a 2-D matrix with entries in {-1, 0, 1}.

    Raises:
        PackError: if the matrix is not 2-D or holds a non-ternary entry; the
            message names the first offending coordinate.
    """
    _check_encoding(encoding)
    arr = np.asarray(t)
    if arr.ndim != 2:
        raise PackError(f"expected a 2-D matrix, got shape {arr.shape}")
    bad = ~np.isin(arr, (-1, 0, 1))
    if bad.any():
        i, j = (int(v) for v in np.argwhere(bad)[0])
        raise PackError(f"entry {arr[i, j]!r} at ({i}, {j}) is not ternary")
    codes = arr.astype(np.int8)
    payload = kernels.pack_two_bit(codes) if encoding == "two_bit" else kernels.pack_base243(codes)
    return PackedTernaryMatrix(arr.shape[0], arr.shape[1], encoding, payload, float(scale))


def unpack(p: PackedTernaryMatrix) -> np.ndarray:
    if p.encoding == "two_bit":
        return kernels.unpack_two_bit(p.payload, p.cols)
    return kernels.unpack_base243(p.payload, p.cols)


def packed_matmul(p: PackedTernaryMatrix, x: np.ndarray) -> np.ndarray:
    """``x @ T^T`` (no scale) for ``x`` of shape ``[n, cols]``."""
    return kernels.ternary_matmul(x, p.payload, p.cols, p.encoding)


def packed_matvec(p: PackedTernaryMatrix, x, bias=None, bias_policy: str = "literal") -> np.ndarray:
    """``y = (x T^T + b) * scale`` with add/subtract accumulation.

    ``x`` is a vector of length ``cols`` or a batch ``[..., cols]``. Under the
    ``post_dequant`` policy the bias is added after scaling instead.

    Raises:
        ValueError: on a dimension mismatch or unknown bias policy.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1:] != (p.cols,):
        raise ValueError(f"input of shape {x.shape} does not match packed matrix {p.shape}")
    lead = x.shape[:-1]
    acc = packed_matmul(p, x.reshape(-1, p.cols)).astype(np.float64)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (p.rows,):
            raise ValueError(f"bias of shape {b.shape} does not match {p.rows} rows")
        if bias_policy == "literal":
            acc = (acc + b) * p.scale
        elif bias_policy == "post_dequant":
            acc = acc * p.scale + b
        else:
            raise ValueError(f"unknown bias policy {bias_policy!r}")
    else:
        acc = acc * p.scale
    return acc.astype(np.float32).reshape(*lead, p.rows)


def reference_matvec(p: PackedTernaryMatrix, x, bias=None, bias_policy: str = "literal") -> np.ndarray:
    """Unpack-then-float64-matmul oracle for :func:`packed_matvec`."""
    t = unpack(p).astype(np.float64)
    y = np.asarray(x, dtype=np.float64) @ t.T
    if bias is None:
        return y * p.scale
    b = np.asarray(bias, dtype=np.float64)
    return (y + b) * p.scale if bias_policy == "literal" else y * p.scale + b
