"""Quantization math: round-clamp, AbsMax / AbsMean scaling, INT8 and ternary
quantizers, plus the LLM.int8()-style and NF4 baselines.

Scales are computed in float64 so that a quantizer gives the same integer codes
whatever float width the caller works in.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class QuantRange:
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo <= 0 <= self.hi:
            raise ValueError(f"range must contain zero, got [{self.lo}, {self.hi}]")

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(range(self.lo, self.hi + 1))

    @property
    def max_abs(self) -> int:
        """Largest representable magnitude on the positive side, the AbsMax target."""
        return self.hi


INT8 = QuantRange(-128, 127)
TERNARY = QuantRange(-1, 1)


@dataclass(frozen=True)
class ActivationQuantParams:
    gamma: np.ndarray | float
    eps: float = DEFAULT_EPS


@dataclass(frozen=True)
class WeightQuantParams:
    beta: float
    eps: float = DEFAULT_EPS


def round_half_away(z: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero.

    Uses the exact fractional part, so values just below .5 never round up.
    """
    z = np.asarray(z)
    whole = np.trunc(z)
    frac = z - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(frac), 0).astype(z.dtype, copy=False)


def round_clamp(z, qrange: QuantRange) -> np.ndarray:
    """Round half away from zero, then clamp to ``[qrange.lo, qrange.hi]``.

    The result keeps the float dtype of ``z`` but holds integer values.
    """
    return np.clip(round_half_away(z), qrange.lo, qrange.hi)


def clamp_passthrough_mask(z, qrange: QuantRange) -> np.ndarray:
    """True where round_clamp did not have to clamp, i.e. where the clipped
    straight-through estimator lets the gradient pass."""
    r = round_half_away(z)
    return (r >= qrange.lo) & (r <= qrange.hi)


def absmax_scale(x_norm, qrange: QuantRange = INT8, eps: float = DEFAULT_EPS, axis: int | None = -1):
    """gamma = qrange.hi / (max|x_norm| + eps).

    ``axis=-1`` gives one scale per row (per token), kept as a trailing axis
    of size 1 so it broadcasts back onto ``x_norm``. ``axis=None`` gives a
    single per-tensor scale.
    """
    x = np.abs(np.asarray(x_norm, dtype=np.float64))
    if axis is None:
        m = x.max() if x.size else 0.0
        return float(qrange.max_abs / (m + eps))
    m = x.max(axis=axis, keepdims=True) if x.size else np.zeros(x.shape[:-1] + (1,))
    return qrange.max_abs / (m + eps)


def absmean_scale(w, eps: float = DEFAULT_EPS) -> float:
    """beta = 1 / (mean|W| + eps), one scale for the whole tensor."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("absmean_scale needs a non-empty weight tensor")
    return float(1.0 / (np.abs(w).mean() + eps))


def quantize_activations_int8(x_norm, eps: float = DEFAULT_EPS, axis: int | None = -1):
    """Return ``(q, gamma)`` with ``q = round_clamp(gamma * x_norm, INT8)``."""
    gamma = absmax_scale(x_norm, INT8, eps, axis)
    q = round_clamp(np.asarray(x_norm, dtype=np.float64) * gamma, INT8)
    return q, gamma


def quantize_weights_ternary(w, eps: float = DEFAULT_EPS):
    """Return ``(t, beta)`` with ``t = round_clamp(beta * W, TERNARY)`` in {-1, 0, 1}."""
    beta = absmean_scale(w, eps)
    t = round_clamp(np.asarray(w, dtype=np.float64) * beta, TERNARY)
    return t, beta


# ---------------------------------------------------------------------------
# INT8 vector-wise quantization with outlier decomposition
# ---------------------------------------------------------------------------

@dataclass
class Int8VectorwiseParams:
    row_scales: np.ndarray        # per row of X
    col_scales: np.ndarray        # per column of W
    outlier_threshold: float
    outlier_columns: np.ndarray   # indices into the inner dimension
    x_int8: np.ndarray = field(repr=False, default=None)
    w_int8: np.ndarray = field(repr=False, default=None)


def _vector_scales(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.abs(a).max(axis=axis) if a.size else np.zeros(a.shape[1 - axis])
    # all-zero vectors quantize to zero whatever the scale; keep it positive
    return np.where(m > 0, m / 127.0, 1.0)


def int8_vectorwise_decompose(x, w, alpha: float = 6.0) -> Int8VectorwiseParams:
    """Split ``X @ W`` into outlier columns and an INT8 remainder.

    Inner-dimension index ``j`` is an outlier when ``max_i |X[i, j]| > alpha``.
    Rows of the remaining ``X`` and columns of the remaining ``W`` get their own
    AbsMax scales.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"int8 matmul dimension mismatch: {x.shape} @ {w.shape}")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    colmax = np.abs(x).max(axis=0) if x.shape[0] else np.zeros(x.shape[1])
    outliers = np.nonzero(colmax > alpha)[0]
    regular = np.setdiff1d(np.arange(x.shape[1]), outliers)
    xr = x[:, regular].astype(np.float64)
    wr = w[regular, :].astype(np.float64)
    sx = _vector_scales(xr, axis=1) if regular.size else np.ones(x.shape[0])
    sw = _vector_scales(wr, axis=0) if regular.size else np.ones(w.shape[1])
    xq = round_clamp(xr / sx[:, None], INT8).astype(np.int8)
    wq = round_clamp(wr / sw[None, :], INT8).astype(np.int8)
    return Int8VectorwiseParams(sx, sw, float(alpha), outliers, xq, wq)


def int8_vectorwise_matmul(x, w, alpha: float = 6.0) -> np.ndarray:
    """``Y = X_out @ W_out + S_x * (X_int8 @ W_int8) * S_w`` (LLM.int8() style).

    With ``alpha=0`` every non-zero column is an outlier and the result equals
    the float product. With ``alpha=inf`` it is pure vector-wise INT8.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    p = int8_vectorwise_decompose(x, w, alpha)
    if p.outlier_columns.size == x.shape[1]:
        return x @ w
    y = np.zeros((x.shape[0], w.shape[1]), dtype=np.result_type(x.dtype, w.dtype, np.float32))
    if p.outlier_columns.size:
        y += x[:, p.outlier_columns] @ w[p.outlier_columns, :]
    acc = p.x_int8.astype(np.int32) @ p.w_int8.astype(np.int32)
    y += (acc * p.row_scales[:, None] * p.col_scales[None, :]).astype(y.dtype)
    return y


# ---------------------------------------------------------------------------
# NF4 quantile quantization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NF4Codebook:
    k: int
    levels: np.ndarray

    def __len__(self) -> int:
        return len(self.levels)


def nf4_build_codebook(k: int = 4) -> NF4Codebook:
    """Levels at the normal quantiles ``Q^-1(i / (2^k + 1))`` for ``i = 1..2^k``,
    rescaled so the outermost levels sit at -1 and +1."""
    n = 1 << k
    nd = NormalDist()
    q = np.array([nd.inv_cdf(i / (n + 1)) for i in range(1, n + 1)], dtype=np.float64)
    q = q / np.abs(q).max()
    return NF4Codebook(k, q.astype(np.float32))


def nearest_level(values: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the closest level for each value (ties go to the lower index)."""
    v = np.asarray(values, dtype=np.float32)
    mids = (levels[1:] + levels[:-1]) / 2
    hi = np.searchsorted(mids, v, side="left")
    lo = np.maximum(hi - 1, 0)
    d_hi = np.abs(v - levels[hi])
    d_lo = np.abs(v - levels[lo])
    return np.where(d_lo <= d_hi, lo, hi).astype(np.uint8)


def nf4_quantize(w, block_size: int = 64, codebook: NF4Codebook | None = None):
    """Blockwise NF4: returns ``(codes, absmax)`` with one absmax per block."""
    codebook = codebook or nf4_build_codebook()
    flat = np.asarray(w, dtype=np.float32).reshape(-1)
    if block_size <= 0 or flat.size % block_size:
        raise ValueError(f"block size {block_size} does not divide tensor length {flat.size}")
    blocks = flat.reshape(-1, block_size)
    absmax = np.abs(blocks).max(axis=1)
    safe = np.where(absmax > 0, absmax, 1.0).astype(np.float32)
    codes = nearest_level(blocks / safe[:, None], codebook.levels)
    return codes.reshape(-1), absmax


def nf4_dequantize(codes, absmax, block_size: int = 64, codebook: NF4Codebook | None = None,
                   shape=None) -> np.ndarray:
    codebook = codebook or nf4_build_codebook()
    codes = np.asarray(codes).reshape(-1, block_size)
    out = codebook.levels[codes] * np.asarray(absmax, dtype=np.float32)[:, None]
    return out.reshape(shape if shape is not None else -1)
