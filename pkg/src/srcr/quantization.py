"""Weight quantizers for a single linear layer.

Quantized storage is simulated: every quantizer returns the dequantized
matrix together with the grid that produced it and per-column error
bookkeeping.

Rows of a weight matrix are output channels and columns are input
features; groups and blocks always run along a row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DataError
from .numerics import (
    DenseMatrix,
    as_matrix,
    damp,
    hessian,
    inverse_cholesky_upper,
    matmul,
)

CASE_A = "full_caseA"
CASE_B = "masked_caseB"
_MODE_ALIASES = {"a": CASE_A, "full": CASE_A, CASE_A.lower(): CASE_A,
                 "b": CASE_B, "masked": CASE_B, CASE_B.lower(): CASE_B}

DEFAULT_GROUP_SIZE = 128
DEFAULT_BLOCK_SIZE = 128
DEFAULT_DAMPENING = 0.01
DEFAULT_NF4_BLOCK = 64
DEFAULT_OUTLIER_THRESHOLD = 6.0

NF4_LEVELS = np.array([
    -1.0, -0.6961928009986877, -0.5250730514526367, -0.39491748809814453,
    -0.28444138169288635, -0.18477343022823334, -0.09105003625154495, 0.0,
    0.07958029955625534, 0.16093020141124725, 0.24611230194568634, 0.33791524171829224,
    0.44070982933044434, 0.5626170039176941, 0.7229568362236023, 1.0,
])


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), x)


@dataclass
class QuantGrid:
    """Parameters of the grid a layer was quantized onto.

    ``scales`` and ``zero_points`` have one entry per (row, group); the int8
    scheme stores one scale per row and NF4 one absmax per (row, block).
    """

    scheme: str
    bits: int
    group_size: int
    scales: np.ndarray
    zero_points: Optional[np.ndarray] = None
    outlier_columns: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "bits": self.bits, "group_size": self.group_size}


@dataclass
class UniformGrid:
    """A fixed uniform grid shared by every group: levels ``(k - zero_point) * scale``."""

    scale: float
    zero_point: int
    bits: int

    @property
    def maxq(self) -> int:
        return 2 ** self.bits - 1


@dataclass
class QuantizedLayer:
    dequantized: DenseMatrix
    grid: QuantGrid
    per_column_error: np.ndarray
    delta_sq_norms: np.ndarray
    deltas: Optional[np.ndarray] = None
    active_terms: Optional[np.ndarray] = field(default=None, repr=False)

    def sidecar(self) -> dict:
        """JSON-ready metadata stored next to the dequantized matrix."""
        return {
            **self.grid.to_dict(),
            "per_column_error": [float(v) for v in self.per_column_error],
            "delta_sq_norms": [float(v) for v in self.delta_sq_norms],
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), indent=2, sort_keys=True)


def layer_objective(w: DenseMatrix, w_hat: DenseMatrix, x: DenseMatrix) -> float:
    """Squared Frobenius norm of ``W X - W_hat X``."""
    w = as_matrix(w, "w")
    w_hat = as_matrix(w_hat, "w_hat")
    x = as_matrix(x, "x")
    if w.shape != w_hat.shape or w.shape[1] != x.shape[0]:
        raise DataError(f"shape mismatch: w {w.shape}, w_hat {w_hat.shape}, x {x.shape}")
    r = matmul(w - w_hat, x)
    return float(np.sum(r * r))


def _check_bits(bits) -> int:
    if int(bits) != bits or not 1 <= bits <= 16:
        raise DataError(f"bit-width must be an integer in [1, 16], got {bits}")
    return int(bits)


def _check_positive(name: str, value) -> int:
    if int(value) != value or value < 1:
        raise DataError(f"{name} must be a positive integer, got {value}")
    return int(value)


def uniform_params(values: np.ndarray, bits: int, gate: Optional[np.ndarray] = None):
    """Per-row asymmetric min-max parameters over ``values`` (rows x group).

    The range is widened to contain 0 so that zero is always a grid level.
    Entries where ``gate`` is False are ignored. An all-zero group gets
    scale 1 and zero point 0.
    """
    maxq = 2 ** bits - 1
    if gate is None:
        lo = values.min(axis=1)
        hi = values.max(axis=1)
    else:
        lo = np.where(gate, values, np.inf).min(axis=1)
        hi = np.where(gate, values, -np.inf).max(axis=1)
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    scale = (hi - lo) / maxq
    scale = np.where(scale > 0, scale, 1.0)
    zero = round_half_away(-lo / scale)
    return scale, zero


def uniform_fake_quant(x, scale, zero, maxq: int) -> np.ndarray:
    q = np.clip(round_half_away(x / scale) + zero, 0, maxq)
    return (q - zero) * scale


def _column_errors(w: np.ndarray, w_hat: np.ndarray) -> np.ndarray:
    d = w - w_hat
    return np.sum(d * d, axis=0)


def rtn_quantize(w: DenseMatrix, bits: int, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedLayer:
    """Round-to-nearest onto a per-group asymmetric uniform grid."""
    w = as_matrix(w, "w")
    bits = _check_bits(bits)
    group_size = _check_positive("group_size", group_size)
    rows, cols = w.shape
    if rows == 0 or cols == 0:
        raise DataError("cannot quantize an empty matrix")
    maxq = 2 ** bits - 1
    out = np.empty_like(w)
    scales, zeros = [], []
    for g0 in range(0, cols, group_size):
        blk = w[:, g0:g0 + group_size]
        scale, zero = uniform_params(blk, bits)
        out[:, g0:g0 + group_size] = uniform_fake_quant(blk, scale[:, None], zero[:, None], maxq)
        scales.append(scale)
        zeros.append(zero)
    grid = QuantGrid("uniform_asymmetric", bits, group_size,
                     np.stack(scales, axis=1), np.stack(zeros, axis=1).astype(np.int64))
    return QuantizedLayer(out, grid, _column_errors(w, out), np.zeros(cols))


def nf4_quantize(w: DenseMatrix, block_size: int = DEFAULT_NF4_BLOCK) -> QuantizedLayer:
    """Blockwise absmax scaling onto the 16 NormalFloat4 levels."""
    w = as_matrix(w, "w")
    block_size = _check_positive("block_size", block_size)
    rows, cols = w.shape
    out = np.empty_like(w)
    absmaxes = []
    for b0 in range(0, cols, block_size):
        blk = w[:, b0:b0 + block_size]
        absmax = np.max(np.abs(blk), axis=1)
        absmax = np.where(absmax > 0, absmax, 1.0)
        normed = blk / absmax[:, None]
        idx = np.argmin(np.abs(normed[..., None] - NF4_LEVELS), axis=-1)
        out[:, b0:b0 + block_size] = NF4_LEVELS[idx] * absmax[:, None]
        absmaxes.append(absmax)
    grid = QuantGrid("nf4", 4, block_size, np.stack(absmaxes, axis=1))
    return QuantizedLayer(out, grid, _column_errors(w, out), np.zeros(cols))


def int8_absmax_quantize(
    w: DenseMatrix, outlier_threshold: Optional[float] = DEFAULT_OUTLIER_THRESHOLD
) -> QuantizedLayer:
    """Row-wise absmax int8. Columns holding any ``|w| > outlier_threshold`` pass through."""
    w = as_matrix(w, "w")
    rows, cols = w.shape
    if outlier_threshold is None:
        outliers = np.zeros(cols, dtype=bool)
    else:
        outliers = np.any(np.abs(w) > outlier_threshold, axis=0)
    regular = np.where(outliers[None, :], 0.0, w)
    absmax = np.max(np.abs(regular), axis=1) if cols else np.zeros(rows)
    scale = np.where(absmax > 0, 127.0 / np.where(absmax > 0, absmax, 1.0), 1.0)
    q = np.clip(round_half_away(regular * scale[:, None]), -127, 127)
    out = q / scale[:, None]
    out[:, outliers] = w[:, outliers]
    grid = QuantGrid("int8_absmax", 8, cols, scale[:, None], outlier_columns=np.flatnonzero(outliers))
    return QuantizedLayer(out, grid, _column_errors(w, out), np.zeros(cols))


def _normalize_mode(mask_mode: str) -> str:
    try:
        return _MODE_ALIASES[str(mask_mode).lower()]
    except KeyError:
        raise DataError(f"unknown mask mode {mask_mode!r}") from None


def _row_hessians(h: np.ndarray, gate: np.ndarray):
    """One Hessian per distinct mask row: pruned rows/columns zeroed, diagonal kept."""
    patterns, owner = np.unique(gate, axis=0, return_inverse=True)
    keep = patterns.astype(np.float64)
    hs = h[None, :, :] * (keep[:, :, None] * keep[:, None, :])
    idx = np.arange(h.shape[0])
    hs[:, idx, idx] = np.diag(h)
    return hs, np.asarray(owner).reshape(-1)


def gptq_quantize(
    w: DenseMatrix,
    x: Optional[DenseMatrix],
    bits: int,
    group_size: int = DEFAULT_GROUP_SIZE,
    block_size: int = DEFAULT_BLOCK_SIZE,
    dampening: float = DEFAULT_DAMPENING,
    mask: Optional[np.ndarray] = None,
    mask_mode: str = CASE_A,
    *,
    h: Optional[np.ndarray] = None,
    grid: Optional[UniformGrid] = None,
) -> QuantizedLayer:
    """Quantize ``w`` column by column, pushing each column's error onto later columns.

    Args:
        w: weights, (out_features x in_features).
        x: calibration inputs, (in_features x samples). Ignored when ``h`` is given.
        bits: uniform grid bit-width.
        group_size: columns sharing one scale/zero point; parameters are fitted
            when the sweep reaches a group's first column.
        block_size: the inverse-Hessian factor is recomputed for the remaining
            columns at every block boundary.
        dampening: diagonal regularization as a fraction of the mean diagonal.
        mask: boolean keep-mask, required for Case B.
        mask_mode: ``full_caseA`` quantizes every weight with the full Hessian;
            ``masked_caseB`` leaves pruned weights at exactly 0, drops their
            errors and uses a per-row Hessian with pruned coordinates decoupled.
        h: explicit Hessian instead of ``2 X X^T``.
        grid: fixed grid used for every group instead of fitted min-max grids.

    Returns:
        QuantizedLayer whose ``per_column_error[j]`` is the squared norm of the
        (gated) immediate error of column ``j`` after the accumulated updates
        ``deltas[:, j]`` were applied, and ``delta_sq_norms[j]`` the squared
        norm of those updates.
    """
    w = as_matrix(w, "w")
    mode = _normalize_mode(mask_mode)
    rows, cols = w.shape
    if bits is None and grid is not None:
        bits = grid.bits
    bits = _check_bits(bits)
    group_size = _check_positive("group_size", group_size)
    block_size = _check_positive("block_size", block_size)
    if h is None:
        if x is None:
            raise DataError("gptq_quantize needs calibration inputs or a Hessian")
        x = as_matrix(x, "x")
        if x.shape[0] != cols:
            raise DataError(f"x has {x.shape[0]} features, w has {cols} columns")
        h = hessian(x)
    else:
        h = as_matrix(h, "hessian")
        if h.shape != (cols, cols):
            raise DataError(f"hessian shape {h.shape} does not match {cols} columns")

    if mode == CASE_B:
        if mask is None:
            raise DataError("masked_caseB requires a mask")
        gate = np.asarray(mask, dtype=bool)
        if gate.shape != w.shape:
            raise DataError(f"mask shape {gate.shape} does not match weights {w.shape}")
    else:
        if mask is not None and np.shape(mask) != w.shape:
            raise DataError(f"mask shape {np.shape(mask)} does not match weights {w.shape}")
        gate = np.ones_like(w, dtype=bool)

    hs, owner = _row_hessians(h, gate)
    hs = damp(hs, dampening)

    maxq = grid.maxq if grid is not None else 2 ** bits - 1
    W = w.copy()
    Q = np.zeros_like(w)
    deltas = np.zeros_like(w)
    col_err = np.zeros(cols)
    delta_sq = np.zeros(cols)
    n_groups = -(-cols // group_size)
    scales = np.zeros((rows, n_groups))
    zeros = np.zeros((rows, n_groups))
    scale = zero = None

    for i1 in range(0, cols, block_size):
        i2 = min(i1 + block_size, cols)
        U = inverse_cholesky_upper(hs[:, i1:, i1:])
        for j in range(i1, i2):
            jj = j - i1
            if j % group_size == 0:
                g = j // group_size
                if grid is None:
                    scale, zero = uniform_params(W[:, j:j + group_size], bits, gate[:, j:j + group_size])
                else:
                    scale = np.full(rows, float(grid.scale))
                    zero = np.full(rows, float(grid.zero_point))
                scales[:, g], zeros[:, g] = scale, zero
            col = W[:, j]
            keep = gate[:, j]
            delta = np.where(keep, col - w[:, j], 0.0)
            deltas[:, j] = delta
            delta_sq[j] = np.sum(delta * delta)
            q = np.where(keep, uniform_fake_quant(col, scale, zero, maxq), 0.0)
            e = np.where(keep, col - q, 0.0)
            col_err[j] = np.sum(e * e)
            Q[:, j] = q
            urow = U[owner, jj, jj:]
            err = e / urow[:, 0]
            W[:, j] = q
            W[:, j + 1:] -= err[:, None] * urow[:, 1:]

    qgrid = QuantGrid("uniform_asymmetric", bits, group_size, scales, zeros.astype(np.int64))
    return QuantizedLayer(Q, qgrid, col_err, delta_sq, deltas, gate.sum(axis=0))
