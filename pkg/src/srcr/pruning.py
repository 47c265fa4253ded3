"""One-shot pruning with second-order error compensation.

Masks are boolean arrays shaped like the weight matrix, ``True`` = kept.
N:M patterns follow the "prune N of every M" convention: 2:8 removes two
weights from each aligned group of eight (25% sparsity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .exceptions import DataError
from .metrics import CompressionConfig, NMPattern, Pattern, parse_pattern, parse_sparsity
from .numerics import DenseMatrix, as_matrix, damp, hessian, inverse_cholesky_upper
from .quantization import DEFAULT_BLOCK_SIZE, DEFAULT_DAMPENING, layer_objective

SparsityMask = np.ndarray


@dataclass
class PruneReport:
    mask: SparsityMask
    pruned_weights: DenseMatrix
    layer_objective_delta: float
    achieved_sparsity: float


@dataclass(frozen=True)
class Violation:
    row: int
    start: int
    width: int
    zeros: int
    expected: str


@dataclass
class MaskReport:
    achieved_sparsity: float
    violations: list[Violation] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def pruned_per_row(sparsity, cols: int) -> int:
    """Number of zeros each row receives for unstructured sparsity."""
    return _round_half_up(parse_sparsity(sparsity) * cols)


def _check_target(w: np.ndarray, target: CompressionConfig):
    cols = w.shape[1]
    pattern = target.pattern
    if isinstance(pattern, NMPattern) and cols % pattern.m_group:
        raise DataError(f"group size {pattern.m_group} does not divide {cols} columns")
    return pattern


def _smallest(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort: ties go to the lower column index
    return np.argsort(scores, axis=1, kind="stable")[:, :k]


def magnitude_mask(w: DenseMatrix, target: CompressionConfig) -> SparsityMask:
    """Drop the smallest-magnitude weights of each row (or each N:M group)."""
    w = as_matrix(w, "w")
    pattern = _check_target(w, target)
    rows, cols = w.shape
    mask = np.ones((rows, cols), dtype=bool)
    if target.sparsity == 0:
        return mask
    r = np.arange(rows)[:, None]
    mag = np.abs(w)
    if isinstance(pattern, NMPattern):
        n, m = pattern.n_pruned, pattern.m_group
        for g0 in range(0, cols, m):
            mask[r, g0 + _smallest(mag[:, g0:g0 + m], n)] = False
    else:
        mask[r, _smallest(mag, pruned_per_row(target.sparsity, cols))] = False
    return mask


def sparsegpt_prune(
    w: DenseMatrix,
    x: DenseMatrix,
    target: CompressionConfig,
    block_size: int = DEFAULT_BLOCK_SIZE,
    dampening: float = DEFAULT_DAMPENING,
) -> PruneReport:
    """Prune ``w`` to ``target`` sparsity, compensating through the inverse Hessian.

    Columns are swept left to right. At each block start the inverse-Hessian
    factor of the remaining columns is recomputed and unstructured prune
    candidates for the block are chosen per row by ``w**2 / [H^-1]_jj``;
    N:M candidates are chosen at each group start from the current weights.
    Each zeroed weight's error is pushed onto the columns to its right.
    """
    w = as_matrix(w, "w")
    x = as_matrix(x, "x")
    rows, cols = w.shape
    if x.shape[0] != cols:
        raise DataError(f"x has {x.shape[0]} features, w has {cols} columns")
    if int(block_size) != block_size or block_size < 1:
        raise DataError(f"block_size must be a positive integer, got {block_size}")
    pattern = _check_target(w, target)
    mask = np.ones((rows, cols), dtype=bool)
    if target.sparsity == 0:
        return PruneReport(mask, w.copy(), 0.0, 0.0)

    s = target.sparsity
    h = damp(hessian(x), dampening)
    W = w.copy()
    r = np.arange(rows)[:, None]
    nm = isinstance(pattern, NMPattern)

    for i1 in range(0, cols, block_size):
        i2 = min(i1 + block_size, cols)
        U = inverse_cholesky_upper(h[i1:, i1:])
        d2 = np.diag(U) ** 2
        if not nm:
            k = _round_half_up(s * i2) - _round_half_up(s * i1)
            if k:
                sal = W[:, i1:i2] ** 2 / d2[: i2 - i1]
                mask[r, i1 + _smallest(sal, k)] = False
        for j in range(i1, i2):
            jj = j - i1
            if nm and j % pattern.m_group == 0:
                m = pattern.m_group
                sal = W[:, j:j + m] ** 2 / d2[jj:jj + m]
                mask[r, j + _smallest(sal, pattern.n_pruned)] = False
            col = W[:, j]
            q = np.where(mask[:, j], col, 0.0)
            err = (col - q) / U[jj, jj]
            W[:, j] = q
            W[:, j + 1:] -= np.outer(err, U[jj, jj + 1:])

    achieved = 1.0 - mask.mean()
    return PruneReport(mask, W, layer_objective(w, W, x), float(achieved))


def mask_overhead_bits(pattern: Pattern) -> float:
    """Bits per weight needed to store the mask in its most compact encoding."""
    if isinstance(pattern, str):
        pattern = parse_pattern(pattern)
    if isinstance(pattern, NMPattern):
        return math.log2(math.comb(pattern.m_group, pattern.n_pruned)) / pattern.m_group
    return 1.0 if pattern == "unstructured" else 0.0


def validate_mask(mask: SparsityMask, pattern: Pattern, target_sparsity=None) -> MaskReport:
    """List every row or group that breaks the pattern or the target density."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if isinstance(pattern, str):
        pattern = parse_pattern(pattern)
    rows, cols = mask.shape
    zeros = ~mask
    report = MaskReport(float(zeros.mean()) if mask.size else 0.0)
    if isinstance(pattern, NMPattern):
        n, m = pattern.n_pruned, pattern.m_group
        for g0 in range(0, cols, m):
            width = min(m, cols - g0)
            counts = zeros[:, g0:g0 + width].sum(axis=1)
            for row in np.flatnonzero((counts != n) | (width != m)):
                report.violations.append(Violation(int(row), g0, width, int(counts[row]), f"{n} of {m}"))
        return report
    target = Fraction(0) if target_sparsity is None else parse_sparsity(target_sparsity)
    if pattern == "none":
        target = Fraction(0)
    expected = target * cols
    counts = zeros.sum(axis=1)
    for row in range(rows):
        off = abs(Fraction(int(counts[row])) - expected)
        if (pattern == "none" and counts[row]) or off > 1:
            report.violations.append(
                Violation(row, 0, cols, int(counts[row]), f"{float(expected):g} zeros per row")
            )
    return report


def prune_config(sparsity, pattern: Optional[str] = None) -> CompressionConfig:
    """Convenience constructor for a pruning-only target."""
    if pattern and ":" in pattern:
        nmp = parse_pattern(pattern)
        return CompressionConfig(nmp.sparsity, 16, nmp)
    return CompressionConfig(parse_sparsity(sparsity), 16, pattern or "unstructured")
