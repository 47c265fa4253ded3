"""Dense linear algebra used by the Hessian-based compressors.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, C-contiguous
(row-major).  Every routine also accepts a stack of matrices with leading
batch axes, which lets the masked quantizer factor one Hessian per weight
row without a Python loop over rows.

All reductions run in a fixed order so results are bit-reproducible for a
given input, independent of BLAS threading.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import DataError, NotPositiveDefiniteError, NumericalError

DenseMatrix = np.ndarray

MAGIC = b"SRCRMAT1"
_HEADER = struct.Struct("<8sII")
CSV_MAX_DIM = 64
SYMMETRY_RTOL = 1e-9


def as_matrix(a, name: str = "matrix") -> DenseMatrix:
    """Validate ``a`` as a finite 2-D matrix; returns a C-contiguous float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or Inf")
    return arr


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix product with the inner sum accumulated left to right over ``k``.

    Supports leading batch axes (broadcast like ``numpy.matmul``).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2:
        raise DataError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DataError(f"dimension mismatch: {a.shape} x {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]))
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def _check_square_symmetric(m: np.ndarray) -> None:
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise DataError(f"expected square matrix, got shape {m.shape}")
    scale = np.max(np.abs(m)) if m.size else 0.0
    if m.size and np.max(np.abs(m - np.swapaxes(m, -1, -2))) > SYMMETRY_RTOL * max(scale, 1e-300):
        raise DataError("matrix is not symmetric")


def cholesky(m: DenseMatrix) -> DenseMatrix:
    """Lower-triangular ``L`` with ``L @ L.T == m``; no pivoting.

    Raises:
        NotPositiveDefiniteError: a pivot (leading-minor ratio) is <= 0. The
            exception carries the offending pivot index.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_square_symmetric(m)
    n = m.shape[-1]
    L = np.zeros_like(m)
    for j in range(n):
        row = L[..., j, :j]
        pivot = m[..., j, j] - np.sum(row * row, axis=-1)
        bad = ~(pivot > 0)
        if np.any(bad):
            raise NotPositiveDefiniteError(j, float(np.min(pivot)))
        d = np.sqrt(pivot)
        L[..., j, j] = d
        if j + 1 < n:
            below = np.sum(L[..., j + 1:, :j] * row[..., None, :], axis=-1)
            L[..., j + 1:, j] = (m[..., j + 1:, j] - below) / d[..., None]
    return L


def _lower_inverse(L: np.ndarray) -> np.ndarray:
    n = L.shape[-1]
    Y = np.zeros_like(L)
    for i in range(n):
        acc = np.sum(L[..., i, :i, None] * Y[..., :i, :], axis=-2)
        rhs = -acc
        rhs[..., i] += 1.0
        Y[..., i, :] = rhs / L[..., i, i, None]
    return Y


def invert_psd(m: DenseMatrix, dampening: float = 0.0) -> DenseMatrix:
    """Return ``(m + lam*I)^-1`` with ``lam = dampening * mean(diag(m))``.

    The inverse is assembled as ``Linv.T @ Linv`` and is exactly symmetric.
    """
    m = np.asarray(m, dtype=np.float64)
    _check_square_symmetric(m)
    if dampening < 0:
        raise DataError("dampening must be non-negative")
    damped = damp(m, dampening)
    try:
        L = cholesky(damped)
    except NotPositiveDefiniteError as exc:
        raise NumericalError(
            f"matrix is not invertible after dampening {dampening} (pivot {exc.pivot})"
        ) from exc
    Linv = _lower_inverse(L)
    return matmul(np.swapaxes(Linv, -1, -2), Linv)


def hessian(x: DenseMatrix) -> DenseMatrix:
    """``2 X X^T`` for calibration inputs laid out as (features x samples)."""
    x = as_matrix(x, "calibration inputs")
    return 2.0 * matmul(x, x.T)


def damp(h: np.ndarray, dampening: float) -> np.ndarray:
    """Add ``dampening * mean(diag)`` to the diagonal (per matrix in a stack)."""
    out = np.array(h, dtype=np.float64, copy=True)
    if dampening:
        n = out.shape[-1]
        idx = np.arange(n)
        lam = dampening * np.mean(np.diagonal(out, axis1=-2, axis2=-1), axis=-1)
        out[..., idx, idx] += np.asarray(lam)[..., None]
    return out


def inverse_cholesky_upper(h: np.ndarray) -> np.ndarray:
    """Upper-triangular ``U`` with ``U.T @ U == inv(h)``.

    Row ``k`` of ``U`` restricted to columns ``k:`` equals the first row of
    the same factor computed for ``h[k:, k:]``, which is what the column
    sweeps in the compressors rely on.
    """
    return np.swapaxes(cholesky(invert_psd(h, 0.0)), -1, -2)


def frobenius_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom else 1.0))


# -- file formats -----------------------------------------------------------

def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_matrix(m: DenseMatrix) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, rows, cols) + m.astype("<f4").tobytes(order="C")


def decode_matrix(blob: bytes) -> DenseMatrix:
    if len(blob) < _HEADER.size:
        raise DataError("truncated SRCRMAT1 header")
    magic, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise DataError(f"SRCRMAT1 payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return as_matrix(data.reshape(rows, cols))


def _parse_csv_matrix(text: str) -> DenseMatrix:
    rows = []
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        try:
            rows.append([float(c) for c in rec])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    if not rows:
        raise DataError("empty CSV matrix")
    width = len(rows[0])
    for i, r in enumerate(rows, start=1):
        if len(r) != width:
            raise DataError(f"row {i} has {len(r)} columns, expected {width}")
    if len(rows) > CSV_MAX_DIM or width > CSV_MAX_DIM:
        raise DataError(f"CSV matrices are limited to {CSV_MAX_DIM}x{CSV_MAX_DIM}")
    return as_matrix(rows)


def read_matrix(path: str | os.PathLike) -> DenseMatrix:
    """Load an SRCRMAT1 file, or a CSV matrix if the magic is absent."""
    blob = Path(path).read_bytes()
    if blob.startswith(MAGIC):
        return decode_matrix(blob)
    return _parse_csv_matrix(blob.decode())


def write_matrix(path: str | os.PathLike, m: DenseMatrix) -> None:
    """Save as CSV when ``path`` ends in ``.csv``, otherwise as SRCRMAT1 (float32)."""
    m = as_matrix(m)
    if str(path).lower().endswith(".csv"):
        if max(m.shape) > CSV_MAX_DIM:
            raise DataError(f"CSV matrices are limited to {CSV_MAX_DIM}x{CSV_MAX_DIM}")
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in m])
        atomic_write(path, buf.getvalue())
    else:
        atomic_write(path, encode_matrix(m))
