"""Dense matrix kernels used by every forward/backward pass.

Matrices are plain 2-D numpy arrays in row-major order. Two precisions are
supported: float32 for training throughput, float64 for verification and
gradient checking. Kernels validate shapes, reject non-finite results and
report their output shapes to any active shape audit (see `shape_audit`).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}


class NonFiniteError(ArithmeticError):
    """A kernel produced NaN or Inf."""


def resolve_dtype(precision):
    """Map a precision name ('float32' | 'float64') or numpy dtype to a dtype."""
    if isinstance(precision, str):
        try:
            return DTYPES[precision]
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")
    return np.dtype(precision).type


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


# ---------------------------------------------------------------------------
# Shape audit
#
# Tests use this to assert that the NCE paths never materialize an activation
# with a vocabulary-sized dimension. Kernels and the output heads report every
# intermediate they allocate while an audit is active.
# ---------------------------------------------------------------------------

_ACTIVE_AUDITS: list[list[tuple[int, ...]]] = []


@contextlib.contextmanager
def shape_audit():
    """Collect the shapes of all kernel outputs allocated inside the block."""
    shapes: list[tuple[int, ...]] = []
    _ACTIVE_AUDITS.append(shapes)
    try:
        yield shapes
    finally:
        _ACTIVE_AUDITS.remove(shapes)


def record_shapes(*arrays) -> None:
    """Report allocated intermediates to active shape audits."""
    if _ACTIVE_AUDITS:
        for audit in _ACTIVE_AUDITS:
            audit.extend(np.shape(a) for a in arrays)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return out


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    """Matrix product of an m*k and a k*n matrix."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a @ b
    record_shapes(out)
    return _check_finite(out, "matmul")


def row_broadcast_add(m, v) -> np.ndarray:
    """Add the 1*n row vector v to every row of the B*n matrix m."""
    m, v = as_matrix(m), as_matrix(v)
    if v.shape[0] != 1 or v.shape[1] != m.shape[1]:
        raise ValueError(f"row broadcast needs a 1x{m.shape[1]} vector, got {v.shape}")
    out = m + v
    record_shapes(out)
    return _check_finite(out, "row_broadcast_add")


def _validate_indices(idx, ncols: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"column index list must be 1-D, got shape {idx.shape}")
    if idx.size == 0:
        raise ValueError("column index list is empty")
    # numpy would silently wrap negative indices; reject them explicitly
    if (idx < 0).any() or (idx >= ncols).any():
        bad = idx[(idx < 0) | (idx >= ncols)][0]
        raise IndexError(f"column index {bad} out of range for {ncols} columns")
    return idx


def gather_columns(w, c, idx) -> tuple[np.ndarray, np.ndarray]:
    """Select columns idx of the weight matrix w (H*V) and bias row c (1*V).

    Duplicate indices yield duplicated columns.
    """
    w, c = as_matrix(w), as_matrix(c)
    if c.shape != (1, w.shape[1]):
        raise ValueError(f"bias shape {c.shape} does not match weight columns {w.shape[1]}")
    idx = _validate_indices(idx, w.shape[1])
    wt = w[:, idx]
    ct = c[:, idx]
    record_shapes(wt, ct)
    return wt, ct


def combine_duplicate_columns(idx, *updates) -> tuple[np.ndarray, list[np.ndarray]]:
    """Sum update columns that share a target index.

    Returns (unique indices, per-matrix combined updates). Duplicates are
    accumulated in stable batch-position order, so the result is reproducible
    bit for bit at a fixed precision.
    """
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    unique = sorted_idx[starts]
    combined = [np.add.reduceat(u[:, order], starts, axis=1) for u in updates]
    return unique, combined


def scatter_add_columns(target_w, target_c, idx, dw, dc) -> None:
    """Accumulate update columns into target_w / target_c at columns idx.

    Duplicate indices accumulate the sum of their contributions. Mutates the
    targets in place.
    """
    target_w, target_c = as_matrix(target_w), as_matrix(target_c)
    dw, dc = as_matrix(dw), as_matrix(dc)
    idx = _validate_indices(idx, target_w.shape[1])
    if dw.shape != (target_w.shape[0], idx.size):
        raise ValueError(f"update shape {dw.shape} does not match {target_w.shape[0]}x{idx.size}")
    if dc.shape != (1, idx.size):
        raise ValueError(f"bias update shape {dc.shape} does not match 1x{idx.size}")
    unique, (dw_sum, dc_sum) = combine_duplicate_columns(idx, dw, dc)
    target_w[:, unique] += dw_sum
    target_c[:, unique] += dc_sum
    if not (np.isfinite(target_w[:, unique]).all() and np.isfinite(target_c[:, unique]).all()):
        raise NonFiniteError("scatter_add_columns produced a non-finite value")


def scatter_add_rows(target, idx, rows) -> None:
    """Row-wise counterpart of scatter_add_columns (embedding tables)."""
    target = as_matrix(target)
    rows = as_matrix(rows)
    idx = _validate_indices(idx, target.shape[0])
    unique, (summed,) = combine_duplicate_columns(idx, rows.T)
    target[unique] += summed.T
    if not np.isfinite(target[unique]).all():
        raise NonFiniteError("scatter_add_rows produced a non-finite value")


def global_norm(grads) -> float:
    """Euclidean norm over all entries of all matrices, accumulated in float64."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(np.asarray(g), dtype=np.float64)))
    return math.sqrt(total)


def global_norm_clip(grads, threshold: float):
    """Scale all gradients by threshold/norm when their global norm exceeds it.

    Pure: returns the input list unchanged below the threshold (and when the
    norm is zero), a list of scaled copies otherwise.
    """
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    g = global_norm(grads)
    if g == 0.0 or g <= threshold:
        return list(grads)
    scale = threshold / g
    return [np.asarray(m) * np.asarray(m).dtype.type(scale) for m in grads]
