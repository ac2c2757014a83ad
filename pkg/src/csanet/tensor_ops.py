"""Dense float64 tensor primitives shared by every other module.

Values are plain C-contiguous ``numpy.float64`` arrays. All operations are
pure and return new arrays; callers never see an argument mutated.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyInputError(ValueError):
    """An operation received an empty tensor where data is required."""


def as_tensor(data, shape=None) -> Array:
    """Coerce ``data`` to a contiguous float64 array, optionally reshaped."""
    out = np.asarray(data, dtype=np.float64)
    if shape is not None:
        out = out.reshape(shape)
    return np.ascontiguousarray(out)


def matmul(a, b) -> Array:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n).

    Delegates to numpy's GEMM, which is deterministic for fixed inputs in a
    fixed environment; the regression tests pin results against a naive
    triple-loop oracle.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(
            f"matmul needs two matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"inner extents differ: {a.shape} x {b.shape}"
        )
    return a @ b


def reduce_mean_std(t, population: bool = True) -> tuple[float, float]:
    """Mean and standard deviation of all elements of ``t``.

    ``population`` selects the divide-by-N convention (the default used
    throughout the autocorrelation pipeline); otherwise divide-by-(N-1).
    The returned std may be exactly 0 for constant input; callers guard.
    """
    t = as_tensor(t)
    if t.size == 0:
        raise EmptyInputError("reduce_mean_std of an empty tensor")
    mean = float(t.mean())
    ddof = 0 if population else 1
    std = float(t.std(ddof=ddof)) if t.size > ddof else 0.0
    return mean, std


def broadcast_mul_channels(f, p) -> Array:
    """Scale each channel of ``f`` (C x H x W) by the matching entry of ``p`` (C)."""
    f = as_tensor(f)
    p = as_tensor(p)
    if f.ndim != 3 or p.ndim != 1 or f.shape[0] != p.shape[0]:
        raise ShapeMismatchError(
            f"cannot scale channels of {f.shape} by vector of shape {p.shape}"
        )
    return p[:, None, None] * f


def pairwise_sq_dist(rows) -> Array:
    """All pairwise squared L2 distances between the rows of a C x d matrix.

    Uses the centered Gram formulation; cancellation can produce tiny
    negative entries, which are clamped to 0. The result is bitwise
    symmetric with an exactly zero diagonal. Square roots are the caller's
    business (the derivative of sqrt is singular at 0).
    """
    rows = as_tensor(rows)
    if rows.ndim != 2:
        raise ShapeMismatchError(f"pairwise_sq_dist needs C x d rows, got {rows.shape}")
    if rows.size == 0:
        raise EmptyInputError("pairwise_sq_dist of an empty matrix")
    # Centering does not change the differences but improves conditioning
    # when rows share a large common offset.
    centered = rows - rows.mean(axis=0)
    sq_norms = np.einsum("ij,ij->i", centered, centered)
    gram = centered @ centered.T
    gram = (gram + gram.T) / 2.0  # enforce bitwise symmetry
    out = sq_norms[:, None] + sq_norms[None, :] - 2.0 * gram
    np.maximum(out, 0.0, out=out)
    np.fill_diagonal(out, 0.0)
    return out
