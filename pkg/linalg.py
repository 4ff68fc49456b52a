# linalg.py
"""
Dense linear algebra used by every spectral computation.

All matrices are 2-D float64 numpy arrays. Checkpoints may hold 32-bit
values; they are promoted here because eigenvalue tails near the MP edge
are tolerance-sensitive.
"""

import numpy as np

from errors import ShapeMismatchError, SvdConvergenceError, NonFiniteError

# Guard for relative-error denominators (all-zero matrices)
REL_EPS = 1e-300


def as_matrix(a, label=None, require_finite=True):
    """
    Promote an array-like to a validated float64 matrix.

    Args:
        a: array-like with exactly two dimensions
        label: name used in error messages (tensor name, operand role)
        require_finite: reject NaN/Inf entries

    Returns:
        np.ndarray: C-contiguous float64 copy or view of `a`
    """
    name = label or "matrix"
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be non-empty, got shape {arr.shape}")
    if require_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b):
    """Matrix product with an explicit shape report on mismatch"""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"Cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}: "
            f"inner dimensions {a.shape[1]} != {b.shape[0]}"
        )
    return a @ b


def svd(a, label=None):
    """
    Thin singular value decomposition a = U @ diag(S) @ V.T.

    Delegates to LAPACK (gesdd through numpy). Non-convergence is reported
    with the matrix label rather than returning a partial spectrum.

    Returns:
        (U, S, V): U is rows x k, S is descending of length k = min(rows, cols),
        V is cols x k with right singular vectors as columns.
    """
    arr = as_matrix(a, label)
    try:
        u, s, vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise SvdConvergenceError(f"SVD did not converge for {label or 'matrix'} {arr.shape}: {e}") from e
    # LAPACK already sorts descending; clamp tiny negative round-off
    return u, np.maximum(s, 0.0), vt.T


def singular_values(a, label=None):
    """Singular values only, sorted non-increasing"""
    arr = as_matrix(a, label)
    try:
        s = np.linalg.svd(arr, compute_uv=False)
    except np.linalg.LinAlgError as e:
        raise SvdConvergenceError(f"SVD did not converge for {label or 'matrix'} {arr.shape}: {e}") from e
    return np.maximum(s, 0.0)


def frobenius_norm(a):
    return float(np.linalg.norm(as_matrix(a), ord="fro"))


def relative_error(approx, exact):
    """||approx - exact||_F / max(||exact||_F, eps)"""
    approx = as_matrix(approx, "approximation")
    exact = as_matrix(exact, "reference")
    if approx.shape != exact.shape:
        raise ShapeMismatchError(f"Shapes differ: {approx.shape} vs {exact.shape}")
    return float(np.linalg.norm(approx - exact, ord="fro") / max(np.linalg.norm(exact, ord="fro"), REL_EPS))


def reconstruct(u, s, v):
    """U @ diag(S) @ V.T"""
    return (u * s) @ v.T


def orthonormality_defect(q):
    """max |Q^T Q - I| over all entries"""
    q = np.asarray(q, dtype=np.float64)
    return float(np.max(np.abs(q.T @ q - np.eye(q.shape[1]))))
