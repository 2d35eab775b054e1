"""Dense matrix/vector kernels used throughout the package.

Everything here operates on small dense ``numpy`` arrays (nothing beyond
~60x60): SPD inversion with an explicit pivot floor, SVD-based null-space
extraction, quadratic forms, and batched variants of the SPD machinery for
vectorized rollout evaluation. All functions are pure and thread-safe.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import NotSPD, RankDeficientWarning

DEFAULT_RIDGE_FLOOR = 1e-10
DEFAULT_NULLSPACE_TOL = 1e-10


def _as_square(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def cholesky_lower(m: np.ndarray, floor: float = DEFAULT_RIDGE_FLOOR) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    Raises NotSPD as soon as a pivot is <= ``floor``; callers that can
    tolerate near-singularity may add a ridge and retry.
    """
    a = _as_square(m)
    n = a.shape[0]
    if n and np.max(np.abs(a - a.T)) > 1e-9 * max(1.0, np.max(np.abs(a))):
        raise NotSPD("matrix is not symmetric within 1e-9")
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if not pivot > floor:
            raise NotSPD(f"pivot {pivot:.3e} at column {j} is <= floor {floor:.1e}")
        low[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def invert_spd(m: np.ndarray, floor: float = DEFAULT_RIDGE_FLOOR) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky.

    Raises NotSPD when a pivot falls at or below ``floor``.
    """
    low = cholesky_lower(m, floor=floor)
    n = low.shape[0]
    eye = np.eye(n)
    # two triangular solves: L y = I, L' x = y
    y = np.linalg.solve(low, eye)
    inv = np.linalg.solve(low.T, y)
    return 0.5 * (inv + inv.T)


def solve_spd(m: np.ndarray, b: np.ndarray, floor: float = DEFAULT_RIDGE_FLOOR) -> np.ndarray:
    """Solve m @ x = b for SPD m."""
    low = cholesky_lower(m, floor=floor)
    return np.linalg.solve(low.T, np.linalg.solve(low, np.asarray(b, dtype=float)))


def quad_form(v: np.ndarray, m_inv: np.ndarray) -> float:
    """v' M^{-1} v for a precomputed inverse (or any symmetric matrix)."""
    v = np.asarray(v, dtype=float)
    return float(v @ m_inv @ v)


def null_space_basis(c: np.ndarray, tol: float = DEFAULT_NULLSPACE_TOL) -> np.ndarray:
    """Orthonormal basis of the orthogonal complement of col(c).

    For c of shape (L, p) with numerical rank r, returns U of shape
    (L, L - r) with U'U = I and U'c = 0 (within tol * ||c||). Warns with
    RankDeficientWarning when r < p; the basis then has more columns.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim != 2:
        raise ValueError("null_space_basis expects a 2-d array")
    n_rows, n_cols = c.shape
    left, singular, _ = np.linalg.svd(c, full_matrices=True)
    smax = singular[0] if singular.size else 0.0
    rank = int(np.sum(singular > tol * smax)) if smax > 0 else 0
    if rank < min(n_rows, n_cols):
        warnings.warn(
            f"numerical rank {rank} below column count {n_cols}",
            RankDeficientWarning,
            stacklevel=2,
        )
    return left[:, rank:]


def batched_cholesky_mask(stack: np.ndarray, floor: float = DEFAULT_RIDGE_FLOOR) -> np.ndarray:
    """SPD mask for a (..., n, n) stack: True where all Cholesky pivots > floor.

    Column-at-a-time batched Cholesky; matrices that fail keep False and
    their remaining pivots are not trusted.
    """
    a = np.asarray(stack, dtype=float).copy()
    n = a.shape[-1]
    ok = np.ones(a.shape[:-2], dtype=bool)
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[..., j, j] - np.einsum("...k,...k->...", low[..., j, :j], low[..., j, :j])
        good = pivot > floor
        ok &= good
        safe = np.where(good, pivot, 1.0)
        low[..., j, j] = np.sqrt(safe)
        if j + 1 < n:
            tail = a[..., j + 1 :, j] - np.einsum(
                "...ik,...k->...i", low[..., j + 1 :, :j], low[..., j, :j]
            )
            low[..., j + 1 :, j] = tail / low[..., j, j][..., None]
    return ok


def batched_invert_spd(
    stack: np.ndarray, floor: float = DEFAULT_RIDGE_FLOOR
) -> tuple[np.ndarray, np.ndarray]:
    """Invert a (..., n, n) stack of symmetric matrices, masking non-SPD entries.

    Returns (inverses, ok). Entries with ok == False hold the identity and
    must not be consumed; callers drop or resample those rollouts.
    """
    a = np.asarray(stack, dtype=float)
    ok = batched_cholesky_mask(a, floor=floor)
    eye = np.eye(a.shape[-1])
    patched = np.where(ok[..., None, None], a, eye)
    inv = np.linalg.inv(patched)
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
    return inv, ok
