"""Operator norms by power iteration on A*A, with a dense oracle for small sizes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tolerances import DEFAULT, ConvergenceError

__all__ = ["NormEstimate", "power_norm", "dense_norm", "dense_matrix"]


@dataclass
class NormEstimate:
    value: float
    iterations: int
    rel_change: float


def power_norm(apply, apply_adj, shape, rtol: float | None = None, maxiter: int | None = None,
               seed: int = 0, x0=None, dtype=complex, block: int = 1, atol: float = 0.0,
               batched: bool = False) -> NormEstimate:
    """||A|| from power iteration on A*A.

    Stops when successive estimates of ||A||^2 differ by < rtol relatively.
    Raises ConvergenceError (carrying the last relative change) otherwise.
    With ``block`` > 1 a block of vectors is iterated and re-orthonormalized,
    taking the top Ritz value each step; this helps when the top singular
    values cluster. Norms below ``atol`` are returned without a convergence test.
    With ``batched`` the maps take and return 2-D arrays whose columns are
    the flattened block vectors, so one call serves the whole block.
    """
    rtol = DEFAULT.power_rtol if rtol is None else rtol
    maxiter = DEFAULT.power_maxiter if maxiter is None else maxiter
    cplx = np.issubdtype(np.dtype(dtype), np.complexfloating)
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    X = rng.standard_normal((size, block))
    if cplx:
        X = X + 1j * rng.standard_normal((size, block))
    if x0 is not None:
        X[:, 0] = np.asarray(x0, dtype=dtype).ravel()
    if block == 1:
        nx = np.linalg.norm(X)
        if nx == 0:
            return NormEstimate(0.0, 0, 0.0)
        X = X / nx
    else:
        X, _ = np.linalg.qr(X)

    def AA(v):
        return np.asarray(apply_adj(apply(v.reshape(shape))), dtype=X.dtype).ravel()

    def AA_block(X):
        if batched:
            return np.asarray(apply_adj(apply(X)), dtype=X.dtype)
        return np.stack([AA(X[:, j]) for j in range(X.shape[1])], axis=1)

    prev = None
    change = np.inf
    for it in range(1, maxiter + 1):
        Y = AA_block(X)
        if block == 1:
            lam = float(np.real(np.vdot(X[:, 0], Y[:, 0])))
            ny = np.linalg.norm(Y)
            if ny == 0 or np.sqrt(ny) < atol:
                return NormEstimate(float(np.sqrt(ny)), it, 0.0)
            X = Y / ny
        else:
            H = X.conj().T @ Y
            lam = float(np.linalg.eigvalsh((H + H.conj().T) / 2)[-1])
            if np.sqrt(max(lam, 0.0)) < atol or lam == 0:
                return NormEstimate(float(np.sqrt(max(lam, 0.0))), it, 0.0)
            X, _ = np.linalg.qr(Y)
        if prev is not None and prev > 0:
            change = abs(lam - prev) / prev
            # Rayleigh quotient converges twice as fast as the vector; require both to settle
            if change < rtol * 1e-2:
                return NormEstimate(float(np.sqrt(max(lam, 0.0))), it, change)
        prev = lam
    if change < rtol:
        return NormEstimate(float(np.sqrt(max(prev, 0.0))), maxiter, change)
    raise ConvergenceError(f"power iteration did not converge in {maxiter} steps", achieved=change)


def dense_matrix(apply, shape, dtype=complex) -> np.ndarray:
    """Matrix of a linear map acting on arrays of ``shape`` (column j = A e_j)."""
    size = int(np.prod(shape))
    cols = []
    for j in range(size):
        e = np.zeros(size, dtype=dtype)
        e[j] = 1
        cols.append(np.asarray(apply(e.reshape(shape))).ravel())
    return np.stack(cols, axis=1)


def dense_norm(apply, shape, dtype=complex) -> float:
    """Largest singular value of the dense matrix; the oracle for small grids."""
    return float(np.linalg.norm(dense_matrix(apply, shape, dtype), 2))
