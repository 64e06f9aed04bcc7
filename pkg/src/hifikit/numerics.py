"""Dense linear algebra shared by the scoring, selection and analysis code.

All routines work in float64 and are pure functions of their arguments.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.stats import rankdata

from .errors import DegenerateInput, NotPositiveDefinite, ShapeMismatch

# relative to the largest diagonal entry of the regularized matrix
PIVOT_RTOL = 1e-12


def _as_square(Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    return Q


def symmetrize(Q) -> np.ndarray:
    """Return ``(Q + Q.T) / 2`` so that symmetry holds exactly."""
    Q = np.asarray(Q, dtype=np.float64)
    return 0.5 * (Q + Q.T)


def cholesky_regularized(Q, lam: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == Q + lam * I``.

    Raises :class:`NotPositiveDefinite` when the factorization breaks down or
    when any pivot (``L[j, j] ** 2``) falls below ``1e-12`` times the largest
    diagonal entry. Never returns NaNs.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    Q = _as_square(Q)
    n = Q.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    A = symmetrize(Q) + lam * np.eye(n)
    dmax = float(np.max(np.diag(A)))
    if dmax <= 0:
        raise NotPositiveDefinite("non-positive diagonal")
    try:
        L = scipy.linalg.cholesky(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    pivots = np.diag(L) ** 2
    if not np.all(np.isfinite(L)) or np.min(pivots) <= PIVOT_RTOL * dmax:
        j = int(np.argmin(pivots))
        raise NotPositiveDefinite(
            f"pivot {pivots[j]:.3e} at index {j} below tolerance {PIVOT_RTOL * dmax:.3e}"
        )
    return L


def solve_spd(Q, b, lam: float = 0.0) -> np.ndarray:
    """Solve ``(Q + lam I) x = b`` through the regularized Cholesky factor."""
    Q = _as_square(Q)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != Q.shape[0]:
        raise ShapeMismatch(f"rhs length {b.shape[0]} != matrix dim {Q.shape[0]}")
    L = cholesky_regularized(Q, lam)
    return scipy.linalg.cho_solve((L, True), b, check_finite=False)


def spectral_norm(W, iters: int = 500, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value of ``W`` by power iteration on ``W.T @ W``.

    Iteration stops once the estimate changes by less than ``tol`` (relative)
    between steps. A zero matrix gives 0.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D operator, got shape {W.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if W.size == 0 or not np.any(W):
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = W.T @ (W @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # landed in the null space; restart from a fresh direction
            v = rng.standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        new = float(np.linalg.norm(W @ v))
        if sigma > 0 and abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return sigma


def spearman_rank(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch("vectors must have equal length")
    if a.size < 2:
        raise DegenerateInput("need at least two observations")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise DegenerateInput("constant input has no rank correlation")
    ra = rankdata(a) - (a.size + 1) / 2
    rb = rankdata(b) - (b.size + 1) / 2
    return float(np.dot(ra, rb) / np.sqrt(np.dot(ra, ra) * np.dot(rb, rb)))
