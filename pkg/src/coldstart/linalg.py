"""Dense symmetric linear algebra for the interview-design objective.

The objective of an item set B is

    f(B) = tr((gamma * I + V_B C_B^{-2} V_B^T)^{-1})

where the columns of ``V_B`` are item latent vectors and ``C_B`` holds the
per-item noise standard deviations.  Everything here works on small dense
matrices (d up to a few hundred) and favours determinism over speed.
"""
from dataclasses import dataclass

import numba
import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import (
    DegenerateUpdateError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)

SYMMETRY_TOL = 1e-9
PIVOT_TOL = 1e-12
DEGENERATE_TOL = 1e-12


def _as_square(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def check_symmetric(m, tol=SYMMETRY_TOL):
    """Return ``m`` as a float array, raising if it is not symmetric."""
    m = _as_square(m)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return m


def cholesky_factor(m):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises SingularMatrixError when a pivot ``L[i, i]**2`` falls below
    ``1e-12 * max(diag(m))``.  The inverse routines below add a second,
    eigenvalue-based test, because a pivot can be far larger than the
    smallest eigenvalue.
    """
    m = check_symmetric(m)
    try:
        L = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from None
    pivots = np.diag(L) ** 2
    max_diag = float(np.max(np.diag(m))) if m.size else 0.0
    if m.size and (max_diag <= 0 or float(np.min(pivots)) < PIVOT_TOL * max_diag):
        raise SingularMatrixError(
            f"rank-deficient matrix (smallest pivot {float(np.min(pivots)):.3e})"
        )
    return L


def _inverse_factor(m):
    # L^{-1}, refusing matrices whose smallest eigenvalue is below
    # PIVOT_TOL * max(diag): tr(m^{-1}) >= 1 / lambda_min bounds it from above
    L = cholesky_factor(m)
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    tr = float(np.sum(Linv * Linv))
    if L.size and tr * float(np.max(np.diag(m))) > 1.0 / PIVOT_TOL:
        raise SingularMatrixError(f"matrix is numerically singular (trace of inverse {tr:.3e})")
    return Linv, tr


def trace_of_inverse(m):
    """tr(m^{-1}) for a symmetric positive definite ``m``.

    Computed as ||L^{-1}||_F^2 from the Cholesky factor, so the inverse is
    never formed explicitly.
    """
    return _inverse_factor(np.asarray(m, dtype=float))[1]


def spd_inverse(m):
    Linv, _ = _inverse_factor(np.asarray(m, dtype=float))
    return Linv.T @ Linv


def _item_weights(sigma, n):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ValueError("noise standard deviations must be positive and finite")
    return 1.0 / sigma**2


def gram_matrix(v_b, sigma=1.0, gamma=0.0):
    """Assemble gamma * I + sum_j sigma_j^{-2} v_j v_j^T explicitly."""
    v_b = np.asarray(v_b, dtype=float)
    if v_b.ndim != 2:
        raise ValueError("v_b must be a d x |B| matrix")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    w = _item_weights(sigma, v_b.shape[1])
    return gamma * np.eye(v_b.shape[0]) + (v_b * w) @ v_b.T


def objective_f(v_b, sigma=1.0, gamma=0.0):
    """Expected profile-estimation error of the item set whose vectors are ``v_b``.

    Parameters
    ----------
    v_b : array, shape (d, |B|)
        Latent vectors of the selected items, one per column.
    sigma : float or array of shape (|B|,)
        Noise standard deviation of each item's rating.
    gamma : float
        Ridge term added to the Gram matrix. With ``gamma=0`` the value is
        tr((V_B C_B^{-2} V_B^T)^{-1}) and requires the columns to span R^d.
    """
    v_b = np.asarray(v_b, dtype=float)
    if v_b.ndim != 2 or v_b.shape[1] < 1:
        raise ValueError("objective_f needs at least one item column")
    return trace_of_inverse(gram_matrix(v_b, sigma, gamma))


@dataclass(frozen=True)
class GramInverse:
    """Inverse of gamma * I + V_B C_B^{-2} V_B^T, kept read-only."""

    inverse: np.ndarray
    regularizer_gamma: float = 0.0

    def __post_init__(self):
        inv = np.array(self.inverse, dtype=float)
        if inv.ndim != 2 or inv.shape[0] != inv.shape[1]:
            raise ValueError("inverse must be square")
        if self.regularizer_gamma < 0:
            raise ValueError("regularizer_gamma must be nonnegative")
        inv.setflags(write=False)
        object.__setattr__(self, "inverse", inv)

    @property
    def dim(self):
        return self.inverse.shape[0]

    def trace(self):
        return float(np.trace(self.inverse))

    @classmethod
    def identity(cls, d, gamma):
        """Inverse of gamma * I."""
        if gamma <= 0:
            raise ValueError("gamma must be positive for an empty item set")
        return cls(np.eye(d) / gamma, gamma)

    @classmethod
    def from_items(cls, v_b, sigma=1.0, gamma=0.0):
        v_b = np.asarray(v_b, dtype=float)
        if v_b.shape[1] == 0:
            return cls.identity(v_b.shape[0], gamma)
        return cls(spd_inverse(gram_matrix(v_b, sigma, gamma)), gamma)


@numba.njit(cache=True)
def _sm_kernel(inv, X, s, q):
    d, n = X.shape
    z = np.empty(d)
    for j in range(n):
        for i in range(d):
            acc = 0.0
            for k in range(d):
                acc += inv[i, k] * X[k, j]
            z[i] = acc
        sj = 0.0
        qj = 0.0
        for i in range(d):
            sj += z[i] * z[i]
            qj += X[i, j] * z[i]
        s[j] = sj
        q[j] = qj


def sherman_morrison_terms(inv, X):
    """Per-column quantities driving rank-one updates of ``inv``.

    For each column x of ``X`` returns ``s = ||inv x||^2`` and
    ``q = x^T inv x``.  Every column is reduced in the same fixed order, so
    its result is bitwise independent of how many other columns are
    evaluated alongside it (BLAS kernels do not guarantee that, and greedy
    tie-breaking relies on it).
    """
    inv = np.ascontiguousarray(inv, dtype=float)
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.ascontiguousarray(X.reshape(inv.shape[0], -1))
    s = np.empty(X.shape[1])
    q = np.empty(X.shape[1])
    _sm_kernel(inv, X, s, q)
    if single:
        return float(s[0]), float(q[0])
    return s, q


def rank_one_update(g, v, weight):
    """Inverse of (M + weight * v v^T) given ``g.inverse == M^{-1}``.

    Uses the Sherman-Morrison identity.  A negative weight is a downdate and
    is refused when it would leave the matrix indefinite.
    """
    if weight == 0:
        raise ValueError("weight must be nonzero")
    v = np.asarray(v, dtype=float).reshape(-1)
    inv = g.inverse
    if v.shape[0] != inv.shape[0]:
        raise ValueError(f"vector of length {v.shape[0]} does not match dim {inv.shape[0]}")
    z = inv @ v
    denom = 1.0 + weight * float(v @ z)
    if abs(denom) < DEGENERATE_TOL:
        raise DegenerateUpdateError(
            f"rank-one update is singular (1 + w v^T M^-1 v = {denom:.3e})"
        )
    if weight < 0 and denom < 0:
        raise NotPositiveDefiniteError(
            f"downdate leaves the matrix indefinite (1 + w v^T M^-1 v = {denom:.3e})"
        )
    return GramInverse(inv - (weight / denom) * np.outer(z, z), g.regularizer_gamma)


def symmetric_eigenvalues(m, tol=1e-14, max_sweeps=100):
    """All eigenvalues of a symmetric matrix, in descending order.

    Cyclic Jacobi rotations; deterministic and accurate to a few ulps of the
    matrix norm for the small matrices used here.
    """
    A = check_symmetric(m).copy()
    n = A.shape[0]
    if n == 0:
        return np.zeros(0)
    norm = float(np.linalg.norm(A))
    if norm == 0.0:
        return np.zeros(n)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                h = A[q, q] - A[p, p]
                if abs(h) + 100.0 * abs(apq) == abs(h):
                    t = apq / h
                else:
                    theta = h / (2.0 * apq)
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0
    else:
        raise np.linalg.LinAlgError("Jacobi eigenvalue iteration did not converge")
    return np.sort(np.diag(A))[::-1].copy()
