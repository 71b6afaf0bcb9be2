"""Small dense symmetric linear algebra.

Symmetric matrices are plain ``numpy`` arrays; callers symmetrise on entry.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from .errors import NotPositiveDefiniteError, PcroaError


def symmetrize(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    return 0.5 * (M + M.T)


def sym_eig(M):
    """Eigenvalues in ascending order and orthonormal eigenvectors (columns)."""
    M = symmetrize(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return np.linalg.eigh(M)


def min_eig(M) -> float:
    M = symmetrize(M)
    if M.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh(M)[0])


def cholesky(M) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotPositiveDefiniteError` with the failing pivot."""
    M = symmetrize(M)
    L, info = lapack.dpotrf(M, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(
            f"matrix not positive definite (leading minor {info} fails)", pivot=info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return L


def geomean_eig(M) -> float:
    """``det(M)^(1/dim)`` for a positive definite ``M``."""
    lam = np.linalg.eigvalsh(symmetrize(M))
    if lam[0] <= 0:
        raise NotPositiveDefiniteError("geometric mean needs positive eigenvalues",
                                       pivot=int(np.argmin(lam)))
    return float(np.exp(np.mean(np.log(lam))))


def is_hurwitz(A, margin: float = 0.0) -> bool:
    return bool(np.all(np.linalg.eigvals(np.atleast_2d(A)).real < -margin))


def solve_lyapunov(A, Q=None) -> np.ndarray:
    """Solve ``A'P + PA = -Q`` (``Q = I`` by default) via the Kronecker form."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if not is_hurwitz(A):
        raise PcroaError("linearisation is not Hurwitz; Lyapunov method inapplicable",
                         module="linalg", operation="solve_lyapunov", code="not_hurwitz")
    Q = np.eye(n) if Q is None else symmetrize(Q)
    I = np.eye(n)
    # vec(A'P) + vec(PA) = (I kron A' + A' kron I) vec(P) with column-major vec
    K = np.kron(I, A.T) + np.kron(A.T, I)
    P = np.linalg.solve(K, -Q.reshape(-1, order="F")).reshape(n, n, order="F")
    return symmetrize(P)
