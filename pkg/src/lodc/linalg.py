"""Dense LU solves, CSR matrices, sparse solves and power-iteration norms.

Sparse matrices are ``scipy.sparse.csr_matrix`` in canonical form (sorted,
duplicate-free column indices). Dense matrices are 2-D float64 arrays.
"""
import logging
import warnings

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularMatrix, SolverFailure

log = logging.getLogger(__name__)

DIRECT_THRESHOLD = 20000


def as_csr(A):
    A = sp.csr_matrix(A, dtype=np.float64)
    A.sum_duplicates()
    A.sort_indices()
    return A


def lu_solve(A, B):
    """Solve AX = B with partial pivoting; raises SingularMatrix on a vanishing pivot."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"square matrix required, got shape {A.shape}")
    with warnings.catch_warnings():
        # An exactly zero pivot is reported below as SingularMatrix.
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    d = np.abs(np.diag(lu))
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    if d.min() <= A.shape[0] * np.finfo(float).eps * scale:
        raise SingularMatrix(f"pivot {d.min():.3e} is zero to working precision")
    return scipy.linalg.lu_solve((lu, piv), B)


def sparse_solve(A, b, rtol=1e-8, maxiter=2000, threshold=DIRECT_THRESHOLD):
    """Solve Au = b for a square nonsingular sparse A.

    Up to ``threshold`` unknowns a sparse LU factorization is used; above it,
    restarted GMRES with a Jacobi preconditioner. Both paths are checked
    against the relative residual contract ``rtol``.
    """
    A = as_csr(A)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if n <= threshold:
        try:
            u = spla.splu(A.tocsc()).solve(b)
        except RuntimeError as exc:
            raise SingularMatrix(str(exc)) from exc
    else:
        d = A.diagonal()
        d[d == 0.0] = 1.0
        M = spla.LinearOperator(A.shape, matvec=lambda x: x / d)
        u, info = spla.gmres(A, b, M=M, rtol=rtol * 0.1, restart=100, maxiter=maxiter)
        if info != 0:
            res = np.linalg.norm(A @ u - b) / bnorm
            raise SolverFailure(f"GMRES did not converge (info={info})", residual=res)
    res = np.linalg.norm(A @ u - b) / bnorm
    if not np.isfinite(res) or res > rtol:
        raise SolverFailure(f"relative residual {res:.3e} exceeds {rtol:.1e}", residual=res)
    return u


def spectral_norm(A, tol=1e-10, max_iter=5000, restarts=3, seed=0, return_info=False):
    """Largest singular value by power iteration on A^T A.

    ``A`` may be dense or sparse. Runs ``restarts`` random starts and keeps
    the largest estimate. With ``return_info`` also returns a flag telling
    whether every run met ``tol``.
    """
    if sp.issparse(A):
        A = as_csr(A)
        At = A.T.tocsr()
    else:
        A = np.asarray(A, dtype=np.float64)
        At = A.T
    rng = np.random.default_rng(seed)
    best, converged = 0.0, True
    for _ in range(restarts):
        x = rng.standard_normal(A.shape[1])
        x /= np.linalg.norm(x)
        sigma2 = 0.0
        ok = False
        for _ in range(max_iter):
            y = At @ (A @ x)
            ny = np.linalg.norm(y)
            if ny == 0.0:
                ok = True
                break
            x = y / ny
            if abs(ny - sigma2) <= tol * ny:
                sigma2 = ny
                ok = True
                break
            sigma2 = ny
        converged &= ok
        best = max(best, np.sqrt(sigma2))
    if not converged:
        log.warning("power iteration hit max_iter=%d before tol=%.1e", max_iter, tol)
    return (best, converged) if return_info else best
