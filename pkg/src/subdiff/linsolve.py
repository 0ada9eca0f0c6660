"""Reusable factorizations for the time-stepping and normal-equation systems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["Factorization", "FactorizationError", "factorize", "solve"]


class FactorizationError(ValueError):
    """Raised for singular or (when flagged symmetric) indefinite matrices."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True, eq=False)
class Factorization:
    n: int
    symmetric: bool
    method: str
    _lu: object = None
    _matrix: sp.csr_matrix = None
    _precond: object = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return solve(self, rhs)


def factorize(matrix, symmetric: bool = True, method: str = "direct") -> Factorization:
    """Factorize a square sparse matrix once for repeated solves.

    With ``symmetric=True`` the LU runs without row pivoting in symmetric
    mode, which for an SPD matrix is a Cholesky-type factorization; every
    pivot must then be positive. ``method="cg"`` skips factorization and
    solves by Jacobi-preconditioned conjugate gradients instead.
    """
    A = sp.csc_matrix(matrix, dtype=float)
    n, m = A.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if symmetric:
        asym = abs(A - A.T).max() if A.nnz else 0.0
        scale = abs(A).max() if A.nnz else 1.0
        if asym > 1e-12 * scale:
            raise FactorizationError(f"matrix flagged symmetric but asymmetry is {asym:.3e}")

    if method == "cg":
        if not symmetric:
            raise ValueError("conjugate gradients requires a symmetric matrix")
        diag = A.diagonal()
        if np.any(diag <= 0):
            bad = int(np.flatnonzero(diag <= 0)[0])
            raise FactorizationError(f"non-positive diagonal at index {bad}", pivot=bad)
        precond = spla.LinearOperator((n, n), matvec=lambda v: v / diag, dtype=float)
        return Factorization(n=n, symmetric=True, method="cg", _matrix=A.tocsr(), _precond=precond)
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")

    opts = dict(permc_spec="NATURAL")
    if symmetric:
        opts.update(diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    try:
        lu = spla.splu(A, **opts)
    except RuntimeError as exc:
        raise FactorizationError(f"factorization failed: {exc}", pivot=_singular_column(A)) from exc
    piv = lu.U.diagonal()
    bad = np.flatnonzero(~np.isfinite(piv) | (piv == 0) | ((piv < 0) if symmetric else False))
    if bad.size:
        k = int(lu.perm_c[bad[0]])
        kind = "non-positive" if symmetric else "zero"
        raise FactorizationError(f"{kind} pivot at index {k}", pivot=k)
    return Factorization(n=n, symmetric=symmetric, method="direct", _lu=lu, _matrix=A.tocsr())


def _singular_column(A: sp.csc_matrix, max_dense: int = 4000) -> int | None:
    """First column that is dependent on the ones before it (dense LU, small systems only)."""
    if A.shape[0] > max_dense:
        return None
    _, _, U = la.lu(A.toarray())
    d = np.abs(np.diag(U))
    tol = d.max(initial=0.0) * A.shape[0] * np.finfo(float).eps
    bad = np.flatnonzero(d <= tol)
    return int(bad[0]) if bad.size else None


def solve(fact: Factorization, rhs) -> np.ndarray:
    """Solve ``A x = rhs``; ``rhs`` may carry several columns."""
    b = np.asarray(rhs, dtype=float)
    if b.shape[0] != fact.n:
        raise ValueError(f"rhs has {b.shape[0]} rows, factorization has {fact.n}")
    if fact.method == "direct":
        return fact._lu.solve(b)
    if b.ndim == 1:
        return _cg(fact, b)
    return np.column_stack([_cg(fact, b[:, k]) for k in range(b.shape[1])])


def _cg(fact: Factorization, b: np.ndarray) -> np.ndarray:
    if not np.any(b):
        return np.zeros_like(b)
    x, info = spla.cg(fact._matrix, b, rtol=1e-12, atol=0.0, M=fact._precond, maxiter=10 * fact.n)
    if info != 0:
        raise FactorizationError(f"conjugate gradients did not converge (info={info})")
    return x
