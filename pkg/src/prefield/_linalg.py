"""Sparse symmetric LDL^T factorisation.

SciPy has no sparse Cholesky; ``qdldl`` provides an AMD-ordered LDL^T whose
symbolic analysis can be reused when only the values change, which is the
common case in the inner Newton loop and across outer iterations.
"""

from __future__ import annotations

import numpy as np
import qdldl
import scipy.sparse as sp
import scipy.sparse.linalg as spl


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD fails to factorise."""


class SparseLDL:
    """LDL^T of a sparse SPD matrix: ``A[P][:, P] = (L + I) D (L + I)^T``.

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive-definite matrix (full storage).
    cache : LDLCache, optional
        Reuses the symbolic factorisation when ``A`` has the cached pattern.
    """

    def __init__(self, A, cache: "LDLCache | None" = None):
        A = sp.csc_matrix(A)
        self.n = A.shape[0]
        try:
            solver = cache.factorize(A) if cache is not None else qdldl.Solver(A)
            L, d, perm = solver.factors()
        except (ValueError, RuntimeError) as exc:
            raise NotPositiveDefiniteError(f"LDL factorisation failed: {exc}") from exc
        d = np.asarray(d, dtype=float)
        if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
            raise NotPositiveDefiniteError(
                f"non-positive pivot (min {np.min(d):.3e}); matrix is not SPD"
            )
        self._solver = solver
        self._cache = cache
        self._gen = cache.generation if cache is not None else 0
        self._L = L
        self.d = d
        self.perm = np.asarray(perm)

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def _check_current(self):
        if self._cache is not None and self._cache.generation != self._gen:
            raise RuntimeError("factor is stale: its cache has been refactorised since")

    def solve(self, b):
        self._check_current()
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return self._solver.solve(b)
        return np.column_stack([self._solver.solve(np.ascontiguousarray(b[:, j])) for j in range(b.shape[1])])

    def sample(self, z):
        """Map standard normals ``z`` (vector or columns) to draws from N(0, A^{-1})."""
        z = np.asarray(z, dtype=float)
        y = z / (np.sqrt(self.d)[:, None] if z.ndim == 2 else np.sqrt(self.d))
        Lt = sp.csr_matrix((self._L + sp.identity(self.n)).T)
        w = spl.spsolve_triangular(Lt, y, lower=False, unit_diagonal=True)
        x = np.empty_like(w)
        x[self.perm] = w
        return x


class LDLCache:
    """Holds one ``qdldl.Solver`` and refactors numerically while the pattern is unchanged.

    Factors created through a cache share its solver, so only the most
    recent one may be used for solves; older ones raise on use.
    """

    def __init__(self):
        self._solver = None
        self._indptr = None
        self._indices = None
        self.generation = 0

    def factorize(self, A: sp.csc_matrix):
        A = sp.csc_matrix(A)
        A.sort_indices()
        self.generation += 1
        same = (
            self._solver is not None
            and self._indptr.shape == A.indptr.shape
            and self._indices.shape == A.indices.shape
            and np.array_equal(self._indptr, A.indptr)
            and np.array_equal(self._indices, A.indices)
        )
        if same:
            self._solver.update(A)
        else:
            self._solver = qdldl.Solver(A)
            self._indptr = A.indptr.copy()
            self._indices = A.indices.copy()
        return self._solver


def dense_logdet(A) -> float:
    sign, val = np.linalg.slogdet(np.asarray(A))
    if sign <= 0:
        raise NotPositiveDefiniteError("dense matrix has non-positive determinant")
    return float(val)
