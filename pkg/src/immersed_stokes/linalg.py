"""Thin sparse-matrix layer: triplet assembly, direct solve, export.

Everything here delegates to scipy (CSR storage, SuperLU factorisation,
Matrix Market writer); the module exists to pin down the assembly contract
— duplicate triplets sum, the solve reports its true residual — and to keep
the rest of the package independent of the backend.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.io import mmwrite


class SingularMatrixError(Exception):
    """Raised when the direct factorisation fails or produces non-finite
    results (structurally or numerically singular system)."""


class SparseMatrix:
    """Square sparse matrix in CSR form built from COO triplets."""

    def __init__(self, csr):
        self.csr = csr

    @classmethod
    def from_triplets(cls, rows, cols, values, size):
        """Assemble from (row, col, value) triplets; duplicates are summed.

        Raises
        ------
        ValueError
            If any index lies outside ``[0, size)`` or any value is not
            finite.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if rows.shape != cols.shape or rows.shape != values.shape:
            raise ValueError("triplet arrays must have identical shapes")
        if len(rows) and (
            rows.min() < 0 or rows.max() >= size or cols.min() < 0 or cols.max() >= size
        ):
            raise ValueError("triplet index out of range for size %d" % size)
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite value in assembly triplets")
        coo = sp.coo_matrix((values, (rows, cols)), shape=(size, size))
        csr = coo.tocsr()  # sums duplicates
        csr.sort_indices()
        return cls(csr)

    @property
    def shape(self):
        return self.csr.shape

    @property
    def nnz(self):
        return self.csr.nnz

    def matvec(self, x):
        return self.csr @ np.asarray(x, dtype=float)

    def toarray(self):
        return self.csr.toarray()

    def write_matrix_market(self, path, comment=""):
        """Write the matrix in Matrix Market coordinate format."""
        mmwrite(str(path), self.csr, comment=comment)


@dataclass
class SolveReport:
    """Solution of one linear system together with its quality check."""

    solution: np.ndarray
    residual: float  # ||A x - b|| / ||b||  (absolute norm when b = 0)
    n_dofs: int
    nnz: int

    #: contract: direct solves on the assembled systems must reach this
    RESIDUAL_TOL = 1e-8

    @property
    def ok(self):
        return np.isfinite(self.residual) and self.residual <= self.RESIDUAL_TOL


def lu_solve(matrix, rhs):
    """Solve ``A x = b`` by sparse LU and report the relative residual.

    Raises
    ------
    SingularMatrixError
        If the factorisation fails or returns non-finite values.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = matrix.shape[0]
    if rhs.shape != (n,):
        raise ValueError("rhs length %d does not match matrix size %d" % (len(rhs), n))
    try:
        lu = spla.splu(matrix.csr.tocsc())
        x = lu.solve(rhs)
    except RuntimeError as exc:  # SuperLU signals singularity this way
        raise SingularMatrixError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("factorisation produced non-finite solution")
    norm_b = np.linalg.norm(rhs)
    res = np.linalg.norm(matrix.matvec(x) - rhs)
    residual = res / norm_b if norm_b > 0 else res
    return SolveReport(solution=x, residual=float(residual), n_dofs=n, nnz=matrix.nnz)
