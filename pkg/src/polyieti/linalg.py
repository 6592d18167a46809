"""Small dense linear-algebra helpers shared across the package.

Wraps LAPACK (via scipy) for factorizations and SVD-based rank decisions, and
provides an unpreconditioned conjugate gradient working on operator callbacks.
All reductions are plain BLAS/numpy on contiguous arrays, so repeated runs are
bitwise reproducible.
"""

from __future__ import annotations

import warnings
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NoConvergence, SingularMatrix

#: relative pivot threshold below which a factorization counts as singular
PIVOT_RTOL = 1e-13

#: default relative singular-value cutoff for rank / null-space decisions
RANK_RTOL = 1e-10


class Factorization:
    """LU factorization of a square matrix with a singularity guard."""

    def __init__(self, a: np.ndarray):
        a = np.ascontiguousarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise SingularMatrix(f"expected a square matrix, got shape {a.shape}")
        self.n = a.shape[0]
        if self.n == 0:
            self._lu = None
            return
        scale = np.abs(a).max()
        with warnings.catch_warnings():
            # we do our own pivot check below
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            self._lu = scipy.linalg.lu_factor(a, check_finite=False)
        pivots = np.abs(np.diag(self._lu[0]))
        if scale == 0.0 or pivots.min() < PIVOT_RTOL * scale:
            raise SingularMatrix(
                f"singular matrix: pivot {pivots.min():.3e} below "
                f"{PIVOT_RTOL:.0e} * max entry {scale:.3e}"
            )

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise SingularMatrix(f"rhs length {b.shape[0]} != matrix size {self.n}")
        if self.n == 0:
            return np.zeros_like(b)
        return scipy.linalg.lu_solve(self._lu, b, check_finite=False)


def lu_factor(a: np.ndarray) -> Factorization:
    """Factor a square matrix; raises SingularMatrix on an effectively zero pivot."""
    return Factorization(a)


class EquilibratedFactorization:
    """LU of a symmetrically equilibrated square matrix.

    Divides rows and columns by the square roots of the row infinity norms
    before factoring and undoes the scaling inside solve(), making it a
    drop-in replacement for Factorization when the matrix mixes entries of
    very different magnitudes (derivative orders carry mesh-size powers); the
    relative pivot check then judges the balanced matrix rather than the raw
    one.  Intended for symmetric matrices, where the two-sided scaling
    preserves symmetry.
    """

    def __init__(self, a: np.ndarray):
        a = np.ascontiguousarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise SingularMatrix(f"expected a square matrix, got shape {a.shape}")
        norms = np.abs(a).max(axis=1) if a.shape[0] else np.zeros(0)
        if a.shape[0] and norms.min() == 0.0:
            raise SingularMatrix("singular matrix: all-zero row")
        self.scale = np.sqrt(norms)
        self.n = a.shape[0]
        self.fact = Factorization(
            a / np.outer(self.scale, self.scale) if a.shape[0] else a)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return self.fact.solve(b)
        d = self.scale if b.ndim == 1 else self.scale[:, None]
        return self.fact.solve(b / d) / d


def numerical_rank(a: np.ndarray, rel_tol: float = RANK_RTOL) -> int:
    """Number of singular values above rel_tol times the largest one."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0
    sv = scipy.linalg.svdvals(a, check_finite=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))


def null_space_basis(a: np.ndarray, rel_tol: float = RANK_RTOL) -> np.ndarray:
    """Orthonormal basis (as columns) of the null space of ``a``.

    Returns an (n, n - rank) array; the basis comes from the SVD, so it is
    deterministic for a fixed input.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise SingularMatrix(f"expected a matrix, got ndim={a.ndim}")
    n = a.shape[1]
    if a.size == 0:
        return np.eye(n)
    _, sv, vt = scipy.linalg.svd(a, full_matrices=True, check_finite=False)
    if sv.size == 0 or sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(sv > rel_tol * sv[0]))
    return np.ascontiguousarray(vt[rank:].T)


class RowSpace:
    """Incrementally grown orthonormal basis of the span of a set of rows.

    Seeded by an SVD (keeping singular vectors above the relative cutoff) and
    extended one row at a time with twice-reorthogonalized Gram-Schmidt, so a
    sequence of is-this-row-new tests costs one SVD total instead of one per
    test.
    """

    def __init__(self, rows: np.ndarray, rel_tol: float = RANK_RTOL):
        rows = np.asarray(rows, dtype=float)
        if rows.ndim != 2:
            raise SingularMatrix(f"expected a matrix of rows, got ndim={rows.ndim}")
        self.rel_tol = rel_tol
        if rows.shape[0] == 0 or rows.size == 0:
            self._basis = np.zeros((0, rows.shape[1]))
            return
        _, sv, vt = scipy.linalg.svd(rows, full_matrices=False, check_finite=False)
        rank = 0
        if sv.size and sv[0] > 0.0:
            rank = int(np.count_nonzero(sv > rel_tol * sv[0]))
        self._basis = np.ascontiguousarray(vt[:rank])

    @property
    def rank(self) -> int:
        return self._basis.shape[0]

    def residual(self, row: np.ndarray) -> np.ndarray:
        """Component of ``row`` orthogonal to the current span."""
        r = np.asarray(row, dtype=float)
        for _ in range(2):
            if self._basis.shape[0]:
                r = r - self._basis.T @ (self._basis @ r)
        return r

    def add_if_new(self, row: np.ndarray, ref_norm: float | None = None) -> bool:
        """Extend the basis if ``row`` leaves the span; report whether it did.

        Novelty is judged against ``ref_norm`` (default: the row's own norm),
        so callers can measure relative to an unmasked version of the row.
        """
        ref = float(np.linalg.norm(row)) if ref_norm is None else float(ref_norm)
        if ref == 0.0:
            return False
        r = self.residual(row)
        rn = float(np.linalg.norm(r))
        if rn <= self.rel_tol * ref:
            return False
        self._basis = np.vstack([self._basis, r / rn])
        return True


def conjugate_gradient(
    apply_op: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int | None = None,
    precondition: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, int]:
    """CG for an SPD operator given as a callback, optionally preconditioned.

    ``precondition``, when given, applies an SPD approximation of the
    operator inverse to the residual.  Stops when ||r|| <= tol * ||b|| in the
    unpreconditioned norm (so the stopping test means the same thing whether
    or not a preconditioner is used); returns (solution, iterations used).
    Raises NoConvergence (carrying the iteration count and final relative
    residual) if the budget is exhausted.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    norm_b = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if norm_b == 0.0:
        return x, 0
    r = b.copy()
    z = precondition(r) if precondition is not None else r
    p = z.copy()
    rz = float(r @ z)
    res = norm_b
    for it in range(1, max_iter + 1):
        ap = apply_op(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise NoConvergence(
                f"cg: operator not positive definite (p^T A p = {pap:.3e})",
                iterations=it,
                residual=res / norm_b,
            )
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r))
        if res <= tol * norm_b:
            return x, it
        z = precondition(r) if precondition is not None else r
        rz_new = float(r @ z)
        if precondition is not None and rz_new <= 0.0:
            raise NoConvergence(
                f"cg: preconditioner not positive definite (r^T z = {rz_new:.3e})",
                iterations=it,
                residual=res / norm_b,
            )
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergence(
        f"cg: no convergence in {max_iter} iterations "
        f"(relative residual {res / norm_b:.3e})",
        iterations=max_iter,
        residual=res / norm_b,
    )
