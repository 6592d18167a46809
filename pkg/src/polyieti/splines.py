"""Univariate and tensor-product spline spaces on [0,1].

The space S(p, r, k) has degree p, smoothness C^r at the k uniform interior
breakpoints i/(k+1), open end knots, hence dimension n = p+1+k(p-r) and mesh
size h = 1/(k+1).  Basis evaluation follows the classic knot-insertion-free
derivative recurrence (Piegl/Tiller A2.3).  Evaluation at an interior knot
takes the right limit; at xi = 1 the left limit, so values are always taken
from a nonempty knot span.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpace, OutOfDomain


@dataclass(frozen=True)
class UnivariateSpace:
    p: int
    r: int
    k: int
    knots: np.ndarray = field(repr=False, compare=False)
    n: int = 0
    h: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))


def make_space(p: int, r: int, k: int) -> UnivariateSpace:
    """Build S(p, r, k); raises InvalidSpace unless p >= 1, 0 <= r <= p-1, k >= 0."""
    if p < 1:
        raise InvalidSpace(f"degree p={p} must be >= 1")
    if r < 0 or r >= p:
        raise InvalidSpace(f"smoothness r={r} must satisfy 0 <= r <= p-1={p - 1}")
    if k < 0:
        raise InvalidSpace(f"interior breakpoint count k={k} must be >= 0")
    mult = p - r
    interior = np.repeat(np.arange(1, k + 1) / (k + 1), mult)
    knots = np.concatenate([np.zeros(p + 1), interior, np.ones(p + 1)])
    n = p + 1 + k * mult
    return UnivariateSpace(p=p, r=r, k=k, knots=knots, n=n, h=1.0 / (k + 1))


def find_span(space: UnivariateSpace, x: float) -> int:
    """Index mu of the nonempty knot span with t_mu <= x < t_{mu+1} (left limit at 1)."""
    if x < 0.0 or x > 1.0:
        raise OutOfDomain(f"parameter {x} outside [0, 1]")
    t = space.knots
    if x >= 1.0:
        return int(np.searchsorted(t, 1.0, side="left")) - 1
    return int(np.searchsorted(t, x, side="right")) - 1


def basis_ders_local(space: UnivariateSpace, x: float, max_deriv: int):
    """Nonzero basis derivatives at x.

    Returns (j0, D) where D has shape (max_deriv+1, p+1) and D[d, a] is the
    d-th derivative of basis function j0+a at x.
    """
    p = space.p
    t = space.knots
    i = find_span(space, x)
    nd = min(max_deriv, p)

    ndu = np.zeros((p + 1, p + 1))
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - t[i + 1 - j]
        right[j] = t[i + j] - x
        saved = 0.0
        for rr in range(j):
            ndu[j, rr] = right[rr + 1] + left[j - rr]
            temp = ndu[rr, j - 1] / ndu[j, rr]
            ndu[rr, j] = saved + right[rr + 1] * temp
            saved = left[j - rr] * temp
        ndu[j, j] = saved

    ders = np.zeros((max_deriv + 1, p + 1))
    ders[0, :] = ndu[:, p]
    a = np.zeros((2, p + 1))
    for rr in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for kk in range(1, nd + 1):
            d = 0.0
            rk = rr - kk
            pk = p - kk
            if rr >= kk:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = kk - 1 if rr - 1 <= pk else p - rr
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if rr <= pk:
                a[s2, kk] = -a[s1, kk - 1] / ndu[pk + 1, rr]
                d += a[s2, kk] * ndu[rr, pk]
            ders[kk, rr] = d
            s1, s2 = s2, s1

    fact = float(p)
    for kk in range(1, nd + 1):
        ders[kk, :] *= fact
        fact *= p - kk
    return i - p, ders


def eval_basis(space: UnivariateSpace, x: float, max_deriv: int = 0) -> np.ndarray:
    """Dense (max_deriv+1, n) array of basis derivative values at x."""
    j0, d = basis_ders_local(space, x, max_deriv)
    out = np.zeros((max_deriv + 1, space.n))
    out[:, j0:j0 + space.p + 1] = d
    return out


def greville_points(space: UnivariateSpace) -> np.ndarray:
    """Greville abscissae: xi_j = mean(t_{j+1}, ..., t_{j+p}), j = 0..n-1."""
    t = space.knots
    p = space.p
    return np.array([t[j + 1:j + p + 1].mean() for j in range(space.n)])


def collocation_matrix(space: UnivariateSpace, points: np.ndarray, deriv: int = 0) -> np.ndarray:
    """(len(points), n) matrix of order-`deriv` basis derivatives at the points."""
    points = np.asarray(points, dtype=float)
    out = np.zeros((points.size, space.n))
    for q, x in enumerate(points):
        j0, d = basis_ders_local(space, float(x), deriv)
        out[q, j0:j0 + space.p + 1] = d[deriv]
    return out


@dataclass(frozen=True)
class TensorSpace:
    """Tensor product of two equal univariate factors; flat index j = j1*n + j2."""

    U: UnivariateSpace

    @property
    def n(self) -> int:
        return self.U.n

    @property
    def dim(self) -> int:
        return self.U.n ** 2

    def flat(self, j1: int, j2: int) -> int:
        return j1 * self.U.n + j2

    def unflat(self, j: int) -> tuple[int, int]:
        return divmod(j, self.U.n)


def make_tensor_space(p: int, r: int, k: int) -> TensorSpace:
    return TensorSpace(U=make_space(p, r, k))


def tensor_eval(space: TensorSpace, xi, max_deriv: int = 0) -> np.ndarray:
    """All partials d1^a d2^b N_j(xi) for a, b <= max_deriv.

    Returns shape (max_deriv+1, max_deriv+1, n*n) with the flat index
    j = j1*n + j2 in the last axis; entry [a, b] is the outer product of the
    univariate derivative rows.
    """
    x1, x2 = float(xi[0]), float(xi[1])
    d1 = eval_basis(space.U, x1, max_deriv)
    d2 = eval_basis(space.U, x2, max_deriv)
    n = space.U.n
    out = np.empty((max_deriv + 1, max_deriv + 1, n * n))
    for a in range(max_deriv + 1):
        for b in range(max_deriv + 1):
            out[a, b] = np.outer(d1[a], d2[b]).ravel()
    return out
