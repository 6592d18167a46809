"""Truncated Taylor-jet arithmetic and parametric/physical derivative transforms.

Two flavours are used:

* 2D jets of scalar fields on the parameter square, stored as (d+1, d+1)
  arrays with jet[a, b] = (d/dxi1)^a (d/dxi2)^b f / (a! b!).  These drive the
  exact change of variables between parametric and physical partial
  derivatives at a point of a geometry map.

* 1D jets along an interface parameter, used by the vertex machinery: scalar
  jets are Taylor-coefficient vectors, and "operator jets" carry one Taylor
  vector per coefficient column of a linear functional.

Stacked partial derivatives are ordered by total order t = 1..d and, inside an
order, as (t,0), (t-1,1), ..., (0,t).  The order-0 (value) slot is excluded;
values transform identically.
"""

from __future__ import annotations

from functools import lru_cache
from math import factorial

import numpy as np

from .errors import SingularJacobian
from .linalg import Factorization, lu_factor
from .errors import SingularMatrix


@lru_cache(maxsize=None)
def multi_indices(d: int) -> tuple[tuple[int, int], ...]:
    """Partial-derivative multi-indices of orders 1..d in the canonical order."""
    out = []
    for t in range(1, d + 1):
        for b in range(t + 1):
            out.append((t - b, b))
    return tuple(out)


def jet_mul(f: np.ndarray, g: np.ndarray, d: int) -> np.ndarray:
    """Product of two 2D jets, truncated to total order d."""
    out = np.zeros((d + 1, d + 1))
    for a1 in range(min(f.shape[0], d + 1)):
        for b1 in range(min(f.shape[1], d + 1 - a1)):
            c = f[a1, b1]
            if c == 0.0:
                continue
            amax = min(g.shape[0], d + 1 - a1 - b1)
            for a2 in range(amax):
                bmax = min(g.shape[1], d + 1 - a1 - b1 - a2)
                out[a1 + a2, b1:b1 + bmax] += c * g[a2, :bmax]
    return out


class DerivativeTransform:
    """Change of basis between physical and parametric partials at one point.

    Built from the (normalized) jet of a geometry map G at a parameter point:
    the matrix A satisfies  par = A @ phys  for the stacked derivative vectors
    of any smooth field composed with G.  A is block lower triangular in the
    total order; its order-1 block is the transposed Jacobian of G.
    """

    def __init__(self, gjet: np.ndarray, order: int):
        d = order
        self.order = d
        self.indices = multi_indices(d)
        m = len(self.indices)
        # centered coordinate jets (value slot removed)
        g0 = gjet[0].copy()
        g1 = gjet[1].copy()
        g0[0, 0] = 0.0
        g1[0, 0] = 0.0
        a = np.empty((m, m))
        one = np.zeros((d + 1, d + 1))
        one[0, 0] = 1.0
        for col, (m1, m2) in enumerate(self.indices):
            jet = one
            for _ in range(m1):
                jet = jet_mul(jet, g0, d)
            for _ in range(m2):
                jet = jet_mul(jet, g1, d)
            scale = 1.0 / (factorial(m1) * factorial(m2))
            for row, (p1, p2) in enumerate(self.indices):
                a[row, col] = factorial(p1) * factorial(p2) * jet[p1, p2] * scale
        self.matrix = a
        try:
            self._fact: Factorization = lu_factor(a)
        except SingularMatrix as exc:
            raise SingularJacobian(f"derivative transform singular: {exc}") from exc

    def to_physical(self, par: np.ndarray) -> np.ndarray:
        """Solve A @ phys = par (par may have extra trailing axes)."""
        return self._fact.solve(par)

    def selector(self, weights: np.ndarray) -> np.ndarray:
        """y with y^T par = weights^T phys, i.e. solve A^T y = weights."""
        try:
            return lu_factor(self.matrix.T).solve(weights)
        except SingularMatrix as exc:  # pragma: no cover - same guard as ctor
            raise SingularJacobian(f"derivative transform singular: {exc}") from exc


def laplacian_selectors(m: int, order_indices) -> np.ndarray:
    """Weight rows over stacked partials for the order-m seminorm integrand.

    For even m: one row encoding Delta^(m/2).  For odd m: two rows encoding
    d/dx Delta^((m-1)/2) and d/dy Delta^((m-1)/2).
    """
    idx = {mi: i for i, mi in enumerate(order_indices)}
    if m % 2 == 0:
        q = m // 2
        rows = np.zeros((1, len(order_indices)))
        for i in range(q + 1):
            rows[0, idx[(2 * i, m - 2 * i)]] = float(factorial(q) // (factorial(i) * factorial(q - i)))
    else:
        q = (m - 1) // 2
        rows = np.zeros((2, len(order_indices)))
        for i in range(q + 1):
            c = float(factorial(q) // (factorial(i) * factorial(q - i)))
            rows[0, idx[(2 * i + 1, m - 1 - 2 * i)]] = c
            rows[1, idx[(2 * i, m - 2 * i)]] = c
    return rows


# --- 1D jets ---------------------------------------------------------------

def jet1_mul(f: np.ndarray, g: np.ndarray, order: int) -> np.ndarray:
    """Truncated Cauchy product of Taylor-coefficient vectors."""
    out = np.zeros(order + 1)
    top = min(f.size, order + 1)
    for i in range(top):
        if f[i] == 0.0:
            continue
        span = min(g.size, order + 1 - i)
        out[i:i + span] += f[i] * g[:span]
    return out


def jet1_reciprocal(f: np.ndarray, order: int) -> np.ndarray:
    """Taylor coefficients of 1/f; requires f[0] != 0."""
    if f[0] == 0.0:
        raise ZeroDivisionError("reciprocal of a jet with zero constant term")
    out = np.zeros(order + 1)
    out[0] = 1.0 / f[0]
    for w in range(1, order + 1):
        acc = 0.0
        for i in range(1, min(w, f.size - 1) + 1):
            acc += f[i] * out[w - i]
        out[w] = -acc / f[0]
    return out


def jet1_pow(f: np.ndarray, e: int, order: int) -> np.ndarray:
    out = np.zeros(order + 1)
    out[0] = 1.0
    for _ in range(e):
        out = jet1_mul(out, f, order)
    return out


def opjet_scale(scalar: np.ndarray, op: np.ndarray, order: int) -> np.ndarray:
    """Multiply an operator jet (rows = Taylor orders) by a scalar jet."""
    ncols = op.shape[1]
    out = np.zeros((order + 1, ncols))
    for i in range(min(scalar.size, order + 1)):
        if scalar[i] == 0.0:
            continue
        span = min(op.shape[0], order + 1 - i)
        out[i:i + span] += scalar[i] * op[:span]
    return out


def opjet_derivative(op: np.ndarray, times: int = 1) -> np.ndarray:
    """d/dt of an operator jet; loses `times` orders off the top."""
    out = op
    for _ in range(times):
        rows = out.shape[0] - 1
        shifted = out[1:rows + 1] * np.arange(1, rows + 1)[:, None]
        out = shifted
    return out
