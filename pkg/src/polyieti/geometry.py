"""Patch geometry maps, the 8 standard edge views, and interface gluing data.

A geometry map is a tensor-product spline surface over [0,1]^2 with control
net ``control[j1, j2] in R^2`` (degree 1 in each direction for bilinear
patches).  For interface work a patch is re-viewed so the shared edge becomes
{xi1 = 0} with an agreed direction of the edge parameter xi2; the view is one
of the 8 symmetries of the square, realized as a reindexing of the control
net (uniform open knot vectors are symmetric, so reversal is exact).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .errors import (
    DegenerateEdge,
    GluingSingular,
    NotBilinear,
    ValidationError,
)
from .splines import UnivariateSpace, eval_basis, make_space

SIDES = ("W", "E", "S", "N")

# corner parameters (c1, c2) of a side's endpoints at edge parameter 0 and 1,
# in the natural direction (W/E run along xi2, S/N along xi1)
_SIDE_CORNERS = {
    "W": ((0, 0), (0, 1)),
    "E": ((1, 0), (1, 1)),
    "S": ((0, 0), (1, 0)),
    "N": ((0, 1), (1, 1)),
}


def bilinear_space() -> UnivariateSpace:
    return make_space(1, 0, 0)


@dataclass(frozen=True)
class GeometryMap:
    space: UnivariateSpace
    control: np.ndarray  # (ng, ng, 2)

    def __post_init__(self):
        c = np.asarray(self.control, dtype=float)
        ng = self.space.n
        if c.shape != (ng, ng, 2):
            raise ValidationError(
                f"control net shape {c.shape} does not match geometry space dim {ng}"
            )
        object.__setattr__(self, "control", c)

    @property
    def is_bilinear(self) -> bool:
        return self.space.n == 2

    def value(self, xi) -> np.ndarray:
        d1 = eval_basis(self.space, float(xi[0]), 0)[0]
        d2 = eval_basis(self.space, float(xi[1]), 0)[0]
        return np.einsum("j,l,jlc->c", d1, d2, self.control)

    def jet(self, xi, order: int) -> np.ndarray:
        """Normalized Taylor jet: jet[c, a, b] = d1^a d2^b G_c(xi) / (a! b!)."""
        d1 = eval_basis(self.space, float(xi[0]), order)
        d2 = eval_basis(self.space, float(xi[1]), order)
        jet = np.einsum("aj,bl,jlc->cab", d1, d2, self.control)
        fac = np.array([factorial(a) for a in range(order + 1)], dtype=float)
        jet /= fac[None, :, None]
        jet /= fac[None, None, :]
        return jet

    def jacobian(self, xi) -> np.ndarray:
        """J[c, a] = dG_c / dxi_a."""
        jet = self.jet(xi, 1)
        return np.column_stack([jet[:, 1, 0], jet[:, 0, 1]])

    def corner(self, c1: int, c2: int) -> np.ndarray:
        ng = self.space.n
        return self.control[(ng - 1) * c1, (ng - 1) * c2]


# --- standard edge views ---------------------------------------------------

def _index_arrays(n: int, side: str, reverse: bool):
    """Original (j1, j2) grids as functions of viewed (l1, l2)."""
    l1 = np.arange(n)[:, None] * np.ones(n, dtype=int)[None, :]
    l2 = np.ones(n, dtype=int)[:, None] * np.arange(n)[None, :]
    t = n - 1 - l2 if reverse else l2
    if side == "W":
        j1, j2 = l1, t
    elif side == "E":
        j1, j2 = n - 1 - l1, t
    elif side == "S":
        j1, j2 = t, l1
    elif side == "N":
        j1, j2 = t, n - 1 - l1
    else:
        raise ValidationError(f"unknown side {side!r}")
    return j1, j2


@dataclass(frozen=True)
class EdgeView:
    """A patch re-viewed so one side becomes {xi1 = 0} with a fixed direction."""

    patch: int
    side: str
    reverse: bool

    def permutation(self, n: int) -> np.ndarray:
        """Flat original index for each viewed flat index (l1*n + l2)."""
        j1, j2 = _index_arrays(n, self.side, self.reverse)
        return (j1 * n + j2).ravel()

    def control_net(self, control: np.ndarray) -> np.ndarray:
        j1, j2 = _index_arrays(control.shape[0], self.side, self.reverse)
        return control[j1, j2]

    def geometry(self, gmap: GeometryMap) -> GeometryMap:
        return GeometryMap(space=gmap.space, control=self.control_net(gmap.control))

    def corner_at(self, t_end: int) -> tuple[int, int]:
        """Patch corner (c1, c2) sitting at viewed edge parameter t_end in {0,1}."""
        ends = _SIDE_CORNERS[self.side]
        return ends[1 - t_end] if self.reverse else ends[t_end]

    def endpoint_parameter(self, corner: tuple[int, int]) -> int:
        """Inverse of corner_at; raises if the corner is not on this side."""
        for t_end in (0, 1):
            if self.corner_at(t_end) == corner:
                return t_end
        raise ValidationError(f"corner {corner} not on side {self.side}")


def side_corners(side: str) -> tuple[tuple[int, int], tuple[int, int]]:
    return _SIDE_CORNERS[side]


# --- gluing data -----------------------------------------------------------

@dataclass(frozen=True)
class GluingData:
    """Linear interface functions alpha, beta for both sides, by endpoint values.

    alpha[tau] = (value at 0, value at 1) for side tau in {0, 1}; same for
    beta.  alpha never vanishes on [0, 1] and has opposite signs across the
    two sides of the interface.
    """

    alpha: np.ndarray  # (2, 2)
    beta: np.ndarray   # (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    def alpha_at(self, tau: int, t) -> np.ndarray | float:
        a = self.alpha[tau]
        return a[0] + (a[1] - a[0]) * np.asarray(t, dtype=float)

    def beta_at(self, tau: int, t) -> np.ndarray | float:
        b = self.beta[tau]
        return b[0] + (b[1] - b[0]) * np.asarray(t, dtype=float)

    def alpha_jet(self, tau: int, t: float, order: int) -> np.ndarray:
        out = np.zeros(order + 1)
        out[0] = float(self.alpha_at(tau, t))
        if order >= 1:
            out[1] = self.alpha[tau, 1] - self.alpha[tau, 0]
        return out

    def beta_jet(self, tau: int, t: float, order: int) -> np.ndarray:
        out = np.zeros(order + 1)
        out[0] = float(self.beta_at(tau, t))
        if order >= 1:
            out[1] = self.beta[tau, 1] - self.beta[tau, 0]
        return out

    def validate_sign_pattern(self):
        a = self.alpha
        if a[0, 0] * a[0, 1] <= 0.0 or a[1, 0] * a[1, 1] <= 0.0:
            raise GluingSingular("gluing function alpha changes sign or vanishes on an interface")
        if a[0, 0] * a[1, 0] >= 0.0:
            raise GluingSingular("gluing functions alpha must have opposite signs across an interface")


def derive_gluing_from_views(g0: GeometryMap, g1: GeometryMap) -> GluingData:
    """Compute (alpha, beta) for two standard-viewed bilinear patches.

    alpha^(tau)(t) = det(d1 G^(tau)(0, t), G0'(t)) sampled at the endpoints
    (linear in t for bilinear patches).  The betas solve
    alpha^(1) beta^(0) - alpha^(0) beta^(1) = bar_beta at t in {0, 1/2, 1}
    with bar_beta the tangential component of alpha^(1) d1G^(0) - alpha^(0) d1G^(1),
    taking the minimum-norm solution.  The shared-transversal identity
    (d1 G^(tau) - beta^(tau) G0') / alpha^(tau) equal across sides certifies
    the result.
    """
    if not (g0.is_bilinear and g1.is_bilinear):
        raise NotBilinear("gluing derivation requires bilinear patches (geometry degree 1)")

    def d1_at(g: GeometryMap, t: float) -> np.ndarray:
        jet = g.jet((0.0, t), 1)
        return jet[:, 1, 0]

    def tangent_at(g: GeometryMap, t: float) -> np.ndarray:
        jet = g.jet((0.0, t), 1)
        return jet[:, 0, 1]

    for t in np.linspace(0.0, 1.0, 5):
        if np.linalg.norm(tangent_at(g0, t)) < 1e-12:
            raise DegenerateEdge("interface tangent numerically zero")

    def alpha_val(g: GeometryMap, t: float) -> float:
        d1 = d1_at(g, t)
        tg = tangent_at(g0, t)
        return float(d1[0] * tg[1] - d1[1] * tg[0])

    alpha = np.array([[alpha_val(g, 0.0), alpha_val(g, 1.0)] for g in (g0, g1)])

    # 3-point system for the endpoint values of beta^(0), beta^(1)
    ts = np.array([0.0, 0.5, 1.0])
    rows = np.zeros((3, 4))
    rhs = np.zeros(3)
    for i, t in enumerate(ts):
        a0 = alpha[0, 0] + (alpha[0, 1] - alpha[0, 0]) * t
        a1 = alpha[1, 0] + (alpha[1, 1] - alpha[1, 0]) * t
        tg = tangent_at(g0, t)
        vec = a1 * d1_at(g0, t) - a0 * d1_at(g1, t)
        rhs[i] = float(vec @ tg) / float(tg @ tg)
        # unknowns: (b0_at0, b0_at1, b1_at0, b1_at1)
        rows[i] = [a1 * (1 - t), a1 * t, -a0 * (1 - t), -a0 * t]
    sol, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    if np.abs(rows @ sol - rhs).max() > 1e-10 * max(1.0, np.abs(rhs).max()):
        raise ValidationError("interface pair admits no linear gluing functions")
    data = GluingData(alpha=alpha, beta=sol.reshape(2, 2))
    data.validate_sign_pattern()

    # shared-transversal identity at 20 samples
    scale = max(np.abs(g0.control).max(), np.abs(g1.control).max(), 1.0)
    for t in np.linspace(0.0, 1.0, 20):
        tg = tangent_at(g0, t)
        d = [None, None]
        for tau, g in enumerate((g0, g1)):
            a = float(data.alpha_at(tau, t))
            b = float(data.beta_at(tau, t))
            d[tau] = (d1_at(g, t) - b * tg) / a
        if np.linalg.norm(d[0] - d[1]) > 1e-10 * scale:
            raise ValidationError(
                f"first-order gluing identity violated at t={t:.3f}: "
                f"transversals differ by {np.linalg.norm(d[0] - d[1]):.2e}"
            )
    return data
