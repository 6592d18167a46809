"""Gauss-Legendre quadrature on the knot spans of a spline space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .splines import UnivariateSpace


@dataclass(frozen=True)
class Quadrature1D:
    """Per-cell Gauss rule: points/weights have shape (ncells, q)."""

    breaks: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    @property
    def ncells(self) -> int:
        return self.points.shape[0]

    @property
    def per_cell(self) -> int:
        return self.points.shape[1]


def make_quadrature(space: UnivariateSpace, q_order: int | None = None) -> Quadrature1D:
    """Gauss rule with q_order points per knot span (default p+1)."""
    if q_order is None:
        q_order = space.p + 1
    if q_order < 1:
        raise ConfigError(f"quadrature order {q_order} must be >= 1")
    breaks = np.linspace(0.0, 1.0, space.k + 2)
    gx, gw = np.polynomial.legendre.leggauss(q_order)
    a = breaks[:-1][:, None]
    b = breaks[1:][:, None]
    points = 0.5 * (b - a) * (gx[None, :] + 1.0) + a
    weights = 0.5 * (b - a) * gw[None, :] * np.ones_like(points)
    return Quadrature1D(breaks=breaks, points=points, weights=weights)
