"""Manufactured exact solutions with closed-form derivatives.

The default study solution is u(x, y) = cos(x) sin(y), whose partials are
phase shifts: d^(a,b) u = cos(x + a pi/2) sin(y + b pi/2), and whose
polyharmonic load is (-Lap)^m u = 2^m u.  A small polynomial family backs
exactness tests (loads computed by exact coefficient manipulation).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


class ManufacturedSolution:
    """Scalar field with exact partial derivatives and polyharmonic loads."""

    name = "base"

    def partial(self, a: int, b: int, x, y):
        raise NotImplementedError

    def value(self, x, y):
        return self.partial(0, 0, x, y)

    def load(self, m: int, x, y):
        """(-Lap)^m applied to the field."""
        acc = 0.0 * np.asarray(x, dtype=float)
        # (-Lap)^m = sum_i C(m,i) (-1)^m d_x^{2i} d_y^{2(m-i)}
        from math import comb

        for i in range(m + 1):
            acc = acc + comb(m, i) * self.partial(2 * i, 2 * (m - i), x, y)
        return (-1.0) ** m * acc

    def partial_stack(self, indices, x, y) -> np.ndarray:
        """Stacked partials for the given multi-index list; shape (len, ...)."""
        return np.stack([np.asarray(self.partial(a, b, x, y), dtype=float) for a, b in indices])


class TrigSolution(ManufacturedSolution):
    name = "trig"

    def partial(self, a: int, b: int, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.cos(x + a * np.pi / 2.0) * np.sin(y + b * np.pi / 2.0)

    def load(self, m: int, x, y):
        # -Lap u = 2u, so (-Lap)^m u = 2^m u
        return 2.0**m * self.value(x, y)


class PolynomialSolution(ManufacturedSolution):
    """u = sum c[i,j] x^i y^j with exact derivative/load bookkeeping."""

    def __init__(self, coef, name: str = "poly"):
        self.coef = np.asarray(coef, dtype=float)
        self.name = name

    def partial(self, a: int, b: int, x, y):
        c = self.coef
        for _ in range(a):
            c = np.polynomial.polynomial.polyder(c, 1, axis=0) if c.shape[0] > 1 else np.zeros((1, 1))
        for _ in range(b):
            c = np.polynomial.polynomial.polyder(c, 1, axis=1) if c.shape[1] > 1 else np.zeros((1, 1))
        return np.polynomial.polynomial.polyval2d(np.asarray(x, dtype=float), np.asarray(y, dtype=float), c)


SOLUTIONS = {
    "trig": TrigSolution(),
    "zero": PolynomialSolution([[0.0]], name="zero"),
    "constant": PolynomialSolution([[1.0]], name="constant"),
    "linear": PolynomialSolution([[0.5, 1.0], [-2.0, 0.0]], name="linear"),
    "biquadratic": PolynomialSolution(
        [[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.5]], name="biquadratic"
    ),
}


def get_solution(name: str) -> ManufacturedSolution:
    try:
        return SOLUTIONS[name]
    except KeyError:
        raise ConfigError(
            f"unknown manufactured solution {name!r}; choose from {sorted(SOLUTIONS)}"
        ) from None
