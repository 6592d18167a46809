"""Exception hierarchy for the solver.

Every failure mode that callers are expected to handle gets its own class so
tests and the CLI can react by type.  Numerical failures (singular operators,
non-convergence) derive from :class:`NumericalError`; bad input derives from
:class:`InputError`.  The CLI maps InputError to exit code 2 and
NumericalError to exit code 1.
"""

from __future__ import annotations


class PolyIetiError(Exception):
    """Base class for all package errors."""


class InputError(PolyIetiError):
    """Invalid configuration or input data."""


class NumericalError(PolyIetiError):
    """A numerical operation failed (singularity, non-convergence, ...)."""


# --- linear algebra -------------------------------------------------------

class SingularMatrix(NumericalError):
    """Factorization hit an effectively zero pivot."""


class NoConvergence(NumericalError):
    """Iterative solver exhausted its iteration budget."""

    def __init__(self, msg: str, iterations: int = -1, residual: float = float("nan")):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


# --- spline spaces --------------------------------------------------------

class InvalidSpace(InputError):
    """Spline space parameters out of range (need p >= 1, 0 <= r <= p-1, k >= 0)."""


class OutOfDomain(InputError):
    """Evaluation point outside the closed parameter interval."""


# --- geometry / domains ---------------------------------------------------

class GeometryError(InputError):
    pass


class InconsistentOrientation(GeometryError):
    """Two views of the same interface disagree about the edge curve."""


class DegenerateEdge(GeometryError):
    """Interface curve with (numerically) vanishing tangent."""


class NotBilinear(GeometryError):
    """Operation requires bilinear patch parameterizations."""


class ParseError(InputError):
    """Malformed domain / configuration file."""


class ValidationError(InputError):
    """A domain consistency invariant failed; the message names it."""


class NonManifold(GeometryError):
    """An edge is shared by more than two patches."""


class DegenerateQuad(GeometryError):
    """Quad with non-positive corner Jacobian (collapsed or inverted)."""


# --- assembly -------------------------------------------------------------

class SingularJacobian(NumericalError):
    """Geometry Jacobian numerically singular at a quadrature point."""


class NotBoundaryPatch(InputError):
    """Boundary-fit operation invoked for a patch without boundary sides."""


# --- coupling constraints -------------------------------------------------

class GluingSingular(NumericalError):
    """A gluing function alpha vanishes on the interface."""


class SingularD2(NumericalError):
    """No well-conditioned square block for eliminating the interface unknowns."""


class ComplementMismatch(NumericalError):
    """Boundary-vertex combination unexpectedly touches non-boundary coefficients."""


class ComplementIncomplete(NumericalError):
    """Greedy complement ran out of candidate rows before reaching full rank."""


# --- solver ---------------------------------------------------------------

class TooCoarse(InputError):
    """Discretization too coarse to split coefficients into rings + interior."""


class SingularKRR(NumericalError):
    """Interior stiffness block not invertible."""


class SingularCoupling(NumericalError):
    """Coupling system of the block inverse (or boundary fit) singular."""


class SingularT(NumericalError):
    """A patch-local saddle block of the extended system is singular."""

    def __init__(self, msg: str, patch: int = -1):
        super().__init__(msg)
        self.patch = patch


class DimensionMismatch(PolyIetiError):
    """Internal consistency check on operator/vector shapes failed."""


class ConfigError(InputError):
    """A run-configuration precondition is violated; the message names it."""


# --- verification ---------------------------------------------------------

class SingularSystem(NumericalError):
    """Dense saddle-point system is singular."""


class ZeroDenominator(NumericalError):
    """Relative error undefined: exact-solution seminorm is numerically zero."""
