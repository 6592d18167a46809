"""Polyharmonic multi-patch spline solver with dual-primal interface coupling."""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .splines import make_space, make_tensor_space  # noqa: F401
