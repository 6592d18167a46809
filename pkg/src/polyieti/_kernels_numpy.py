"""Vectorized numpy fallback for the per-cell stiffness contraction."""

from __future__ import annotations

import numpy as np


def stiffness_cell_data(a1: np.ndarray, a2: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-cell local stiffness blocks.

    a1, a2: (cells, qpoints, nders, nloc) univariate basis derivative tables.
    y: (cells, qpoints, ncomp, nders, nders) point selectors premultiplied by
       sqrt(weight * |det J|).
    Returns (cells, nloc^2, nloc^2) with rows/cols flattened as i1*nloc + i2.
    """
    v = np.einsum("cqoab,cqai,cqbj->cqoij", y, a1, a2, optimize=True)
    cells, q, o, nl, _ = v.shape
    vf = np.ascontiguousarray(v.reshape(cells, q * o, nl * nl))
    data = np.matmul(vf.transpose(0, 2, 1), vf)
    return 0.5 * (data + data.transpose(0, 2, 1))
