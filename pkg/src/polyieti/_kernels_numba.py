"""Numba-compiled hot kernel for the per-cell stiffness contraction."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, parallel=True, fastmath=False)
def _stiffness_cell_data(a1, a2, y):
    cells, q, nders, nl = a1.shape
    ncomp = y.shape[2]
    nl2 = nl * nl
    out = np.zeros((cells, nl2, nl2))
    for c in numba.prange(cells):
        v = np.empty(nl2)
        for qq in range(q):
            for o in range(ncomp):
                # v[i1*nl+i2] = sum_ab y[c,qq,o,a,b] a1[c,qq,a,i1] a2[c,qq,b,i2]
                for i1 in range(nl):
                    base = i1 * nl
                    for i2 in range(nl):
                        acc = 0.0
                        for a in range(nders):
                            f1 = a1[c, qq, a, i1]
                            if f1 == 0.0:
                                continue
                            inner = 0.0
                            for b in range(nders):
                                inner += y[c, qq, o, a, b] * a2[c, qq, b, i2]
                            acc += f1 * inner
                        v[base + i2] = acc
                for i in range(nl2):
                    vi = v[i]
                    if vi == 0.0:
                        continue
                    row = out[c, i]
                    for j in range(nl2):
                        row[j] += vi * v[j]
    return out


def stiffness_cell_data(a1: np.ndarray, a2: np.ndarray, y: np.ndarray) -> np.ndarray:
    data = _stiffness_cell_data(
        np.ascontiguousarray(a1), np.ascontiguousarray(a2), np.ascontiguousarray(y)
    )
    return 0.5 * (data + data.transpose(0, 2, 1))
