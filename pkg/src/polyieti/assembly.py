"""Per-patch Galerkin assembly for the order-m polyharmonic form.

The H^m seminorm integrand is built from physical derivatives: for even m the
factor Delta^(m/2) phi, for odd m the two components of grad Delta^((m-1)/2) phi.
Physical partials come from the exact jet-based change of variables
(derivative transform) at every Gauss point; the per-cell contraction runs in
the selected backend kernel.  Everything is returned in scipy sparse CSR over
the flat tensor index j = j1*n + j2.
"""

from __future__ import annotations

from math import factorial

import numpy as np
import scipy.sparse

from .backend import stiffness_cell_data
from .errors import NotBoundaryPatch, SingularJacobian
from .geometry import EdgeView, GeometryMap
from .jets import DerivativeTransform, laplacian_selectors, multi_indices
from .quadrature import Quadrature1D, make_quadrature  # noqa: F401  (re-export)
from .splines import TensorSpace, UnivariateSpace, basis_ders_local, eval_basis


def physical_derivatives(g: GeometryMap, xi, order: int) -> DerivativeTransform:
    """Derivative transform of G at xi (order-1 block = transposed Jacobian)."""
    return DerivativeTransform(g.jet(xi, order), order)


def _univariate_tables(space: UnivariateSpace, quad: Quadrature1D, max_deriv: int):
    """Span starts (ncells,) and basis tables (ncells, q, max_deriv+1, p+1)."""
    ncells, q = quad.points.shape
    nl = space.p + 1
    starts = np.empty(ncells, dtype=np.int64)
    tables = np.empty((ncells, q, max_deriv + 1, nl))
    for c in range(ncells):
        for g in range(q):
            j0, d = basis_ders_local(space, float(quad.points[c, g]), max_deriv)
            tables[c, g] = d
        starts[c] = j0
    return starts, tables


def _geometry_jets(g: GeometryMap, x1: np.ndarray, x2: np.ndarray, order: int) -> np.ndarray:
    """Normalized jets of G at the grid points; shape (npts, 2, order+1, order+1)."""
    uniq1, inv1 = np.unique(x1, return_inverse=True)
    uniq2, inv2 = np.unique(x2, return_inverse=True)
    t1 = np.stack([eval_basis(g.space, float(x), order) for x in uniq1])
    t2 = np.stack([eval_basis(g.space, float(x), order) for x in uniq2])
    jets = np.einsum("paj,pbl,jlc->pcab", t1[inv1], t2[inv2], g.control)
    fac = np.array([factorial(a) for a in range(order + 1)], dtype=float)
    jets /= fac[None, None, :, None]
    jets /= fac[None, None, None, :]
    return jets


def _batched_jet_mul(f: np.ndarray, g: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros(f.shape[:-2] + (d + 1, d + 1))
    for a1 in range(d + 1):
        for b1 in range(d + 1 - a1):
            fa = f[..., a1, b1]
            for a2 in range(d + 1 - a1 - b1):
                for b2 in range(d + 1 - a1 - b1 - a2):
                    out[..., a1 + a2, b1 + b2] += fa * g[..., a2, b2]
    return out


def _batched_transforms(gjets: np.ndarray, order: int) -> np.ndarray:
    """Transform matrices A (batch, M, M) with par = A @ phys, for all points."""
    d = order
    idx = multi_indices(d)
    m = len(idx)
    npts = gjets.shape[0]
    g0 = gjets[:, 0].copy()
    g1 = gjets[:, 1].copy()
    g0[:, 0, 0] = 0.0
    g1[:, 0, 0] = 0.0
    a = np.empty((npts, m, m))
    one = np.zeros((npts, d + 1, d + 1))
    one[:, 0, 0] = 1.0
    fac = np.array([factorial(t) for t in range(d + 1)], dtype=float)
    for col, (m1, m2) in enumerate(idx):
        jet = one
        for _ in range(m1):
            jet = _batched_jet_mul(jet, g0, d)
        for _ in range(m2):
            jet = _batched_jet_mul(jet, g1, d)
        scale = 1.0 / (factorial(m1) * factorial(m2))
        for row, (p1, p2) in enumerate(idx):
            a[:, row, col] = fac[p1] * fac[p2] * scale * jet[:, p1, p2]
    return a


def local_stiffness(
    g: GeometryMap, space: TensorSpace, m: int, quad: Quadrature1D
) -> scipy.sparse.csr_matrix:
    """Patch stiffness of the order-m polyharmonic bilinear form (n^2 x n^2 CSR)."""
    u = space.U
    n = u.n
    nl = u.p + 1
    starts, t1 = _univariate_tables(u, quad, m)
    ncells, q = quad.points.shape
    c2 = ncells * ncells
    q2 = q * q

    # per-2D-cell tables: cell (c1, c2) flat c1-major, point (g1, g2) flat g1-major
    a1 = np.broadcast_to(
        t1[:, None, :, None, :, :], (ncells, ncells, q, q, m + 1, nl)
    ).reshape(c2, q2, m + 1, nl)
    a2 = np.broadcast_to(
        t1[None, :, None, :, :, :], (ncells, ncells, q, q, m + 1, nl)
    ).reshape(c2, q2, m + 1, nl)

    px1 = np.broadcast_to(
        quad.points[:, None, :, None], (ncells, ncells, q, q)
    ).reshape(-1)
    px2 = np.broadcast_to(
        quad.points[None, :, None, :], (ncells, ncells, q, q)
    ).reshape(-1)
    w12 = (
        np.broadcast_to(quad.weights[:, None, :, None], (ncells, ncells, q, q))
        * np.broadcast_to(quad.weights[None, :, None, :], (ncells, ncells, q, q))
    ).reshape(-1)

    gjets = _geometry_jets(g, px1, px2, m)
    amats = _batched_transforms(gjets, m)
    det = amats[:, 0, 0] * amats[:, 1, 1] - amats[:, 0, 1] * amats[:, 1, 0]
    scale = max(1.0, float(np.abs(g.control).max()) ** 2)
    if np.abs(det).min() < 1e-8 * scale or det.max() * det.min() <= 0.0:
        raise SingularJacobian(
            f"geometry Jacobian out of range: det in [{det.min():.3e}, {det.max():.3e}]"
        )

    idx = multi_indices(m)
    weights = laplacian_selectors(m, idx)  # (ncomp, M)
    ncomp = weights.shape[0]
    rhs = np.broadcast_to(weights.T[None, :, :], (amats.shape[0], len(idx), ncomp))
    ysel = np.linalg.solve(amats.transpose(0, 2, 1), rhs)  # (npts, M, ncomp)

    ygrid = np.zeros((amats.shape[0], ncomp, m + 1, m + 1))
    for i, (a, b) in enumerate(idx):
        ygrid[:, :, a, b] = ysel[:, i, :]
    ygrid *= np.sqrt(w12 * np.abs(det))[:, None, None, None]
    ygrid = ygrid.reshape(c2, q2, ncomp, m + 1, m + 1)

    data = stiffness_cell_data(a1, a2, ygrid)

    loc1 = starts[:, None] + np.arange(nl)[None, :]  # (ncells, nl)
    flat = (
        loc1[:, None, :, None] * n + loc1[None, :, None, :]
    ).reshape(c2, nl * nl)
    rows = np.broadcast_to(flat[:, :, None], data.shape).ravel()
    cols = np.broadcast_to(flat[:, None, :], data.shape).ravel()
    mat = scipy.sparse.coo_matrix(
        (data.ravel(), (rows, cols)), shape=(n * n, n * n)
    ).tocsr()
    mat.sum_duplicates()
    return mat


def local_load(
    g: GeometryMap, space: TensorSpace, f, quad: Quadrature1D
) -> np.ndarray:
    """Load vector of the field f (callable on physical coordinates)."""
    u = space.U
    n = u.n
    nl = u.p + 1
    starts, t1 = _univariate_tables(u, quad, 0)
    ncells, q = quad.points.shape

    vals1 = t1[:, :, 0, :]  # (ncells, q, nl)
    px1 = np.broadcast_to(quad.points[:, None, :, None], (ncells, ncells, q, q)).reshape(-1)
    px2 = np.broadcast_to(quad.points[None, :, None, :], (ncells, ncells, q, q)).reshape(-1)
    w12 = (
        np.broadcast_to(quad.weights[:, None, :, None], (ncells, ncells, q, q))
        * np.broadcast_to(quad.weights[None, :, None, :], (ncells, ncells, q, q))
    ).reshape(-1)

    gjets = _geometry_jets(g, px1, px2, 1)
    xy = gjets[:, :, 0, 0]
    det = gjets[:, 0, 1, 0] * gjets[:, 1, 0, 1] - gjets[:, 0, 0, 1] * gjets[:, 1, 1, 0]
    fw = (np.asarray(f(xy[:, 0], xy[:, 1]), dtype=float) * w12 * np.abs(det)).reshape(
        ncells, ncells, q, q
    )

    cellvecs = np.einsum("cdgh,cgi,dhj->cdij", fw, vals1, vals1)
    out = np.zeros(n * n)
    loc1 = starts[:, None] + np.arange(nl)[None, :]
    flat = (loc1[:, None, :, None] * n + loc1[None, :, None, :]).reshape(-1)
    np.add.at(out, flat, cellvecs.reshape(-1))
    return out


def boundary_ring_indices(n: int, m: int, boundary_sides) -> np.ndarray:
    """Flat indices within the m outermost rings adjacent to the given sides."""
    keep = np.zeros((n, n), dtype=bool)
    for side in boundary_sides:
        if side == "W":
            keep[:m, :] = True
        elif side == "E":
            keep[n - m:, :] = True
        elif side == "S":
            keep[:, :m] = True
        elif side == "N":
            keep[:, n - m:] = True
    return np.nonzero(keep.ravel())[0]


def boundary_mass_and_fit_load(
    g: GeometryMap,
    space: TensorSpace,
    m: int,
    target,
    quad: Quadrature1D,
    boundary_sides,
):
    """Boundary-data Gram matrix and fit load over the boundary-ring set.

    For each boundary side and each transversal order l = 0..m-1 the rows of
    phi -> d1^l phi(0, .) (side-local view) are integrated against each other
    (weight h^(2l)) and against the same trace of the target field.  The
    result is SPD on the ring set and its minimizer reproduces representable
    boundary data exactly.

    Returns (ring index set, M, b) with M, b indexed by position in the set.
    """
    u = space.U
    n = u.n
    if not boundary_sides:
        raise NotBoundaryPatch("patch has no sides on the domain boundary")
    jdx = boundary_ring_indices(n, m, boundary_sides)
    pos = {int(j): i for i, j in enumerate(jdx)}
    nj = len(jdx)
    mass = np.zeros((nj, nj))
    load = np.zeros(nj)

    trace0 = eval_basis(u, 0.0, m - 1)  # (m, n): N^(l)_{l1}(0)
    idx = multi_indices(max(m - 1, 1))
    sel = [idx.index((ell, 0)) for ell in range(1, m)]

    for side in boundary_sides:
        view = EdgeView(patch=-1, side=side, reverse=False)
        gv = view.geometry(g)
        perm = view.permutation(n)
        gcols = np.array([pos[int(perm[l1 * n + l2])] for l1 in range(m) for l2 in range(n)])

        for c in range(quad.ncells):
            for q_ in range(quad.per_cell):
                t = float(quad.points[c, q_])
                w = float(quad.weights[c, q_])
                edge_vals = eval_basis(u, t, 0)[0]  # N_{l2}(t)

                jet = gv.jet((0.0, t), max(m - 1, 1))
                xy = jet[:, 0, 0]
                if m >= 2:
                    tr = DerivativeTransform(jet, m - 1)
                    phys = target.partial_stack(tr.indices, xy[0], xy[1])
                    par = tr.matrix @ phys
                    traces = [float(np.asarray(target.value(xy[0], xy[1])))]
                    traces += [float(par[s]) for s in sel]
                else:
                    traces = [float(np.asarray(target.value(xy[0], xy[1])))]

                for ell in range(m):
                    row = np.outer(trace0[ell, :m], edge_vals).ravel()  # (m*n,)
                    hw = u.h ** (2 * ell) * w
                    nz = np.nonzero(row)[0]
                    cols = gcols[nz]
                    vals = row[nz]
                    mass[np.ix_(cols, cols)] += hw * np.outer(vals, vals)
                    load[cols] += hw * traces[ell] * vals
    return jdx, mass, load
