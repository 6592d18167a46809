"""Measurement and oracle tools: dense saddle solves, derivative-seminorm
errors, inter-patch smoothness probes, stiffness kernel studies, and
convergence-order estimation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from . import ieti
from .assembly import _batched_transforms, _geometry_jets, local_stiffness
from .constraints import assemble_constraints, physical_corner_rows
from .domains import MultiPatchDomain, build_bilinear_domain
from .errors import ConfigError, SingularMatrix, SingularSystem, ZeroDenominator
from .geometry import GeometryMap
from .jets import laplacian_selectors, multi_indices
from .linalg import lu_factor, numerical_rank
from .manufactured import ManufacturedSolution, get_solution
from .quadrature import make_quadrature
from .splines import TensorSpace, collocation_matrix, make_tensor_space

RANK_STUDY_SEED = 20240811
RANK_STUDY_TOL = 1e-8


# --- dense saddle oracle ----------------------------------------------------

def direct_saddle_solve(kmat, cmat, f, c) -> tuple[np.ndarray, np.ndarray]:
    """Solve [[K, C^T], [C, 0]] (u, lam) = (f, c) by dense pivoted LU.

    The oracle route: no elimination, no block structure.  Raises
    SingularSystem when a pivot collapses or the solve fails its own
    backward-error check (1e-10 times the system scale).
    """
    kd = kmat.toarray() if scipy.sparse.issparse(kmat) else np.asarray(kmat, dtype=float)
    cd = cmat.toarray() if scipy.sparse.issparse(cmat) else np.asarray(cmat, dtype=float)
    cd = cd.reshape(-1, kd.shape[0]) if cd.size else cd.reshape(0, kd.shape[0])
    nc = cd.shape[0]
    a = np.block([[kd, cd.T], [cd, np.zeros((nc, nc))]])
    rhs = np.concatenate([np.asarray(f, dtype=float), np.asarray(c, dtype=float)])
    if rhs.shape[0] != a.shape[0]:
        raise SingularSystem(
            f"rhs length {rhs.shape[0]} does not match system size {a.shape[0]}")
    try:
        fac = lu_factor(a)
    except SingularMatrix as exc:
        raise SingularSystem(f"saddle system singular: {exc}") from exc
    x = fac.solve(rhs)
    resid = float(np.abs(a @ x - rhs).max(initial=0.0))
    scale = max(1.0, float(np.abs(rhs).max(initial=0.0)),
                float(np.abs(a).sum(axis=1).max(initial=0.0) *
                      np.abs(x).max(initial=0.0)))
    if resid > 1e-10 * scale:
        raise SingularSystem(
            f"saddle solve residual {resid:.3e} exceeds 1e-10 * scale {scale:.3e}")
    return x[:kd.shape[0]], x[kd.shape[0]:]


def assemble_saddle_system(domain: MultiPatchDomain, *, m: int, s: int, p: int,
                           r: int, k: int,
                           solution: str | ManufacturedSolution = "trig",
                           q_order: int | None = None):
    """Full uncondensed saddle system of one problem instance.

    Returns (K, C, f, c): block-diagonal stiffness, stacked constraint rows
    (boundary pins, then vertex rows, then edge rows), loads, and the
    constraint right-hand side carrying the fitted boundary values.  Solving
    this system directly must reproduce the condensed solver's output.
    """
    ieti.validate_parameters(m, s, p, r, k)
    target = get_solution(solution) if isinstance(solution, str) else solution
    space = make_tensor_space(p, r, k)
    quad = make_quadrature(space.U, q_order)
    systems = ieti.assemble_patch_systems(
        domain, space, m, lambda x, y: target.load(m, x, y), quad)
    split = ieti.split_dofs(domain, space, m, s)
    cset = assemble_constraints(domain, space.U, m, s, split.full_mask("B"))
    fit = ieti.fit_boundary_data(domain, space, m, split, cset, target, quad)
    kmat = scipy.sparse.block_diag([t.stiffness for t in systems]).tocsr()
    f = np.concatenate([t.load for t in systems])
    bcols = np.flatnonzero(split.full_mask("B"))
    pins = np.zeros((bcols.size, cset.ncols))
    pins[np.arange(bcols.size), bcols] = 1.0
    cmat = np.vstack([pins, cset.cxi, cset.cgamma])
    c = np.concatenate([fit.u_b,
                        np.zeros(cset.cxi.shape[0] + cset.cgamma.shape[0])])
    return kmat, cmat, f, c


# --- pointwise evaluation ---------------------------------------------------

def patch_physical_partials(g: GeometryMap, space: TensorSpace,
                            coeffs: np.ndarray, x1: np.ndarray, x2: np.ndarray,
                            order: int):
    """Values and physical partials of a patch spline on a parameter grid.

    Points run over the tensor grid x1 (x) x2, flattened x1-major.  Returns
    (xy, value, phys, det) with phys columns in multi_indices(order) order
    and det the geometry Jacobian determinant at each point.
    """
    u = space.U
    n = u.n
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    b1 = [collocation_matrix(u, x1, d) for d in range(order + 1)]
    b2 = [collocation_matrix(u, x2, d) for d in range(order + 1)]
    cmat = np.asarray(coeffs, dtype=float).reshape(n, n)
    value = (b1[0] @ cmat @ b2[0].T).ravel()
    px1 = np.repeat(x1, x2.size)
    px2 = np.tile(x2, x1.size)
    gorder = max(order, 1)
    gjets = _geometry_jets(g, px1, px2, gorder)
    xy = gjets[:, :, 0, 0].copy()
    jac = gjets[:, :, :2, :2]
    det = jac[:, 0, 1, 0] * jac[:, 1, 0, 1] - jac[:, 0, 0, 1] * jac[:, 1, 1, 0]
    if order == 0:
        return xy, value, np.zeros((value.size, 0)), det
    idx = multi_indices(order)
    par = np.stack([(b1[a] @ cmat @ b2[b].T).ravel() for a, b in idx], axis=1)
    amats = _batched_transforms(gjets[:, :, :order + 1, :order + 1], order)
    phys = np.linalg.solve(amats, par[:, :, None])[:, :, 0]
    return xy, value, phys, det


# --- error seminorms --------------------------------------------------------

def seminorm_error(domain: MultiPatchDomain, space: TensorSpace,
                   coeffs: np.ndarray, exact: ManufacturedSolution, m: int,
                   q_order: int | None = None) -> float:
    """Relative order-m derivative-seminorm error against an exact field.

    m = 1 compares gradients, m = 2 Laplacians, m = 3 Laplacian gradients,
    integrated patchwise with Gauss quadrature on the physical domain.
    """
    quad = make_quadrature(space.U, q_order)
    x = quad.points.ravel()
    w2 = np.outer(quad.weights.ravel(), quad.weights.ravel()).ravel()
    idx = multi_indices(m)
    sel = laplacian_selectors(m, idx)
    num = 0.0
    den = 0.0
    for i, g in enumerate(domain.patches):
        xy, _, phys, det = patch_physical_partials(g, space, coeffs[i], x, x, m)
        ex = exact.partial_stack(idx, xy[:, 0], xy[:, 1]).T
        dvol = w2 * np.abs(det)
        diff = (phys - ex) @ sel.T
        base = ex @ sel.T
        num += float(np.sum(dvol[:, None] * diff * diff))
        den += float(np.sum(dvol[:, None] * base * base))
    if np.sqrt(den) < 1e-14:
        raise ZeroDenominator(
            f"exact order-{m} seminorm is numerically zero; relative error undefined")
    return float(np.sqrt(num / den))


# --- smoothness probes ------------------------------------------------------

@dataclass
class SmoothnessReport:
    """Largest physical-derivative disagreements across patch interfaces."""

    max_edge_jump: float          # orders <= s along inner edges
    max_vertex_jump: float        # orders <= 2s at inner vertices
    max_value: float              # largest |u_h| seen at the edge samples
    per_edge: dict = field(default_factory=dict)


def smoothness_probe(domain: MultiPatchDomain, space: TensorSpace,
                     coeffs: np.ndarray, s: int,
                     samples: int = 50) -> SmoothnessReport:
    """Compare values and physical partials up to order s across every inner
    edge (both patch views, matched sample points), and up to order 2s at
    every inner vertex around its patch cycle."""
    n = space.U.n
    t = np.linspace(0.0, 1.0, samples)
    max_jump = 0.0
    max_value = 0.0
    per_edge = {}
    for edge in domain.inner_edges:
        stacks = []
        for side in (0, 1):
            view = edge.views[side]
            g = view.geometry(domain.patches[view.patch])
            cv = np.asarray(coeffs[view.patch]).ravel()[view.permutation(n)]
            xy, val, phys, _ = patch_physical_partials(
                g, space, cv, np.array([0.0]), t, s)
            stacks.append(np.column_stack([val, phys]))
            max_value = max(max_value, float(np.abs(val).max(initial=0.0)))
        jump = float(np.abs(stacks[0] - stacks[1]).max(initial=0.0))
        per_edge[edge.id] = jump
        max_jump = max(max_jump, jump)

    max_vjump = 0.0
    for vertex in domain.inner_vertices():
        blocks = [physical_corner_rows(domain, p, c, space.U, 2 * s) @
                  np.asarray(coeffs[p]).ravel()
                  for p, c in zip(vertex.cycle, vertex.corners)]
        for a in range(len(blocks)):
            for b in range(a + 1, len(blocks)):
                max_vjump = max(max_vjump,
                                float(np.abs(blocks[a] - blocks[b]).max()))
    return SmoothnessReport(max_edge_jump=max_jump, max_vertex_jump=max_vjump,
                            max_value=max_value, per_edge=per_edge)


# --- stiffness kernel study -------------------------------------------------

def _random_bilinear_patch(rng: np.random.Generator) -> GeometryMap:
    """A non-degenerate random convex quadrilateral patch."""
    base = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    pts = base + rng.uniform(-0.15, 0.15, size=(4, 2))
    dom = build_bilinear_domain(pts, [(0, 1, 2, 3)], s=0)
    return dom.patches[0]


def rank_deficiency_study(m: int, pairs, k_values=(0, 1), n_random: int = 5,
                          q_order: int | None = None) -> list[dict]:
    """Kernel sizes of the order-m patch stiffness over a (p, r) grid.

    For each pair, knot count, and patch (identity plus seeded random
    bilinear quads) records n^2 minus the numerical rank at relative
    tolerance 1e-8, together with the theoretical cap 2p + m.
    """
    rng = np.random.default_rng(RANK_STUDY_SEED)
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    patches = [("identity", build_bilinear_domain(square, [(0, 1, 2, 3)], s=0).patches[0])]
    patches += [(f"random{j}", _random_bilinear_patch(rng)) for j in range(n_random)]
    records = []
    for p, r in pairs:
        if not 0 <= r < p:
            raise ConfigError(f"(p, r) = ({p}, {r}) violates 0 <= r < p")
        for k in k_values:
            space = make_tensor_space(p, r, k)
            quad = make_quadrature(space.U, q_order)
            n2 = space.U.n ** 2
            for name, g in patches:
                km = local_stiffness(g, space, m, quad).toarray()
                rank = numerical_rank(km, RANK_STUDY_TOL)
                records.append({"m": m, "p": p, "r": r, "k": k, "patch": name,
                                "deficiency": int(n2 - rank),
                                "bound": 2 * p + m})
    return records


# --- convergence study ------------------------------------------------------

@dataclass
class ConvergenceReport:
    """Per-level mesh sizes, DOF counts, relative errors, observed orders."""

    h: np.ndarray
    dof: np.ndarray
    error: np.ndarray
    orders: np.ndarray     # log2(e_j / e_{j+1}), one entry per level pair

    def __post_init__(self):
        if len(self.h) > 1:
            ratios = self.h[:-1] / self.h[1:]
            if not np.allclose(ratios, 2.0, atol=1e-12):
                raise ConfigError("mesh sizes must halve between levels")
        if not np.all(np.isfinite(self.error)) or np.any(self.error <= 0.0):
            raise ConfigError("level errors must be finite and positive")


def convergence_study(domain: MultiPatchDomain, *, m: int, s: int, p: int,
                      r: int, levels: int, h0: float,
                      solution: str | ManufacturedSolution = "trig",
                      tol: float = 1e-10, q_order: int | None = None,
                      max_iter: int | None = None) -> ConvergenceReport:
    """Solve on meshes h = h0 / 2^j for j = 0..levels-1 and measure the
    relative order-m seminorm error at each level."""
    if levels < 1:
        raise ConfigError(f"levels = {levels} must be >= 1")
    ncells0 = round(1.0 / h0)
    if ncells0 < 1 or abs(1.0 / h0 - ncells0) > 1e-9:
        raise ConfigError(f"h0 = {h0} must be the reciprocal of a cell count")
    target = get_solution(solution) if isinstance(solution, str) else solution
    hs, dofs, errs = [], [], []
    for j in range(levels):
        k = ncells0 * 2 ** j - 1
        sol = ieti.solve(domain, m=m, s=s, p=p, r=r, k=k, solution=target,
                         tol=tol, q_order=q_order, max_iter=max_iter)
        space = make_tensor_space(p, r, k)
        err = seminorm_error(domain, space, sol.coefficients, target, m,
                             q_order=q_order)
        hs.append(space.U.h)
        dofs.append(domain.n_patches * space.U.n ** 2)
        errs.append(err)
    errs = np.array(errs)
    orders = np.log2(errs[:-1] / errs[1:]) if len(errs) > 1 else np.zeros(0)
    return ConvergenceReport(h=np.array(hs), dof=np.array(dofs, dtype=int),
                             error=errs, orders=orders)
