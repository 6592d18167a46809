"""Smoothness-constraint assembly for C^s multi-patch spline coupling.

Couples patchwise tensor-product splines into a C^s-smooth global space by
linear constraints on the coefficient vector, organized as three families:

* edge rows (``C_gamma``): cross-derivative traces of both patches along an
  inner edge are collocated against shared auxiliary edge splines, which are
  then eliminated, leaving conditions that couple the two patches directly;
* inner-vertex rows (``C_xi``): physical partial derivatives up to order 2s
  agree for consecutive patches around every inner vertex;
* boundary-vertex machinery: at boundary vertices where several patches meet,
  derivative-at-endpoint conditions are split into a part acting only on the
  fixed boundary coefficients (returned for the boundary data fit) and a
  greedy direct complement appended to the edge rows.

Columns always refer to the full patch-major coefficient layout
(patch index major, flat tensor index minor); callers slice as needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial

import numpy as np
import scipy.linalg

from .domains import InnerEdge, MultiPatchDomain, Vertex
from .errors import (
    ComplementIncomplete,
    ComplementMismatch,
    ConfigError,
    GluingSingular,
    SingularD2,
)
from .geometry import GluingData
from .jets import (
    DerivativeTransform,
    jet1_mul,
    jet1_pow,
    jet1_reciprocal,
    multi_indices,
    opjet_derivative,
    opjet_scale,
)
from .linalg import RowSpace, lu_factor, numerical_rank
from .splines import (
    UnivariateSpace,
    collocation_matrix,
    eval_basis,
    greville_points,
    make_space,
)

D2_CONDITION_LIMIT = 1e12
ALPHA_FLOOR = 1e-12
RANK_RTOL = 1e-10


def edge_trace_spaces(space: UnivariateSpace, s: int) -> list[UnivariateSpace]:
    """Auxiliary spline spaces carrying the order-l cross derivatives, l=0..s."""
    return [make_space(space.p - ell, space.r + s - ell, space.k) for ell in range(s + 1)]


def side1_kept_indices(n: int, m: int, s: int, ell: int,
                       ends_inner: tuple[bool, bool]) -> np.ndarray:
    """Collocation indices kept on the second side for derivative order ell.

    The first side collocates at all n Greville points; the second drops a few
    points nearest each edge endpoint, whose content is restored there by the
    vertex machinery.  The drop count per end matches the restoring capacity
    of that end: 2s+1-ell at an inner vertex (C^{2s} rows), m+s-ell at a
    boundary vertex (endpoint derivative conditions of order < m+s-ell).  The
    two coincide exactly when s = m-1.  Validated per configuration against
    the brute-force dimension oracle.
    """
    drop = [(2 * s + 1 - ell) if inner else (m + s - ell) for inner in ends_inner]
    if drop[0] + drop[1] >= n:
        return np.empty(0, dtype=int)
    return np.arange(drop[0], n - drop[1])


# --- edge trace collocation ------------------------------------------------

@dataclass
class EdgeSystem:
    """Uneliminated collocation rows of one inner edge.

    Row i acts as  cu[side[i]] . u^(patch of that side) + d_rows[i] . d = 0,
    where d stacks the auxiliary edge-spline coefficients for l = 0..s.
    """

    edge: InnerEdge
    cu: tuple[np.ndarray, np.ndarray]   # per side: (rows, n^2) in original coords
    d: np.ndarray                       # (rows, sum n_l)
    meta: list[tuple[int, int, int]]    # (side, ell, greville index)
    nd: int


def _side_rows(domain: MultiPatchDomain, edge: InnerEdge, side: int,
               space: UnivariateSpace, m: int, s: int,
               dspaces: list[UnivariateSpace], keep: str) -> tuple[np.ndarray, np.ndarray, list]:
    n = space.n
    ends_inner = (domain.vertices[edge.vertices[0]].inner,
                  domain.vertices[edge.vertices[1]].inner)
    view = edge.views[side]
    perm = view.permutation(n)
    grev = greville_points(space)
    gluing = edge.gluing
    if gluing is None:
        raise ConfigError(f"edge {edge.id}: gluing data missing")
    alpha = np.asarray(gluing.alpha_at(side, grev), dtype=float)
    beta = np.asarray(gluing.beta_at(side, grev), dtype=float)
    if np.abs(alpha).min() < ALPHA_FLOOR:
        raise GluingSingular(
            f"edge {edge.id} side {side}: alpha vanishes at a collocation point"
        )
    # N_l2(t_c) and end-derivative values N^(l)_{l1}(0)
    cval = collocation_matrix(space, grev)            # (n, n)
    endvals = eval_basis(space, 0.0, s)               # (s+1, n)
    dmats = {}
    for j, dsp in enumerate(dspaces):
        for der in range(s - j + 1):
            dmats[(j, der)] = collocation_matrix(dsp, grev, der)
    nd_sizes = [sp.n for sp in dspaces]
    nd_off = np.concatenate([[0], np.cumsum(nd_sizes)])

    rows_u, rows_d, meta = [], [], []
    for ell in range(s + 1):
        idx = (np.arange(n) if keep == "full" or side == 0
               else side1_kept_indices(n, m, s, ell, ends_inner))
        if idx.size == 0:
            continue
        # u part: alpha^ell * d1^ell u(0, t_c) over viewed coefficients (l1 <= ell)
        u_viewed = np.einsum("a,cb->cab", endvals[ell], cval[idx]).reshape(idx.size, -1)
        u_orig = np.zeros_like(u_viewed)
        u_orig[:, perm] = u_viewed
        d_part = np.zeros((idx.size, nd_off[-1]))
        for j in range(ell + 1):
            sl = slice(nd_off[j], nd_off[j + 1])
            scale = comb(ell, j) * beta[idx] ** (ell - j) * alpha[idx] ** j
            d_part[:, sl] = -scale[:, None] * dmats[(j, ell - j)][idx]
        rows_u.append(u_orig)
        rows_d.append(d_part)
        meta.extend((side, ell, int(c)) for c in idx)
    return np.vstack(rows_u), np.vstack(rows_d), meta


def edge_collocation_system(domain: MultiPatchDomain, edge: InnerEdge,
                            space: UnivariateSpace, m: int, s: int,
                            keep: str = "policy") -> EdgeSystem:
    """Collocated trace conditions for one inner edge, before elimination.

    keep="policy" applies the reduced second-side ranges; keep="full"
    collocates both sides everywhere (used by the dimension oracle, where the
    full set expresses exact functional smoothness).
    """
    dspaces = edge_trace_spaces(space, s)
    u0, d0, m0 = _side_rows(domain, edge, 0, space, m, s, dspaces, keep)
    u1, d1, m1 = _side_rows(domain, edge, 1, space, m, s, dspaces, keep)
    zeros0 = np.zeros((u0.shape[0], u0.shape[1]))
    zeros1 = np.zeros((u1.shape[0], u1.shape[1]))
    cu0 = np.vstack([u0, zeros1])
    cu1 = np.vstack([zeros0, u1])
    return EdgeSystem(
        edge=edge,
        cu=(cu0, cu1),
        d=np.vstack([d0, d1]),
        meta=m0 + m1,
        nd=d0.shape[1],
    )


def eliminate_edge_splines(system: EdgeSystem) -> np.ndarray:
    """Eliminate the auxiliary coefficients; rows return on (u^(s0)|u^(s1)).

    A square invertible block of the d-columns is selected by column-pivoted
    QR on d^T; the remaining rows carry the coupled conditions.
    """
    d = system.d
    nd = system.nd
    if d.shape[0] < nd:
        raise SingularD2(
            f"edge {system.edge.id}: {d.shape[0]} rows cannot eliminate {nd} unknowns"
        )
    _, _, piv = scipy.linalg.qr(d.T, mode="economic", pivoting=True)
    sel = np.sort(piv[:nd])
    rest = np.setdiff1d(np.arange(d.shape[0]), sel)
    d2 = d[sel]
    sv = scipy.linalg.svdvals(d2)
    if sv[0] == 0.0 or sv[-1] == 0.0 or sv[0] / sv[-1] > D2_CONDITION_LIMIT:
        raise SingularD2(
            f"edge {system.edge.id}: eliminated block condition "
            f"{sv[0] / max(sv[-1], np.finfo(float).tiny):.2e} exceeds {D2_CONDITION_LIMIT:.0e}"
        )
    cu = np.hstack(system.cu)
    c2 = cu[sel]
    c1 = cu[rest]
    d1 = d[rest]
    return c1 - d1 @ lu_factor(d2).solve(c2)


def build_edge_conditions(domain: MultiPatchDomain, edge: InnerEdge,
                          space: UnivariateSpace, m: int, s: int) -> np.ndarray:
    """Edge rows on the (u^(side0)|u^(side1)) coefficient pair."""
    return eliminate_edge_splines(edge_collocation_system(domain, edge, space, m, s))


# --- inner vertex conditions -----------------------------------------------

def physical_corner_rows(domain: MultiPatchDomain, patch: int,
                         corner: tuple[int, int], space: UnivariateSpace,
                         order: int) -> np.ndarray:
    """Rows mapping patch coefficients to physical partials at a patch corner.

    Returns (1 + len(multi_indices(order)), n^2): the order-0 value row first,
    then plain physical partials in multi_indices order.
    """
    n = space.n
    c1, c2 = float(corner[0]), float(corner[1])
    d1 = eval_basis(space, c1, order)
    d2 = eval_basis(space, c2, order)
    par = np.einsum("aj,bl->abjl", d1, d2).reshape(order + 1, order + 1, n * n)
    if order == 0:
        return par[0, 0][None, :]
    idx = multi_indices(order)
    par_stack = np.stack([par[a, b] for a, b in idx])
    tr = DerivativeTransform(domain.patches[patch].jet((c1, c2), order), order)
    phys = tr.to_physical(par_stack)
    return np.vstack([par[0, 0][None, :], phys])


def build_vertex_conditions(domain: MultiPatchDomain, vertex: Vertex,
                            space: UnivariateSpace, s: int):
    """C^{2s} rows at an inner vertex for consecutive patch pairs.

    Returns (rows, pairs): rows is ((nu-1)*binom(2s+2,2), n_patches*n^2) in the
    full layout, pairs lists the (patch_a, patch_b) support of each row.
    """
    if not vertex.inner:
        raise ConfigError(f"vertex {vertex.id} is not an inner vertex")
    n2 = space.n * space.n
    ncols = domain.n_patches * n2
    order = 2 * s
    blocks = [
        physical_corner_rows(domain, p, c, space, order)
        for p, c in zip(vertex.cycle, vertex.corners)
    ]
    nrows_blk = blocks[0].shape[0]
    rows = np.zeros(((vertex.valency - 1) * nrows_blk, ncols))
    pairs: list[tuple[int, int]] = []
    for ell in range(vertex.valency - 1):
        pa, pb = vertex.cycle[ell], vertex.cycle[ell + 1]
        sl = slice(ell * nrows_blk, (ell + 1) * nrows_blk)
        rows[sl, pa * n2:(pa + 1) * n2] += blocks[ell]
        rows[sl, pb * n2:(pb + 1) * n2] -= blocks[ell + 1]
        pairs.extend([(pa, pb)] * nrows_blk)
    return rows, pairs


# --- boundary vertices ------------------------------------------------------

def gamma_operator_jets(view_perm: np.ndarray, gluing: GluingData, side: int,
                        space: UnivariateSpace, s: int, t_v: float,
                        max_w: int) -> list[np.ndarray]:
    """Taylor jets at t_v of the cross-derivative traces as coefficient rows.

    Element l is a (max_w - l + 1, n^2) array whose row w holds the
    normalized w-th Taylor coefficient of gamma_l[u](t) at t_v, as a
    functional on the original patch coefficients.
    """
    n = space.n
    alpha0 = float(gluing.alpha_at(side, t_v))
    if abs(alpha0) < ALPHA_FLOOR:
        raise GluingSingular(f"alpha vanishes at edge endpoint t={t_v}")
    out: list[np.ndarray] = []
    endvals = eval_basis(space, 0.0, s)
    tvals = eval_basis(space, t_v, max_w)
    wfac = np.array([factorial(w) for w in range(max_w + 1)], dtype=float)
    for ell in range(s + 1):
        order = max_w - ell
        ra = jet1_reciprocal(gluing.alpha_jet(side, t_v, order), order)
        # normalized trace jet of d1^ell u(0, t) at t_v
        tr = np.einsum("a,wb->wab", endvals[ell], tvals[: order + 1] / wfac[: order + 1, None])
        tr = tr.reshape(order + 1, -1)
        base = np.zeros_like(tr)
        base[:, view_perm] = tr
        gam = opjet_scale(jet1_pow(ra, ell, order), base, order)
        for j in range(ell):
            boa = jet1_mul(gluing.beta_jet(side, t_v, order), ra, order)
            fac = jet1_pow(boa, ell - j, order)
            gam = gam - comb(ell, j) * opjet_scale(fac, opjet_derivative(out[j], ell - j), order)
        out.append(gam)
    return out


@dataclass
class BoundaryVertexBlock:
    vertex: int
    btilde: np.ndarray          # (rows, ncols) full-layout endpoint conditions
    b_rows: np.ndarray          # (rank-reduced rows, ncols), support on u_B only
    complement: np.ndarray      # rows appended to the smallest adjacent edge
    host_edge: int              # edge id receiving the complement rows
    meta: list[tuple[int, int, int]] = field(default_factory=list)  # (edge, ell, w)


def build_boundary_vertex_conditions(domain: MultiPatchDomain, vertex: Vertex,
                                     space: UnivariateSpace, m: int, s: int,
                                     boundary_mask: np.ndarray,
                                     context: RowSpace | None = None,
                                     ) -> BoundaryVertexBlock:
    """Endpoint smoothness machinery at a boundary vertex of valency >= 2.

    Builds the full endpoint conditions (derivatives of the cross-derivative
    trace differences along each adjacent inner edge), projects out the part
    acting only on the fixed boundary coefficients, and greedily selects a
    complement of that part for the edge rows.

    Without ``context`` the complement count is the local defect (rows built
    minus boundary-only rows) and falling short raises ComplementIncomplete.
    With ``context`` (the row space, on free coefficients, of everything
    assembled so far; extended in place) the scan instead keeps every row
    whose free-coefficient part enlarges that space, which drops restorations
    already provided by the kept collocation rows of short edges, where the
    nominal exclusion counts of the two ends overlap.
    """
    n = space.n
    n2 = n * n
    ncols = domain.n_patches * n2
    max_w = m + s - 1
    rows = []
    meta = []
    for j, edge_id in enumerate(vertex.path_edges):
        edge = domain.inner_edges[edge_id]
        t_v = 0.0 if vertex.id == edge.vertices[0] else 1.0
        side_of = {edge.views[0].patch: 0, edge.views[1].patch: 1}
        pa, pb = vertex.cycle[j], vertex.cycle[j + 1]
        jets = {}
        for p in (pa, pb):
            side = side_of[p]
            jets[p] = gamma_operator_jets(
                edge.views[side].permutation(n), edge.gluing, side, space, s, t_v, max_w
            )
        for ell in range(s + 1):
            for w in range(m + s - ell):
                row = np.zeros(ncols)
                scale = float(factorial(w))
                row[pa * n2:(pa + 1) * n2] += scale * jets[pa][ell][w]
                row[pb * n2:(pb + 1) * n2] -= scale * jets[pb][ell][w]
                rows.append(row)
                meta.append((edge_id, ell, w))
    btilde = np.vstack(rows)

    bbar = btilde.copy()
    bbar[:, boundary_mask] = 0.0
    # combinations of conditions whose free-coefficient part cancels
    from .linalg import null_space_basis

    nsp = null_space_basis(bbar.T)
    proj = nsp.T @ btilde if nsp.shape[1] else np.zeros((0, ncols))
    if proj.shape[0]:
        free_part = proj[:, ~boundary_mask]
        scale = max(np.abs(proj).max(), 1.0)
        if free_part.size and np.abs(free_part).max() > 1e-10 * scale:
            raise ComplementMismatch(
                f"vertex {vertex.id}: boundary-only conditions leak onto free "
                f"coefficients ({np.abs(free_part).max():.2e})"
            )
        proj = proj.copy()
        proj[:, ~boundary_mask] = 0.0

    target = btilde.shape[0] - proj.shape[0]
    # scan order: adjacent edges by index, then w descending, then trace order
    order_idx = sorted(
        range(len(meta)),
        key=lambda i: (meta[i][0], -meta[i][2], meta[i][1]),
    )
    kept: list[int] = []
    if context is not None:
        free = ~boundary_mask
        for i in order_idx:
            row = btilde[i] / np.abs(btilde[i]).max()
            if context.add_if_new(row[free], ref_norm=float(np.linalg.norm(row))):
                kept.append(i)
        if len(kept) > target:
            raise ComplementMismatch(
                f"vertex {vertex.id}: {len(kept)} complement rows exceed the "
                f"local defect {target}"
            )
    elif target > 0:
        stack = proj
        base_rank = numerical_rank(stack, rel_tol=RANK_RTOL) if stack.size else 0
        for i in order_idx:
            trial = np.vstack([stack, btilde[i][None, :]])
            r = numerical_rank(trial, rel_tol=RANK_RTOL)
            if r > base_rank:
                stack = trial
                base_rank = r
                kept.append(i)
                if len(kept) == target:
                    break
        if len(kept) != target:
            raise ComplementIncomplete(
                f"vertex {vertex.id}: found {len(kept)} of {target} complement rows"
            )
    complement = btilde[kept] if kept else np.zeros((0, ncols))
    meta = [meta[i] for i in kept]
    return BoundaryVertexBlock(
        vertex=vertex.id,
        btilde=btilde,
        b_rows=proj,
        complement=complement,
        host_edge=min(vertex.path_edges),
        meta=meta,
    )


# --- global assembly --------------------------------------------------------

@dataclass
class ConstraintSet:
    """Assembled coupling constraints in the full coefficient layout."""

    ncols: int
    cxi: np.ndarray                      # inner-vertex rows, unit inf-norm
    cxi_pairs: list[tuple[int, int]]     # patch support per C_xi row
    cgamma: np.ndarray                   # edge + complement rows, unit inf-norm
    cgamma_edges: list[int]              # owning edge id per C_gamma row
    bvertices: list[BoundaryVertexBlock]

    @property
    def n_rows(self) -> int:
        return self.cxi.shape[0] + self.cgamma.shape[0]


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    if rows.size == 0:
        return rows
    scale = np.abs(rows).max(axis=1)
    if np.any(scale == 0.0):
        raise ConfigError("constraint assembly produced an all-zero row")
    return rows / scale[:, None]


def assemble_constraints(domain: MultiPatchDomain, space: UnivariateSpace,
                         m: int, s: int, boundary_mask: np.ndarray) -> ConstraintSet:
    """Build all coupling rows for the domain.

    boundary_mask flags, in the full layout, the coefficients held fixed by
    the boundary data (the m outer rings along the domain boundary).
    """
    n2 = space.n * space.n
    ncols = domain.n_patches * n2
    if boundary_mask.shape != (ncols,):
        raise ConfigError("boundary mask does not match the coefficient layout")

    # one shared row space over the free coefficients arbitrates the whole
    # assembly: a row only counts if it constrains something the boundary
    # data does not already fix and earlier rows do not already express
    free = ~boundary_mask
    span = RowSpace(np.zeros((0, int(free.sum()))), rel_tol=RANK_RTOL)

    cxi_rows = np.zeros((0, ncols))
    cxi_pairs: list[tuple[int, int]] = []
    for vertex in domain.inner_vertices():
        rows, pairs = build_vertex_conditions(domain, vertex, space, s)
        if rows[:, boundary_mask].any():
            raise ConfigError(
                f"inner vertex {vertex.id}: C^(2s) stencil reaches boundary "
                "coefficients; refine (n too small for m and s)"
            )
        rows = _unit_rows(rows)
        for row in rows:
            if not span.add_if_new(row[free], ref_norm=float(np.linalg.norm(row))):
                raise ConfigError(
                    f"inner vertex {vertex.id}: dependent C^(2s) row"
                )
        cxi_rows = np.vstack([cxi_rows, rows])
        cxi_pairs.extend(pairs)

    # edge rows pass through the shared filter too: when an edge is so short
    # that the exclusion ranges of its two ends overlap, the collocation
    # conditions carry a genuine linear dependency that must not reach the
    # final constraint matrix
    edge_rows: dict[int, list[np.ndarray]] = {}
    for edge in domain.inner_edges:
        pair_rows = build_edge_conditions(domain, edge, space, m, s)
        pa, pb = edge.patches
        rows = np.zeros((pair_rows.shape[0], ncols))
        rows[:, pa * n2:(pa + 1) * n2] = pair_rows[:, :n2]
        rows[:, pb * n2:(pb + 1) * n2] = pair_rows[:, n2:]
        rows = _unit_rows(rows)
        survivors = [
            row for row in rows
            if span.add_if_new(row[free], ref_norm=float(np.linalg.norm(row)))
        ]
        edge_rows[edge.id] = [np.array(survivors).reshape(-1, ncols)]

    # boundary vertices see everything assembled so far, including each
    # other's complements (in vertex order), through the shared row space
    bblocks = []
    for v in domain.boundary_vertices(min_valency=2):
        blk = build_boundary_vertex_conditions(
            domain, v, space, m, s, boundary_mask, context=span,
        )
        bblocks.append(blk)
        if blk.complement.shape[0]:
            edge_rows[blk.host_edge].append(_unit_rows(blk.complement))

    cgamma_parts: list[np.ndarray] = []
    cgamma_edges: list[int] = []
    for edge in domain.inner_edges:
        for block in edge_rows[edge.id]:
            cgamma_parts.append(block)
            cgamma_edges.extend([edge.id] * block.shape[0])
    cgamma = np.vstack(cgamma_parts) if cgamma_parts else np.zeros((0, ncols))

    return ConstraintSet(
        ncols=ncols,
        cxi=cxi_rows,
        cxi_pairs=cxi_pairs,
        cgamma=cgamma,
        cgamma_edges=cgamma_edges,
        bvertices=bblocks,
    )


# --- brute-force dimension oracle -------------------------------------------

def smoothness_system_nullity(domain: MultiPatchDomain, space: UnivariateSpace,
                              m: int, s: int, boundary_mask: np.ndarray) -> int:
    """dim of the C^s-smooth space with zeroed boundary ring coefficients.

    Stacks the full (unreduced, uneliminated) smoothness system: both-side
    full-range edge collocations with their auxiliary unknowns, inner-vertex
    C^{2s} rows, and unit rows pinning the boundary coefficients; the
    dimension is unknowns minus numerical rank.  The collocated conditions
    express exact functional smoothness, so this is an independent count
    against which the assembled constraint rows are checked.
    """
    n2 = space.n * space.n
    ncols = domain.n_patches * n2
    systems = [
        edge_collocation_system(domain, e, space, m, s, keep="full")
        for e in domain.inner_edges
    ]
    nd_total = sum(sys.nd for sys in systems)
    ncols_all = ncols + nd_total
    rows = []
    off = ncols
    for sys in systems:
        blk = np.zeros((sys.d.shape[0], ncols_all))
        pa, pb = sys.edge.patches
        blk[:, pa * n2:(pa + 1) * n2] = sys.cu[0]
        blk[:, pb * n2:(pb + 1) * n2] = sys.cu[1]
        blk[:, off:off + sys.nd] = sys.d
        rows.append(blk)
        off += sys.nd
    for vertex in domain.inner_vertices():
        vr, _ = build_vertex_conditions(domain, vertex, space, s)
        rows.append(np.hstack([vr, np.zeros((vr.shape[0], nd_total))]))
    pin = np.zeros((int(boundary_mask.sum()), ncols_all))
    pin[np.arange(pin.shape[0]), np.flatnonzero(boundary_mask)] = 1.0
    rows.append(pin)
    # equilibrate: the raw rows mix very different magnitudes (endpoint
    # derivative values grow like (p/h)^l), which would swamp the rank cutoff
    full = _unit_rows(np.vstack(rows))
    _check_aux_injective(systems)
    # the auxiliary splines are uniquely determined by the patch coefficients
    # (previous check), so every null vector is (u, d(u)) for a smooth u and
    # the nullity of the stacked system equals the smooth-space dimension
    return ncols_all - numerical_rank(full, rel_tol=RANK_RTOL)


def _check_aux_injective(systems: list[EdgeSystem]) -> None:
    """With zero patch coefficients the collocations force every auxiliary
    spline to vanish; verified by a full-column-rank check per edge."""
    for sys in systems:
        if numerical_rank(sys.d, rel_tol=RANK_RTOL) != sys.nd:
            raise ConfigError("auxiliary edge splines underdetermined by collocation")
