"""Multi-patch domain model: patches, edges, vertices, and their wiring.

The domain is a conforming collection of planar spline patches.  Every inner
edge knows its two adjacencies as standard edge views (edge at {xi1 = 0},
edge parameter running from the lower- to the higher-indexed endpoint
vertex).  Every vertex carries the counterclockwise cycle of patches meeting
there, the corner parameters of each, and the inner edges between consecutive
cycle members; valency is the cycle length.

Topology can be inferred from a quad mesh (one bilinear patch per quad) or
loaded from a JSON file; both paths run the same validation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .errors import (
    DegenerateQuad,
    InconsistentOrientation,
    NonManifold,
    NotBilinear,
    ParseError,
    ValidationError,
)
from .geometry import (
    SIDES,
    EdgeView,
    GeometryMap,
    GluingData,
    bilinear_space,
    derive_gluing_from_views,
    side_corners,
)
from .splines import make_space

# natural-direction endpoint corner ids of each side of quad (v0, v1, v2, v3)
_SIDE_LOCAL_ENDS = {"S": (0, 1), "E": (1, 2), "N": (3, 2), "W": (0, 3)}
_CORNER_PARAMS = {0: (0, 0), 1: (1, 0), 2: (1, 1), 3: (0, 1)}


@dataclass(frozen=True)
class InnerEdge:
    id: int
    vertices: tuple[int, int]          # (low id, high id); edge parameter runs low -> high
    views: tuple[EdgeView, EdgeView]   # ascending patch index
    gluing: GluingData | None = None

    @property
    def patches(self) -> tuple[int, int]:
        return (self.views[0].patch, self.views[1].patch)


@dataclass(frozen=True)
class BoundaryEdge:
    id: int
    patch: int
    side: str
    vertices: tuple[int, int]


@dataclass(frozen=True)
class Vertex:
    id: int
    position: np.ndarray
    cycle: tuple[int, ...]                 # ccw patch ids
    corners: tuple[tuple[int, int], ...]   # (c1, c2) of each cycle patch at this vertex
    path_edges: tuple[int, ...]            # inner edge between cycle[i] and cycle[i+1] (+ wrap if inner)
    inner: bool

    @property
    def valency(self) -> int:
        return len(self.cycle)


@dataclass
class MultiPatchDomain:
    s: int
    patches: list[GeometryMap]
    inner_edges: list[InnerEdge]
    boundary_edges: list[BoundaryEdge]
    vertices: list[Vertex]
    _boundary_sides: dict[int, list[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._boundary_sides:
            for be in self.boundary_edges:
                self._boundary_sides.setdefault(be.patch, []).append(be.side)

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def boundary_sides(self, patch: int) -> list[str]:
        return self._boundary_sides.get(patch, [])

    def inner_vertices(self) -> list[Vertex]:
        return [v for v in self.vertices if v.inner]

    def boundary_vertices(self, min_valency: int = 2) -> list[Vertex]:
        return [v for v in self.vertices if not v.inner and v.valency >= min_valency]

    def viewed_geometry(self, edge: InnerEdge, side_idx: int) -> GeometryMap:
        view = edge.views[side_idx]
        return view.geometry(self.patches[view.patch])

    def all_bilinear(self) -> bool:
        return all(g.is_bilinear for g in self.patches)


# --- standard edge view (public op) ---------------------------------------

def standard_edge_view(domain: MultiPatchDomain, edge_id: int, side_idx: int) -> EdgeView:
    """Edge view of one adjacency of an inner edge; validates both views agree."""
    edge = domain.inner_edges[edge_id]
    _check_edge_curves(domain, edge, tol=1e-10, err=InconsistentOrientation)
    return edge.views[side_idx]


def _check_edge_curves(domain: MultiPatchDomain, edge: InnerEdge, tol: float, err):
    g0 = domain.viewed_geometry(edge, 0)
    g1 = domain.viewed_geometry(edge, 1)
    scale = max(1.0, np.abs(g0.control).max(), np.abs(g1.control).max())
    ts = np.linspace(0.0, 1.0, 50)
    gap = max(np.linalg.norm(g0.value((0.0, t)) - g1.value((0.0, t))) for t in ts)
    if gap > tol * scale:
        raise err(
            f"edge {edge.id}: the two patch views trace different curves (gap {gap:.2e})"
        )


def derive_bilinear_gluing(domain: MultiPatchDomain, edge_id: int) -> GluingData:
    edge = domain.inner_edges[edge_id]
    g0 = domain.viewed_geometry(edge, 0)
    g1 = domain.viewed_geometry(edge, 1)
    return derive_gluing_from_views(g0, g1)


# --- quad-mesh topology inference -----------------------------------------

def build_bilinear_domain(points, quads, s: int = 0) -> MultiPatchDomain:
    """One bilinear patch per ccw quad; topology and gluing inferred.

    Raises DegenerateQuad for collapsed/non-convex/inverted quads and
    NonManifold when an edge has more than two incident quads (or the
    orientations are inconsistent).
    """
    points = np.asarray(points, dtype=float)
    quads = np.asarray(quads, dtype=int)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValidationError(f"points must be (V, 2), got {points.shape}")
    if quads.ndim != 2 or quads.shape[1] != 4:
        raise ValidationError(f"quads must be (Q, 4), got {quads.shape}")
    if quads.size and (quads.min() < 0 or quads.max() >= len(points)):
        raise ValidationError("quad corner index out of range")

    used = np.zeros(len(points), dtype=bool)
    used[quads.ravel()] = True
    if not used.all():
        raise ValidationError(f"unused mesh points: {np.nonzero(~used)[0].tolist()}")

    gspace = bilinear_space()
    patches: list[GeometryMap] = []
    for q, quad in enumerate(quads):
        if len(set(quad.tolist())) != 4:
            raise DegenerateQuad(f"quad {q} repeats a corner")
        v = points[quad]
        scale = max(float(np.abs(v - v.mean(axis=0)).max()) ** 2, 1e-300)
        for c in range(4):
            e1 = v[(c + 1) % 4] - v[c]
            e2 = v[(c + 3) % 4] - v[c]
            cross = e1[0] * e2[1] - e1[1] * e2[0]
            if cross <= 1e-12 * scale:
                raise DegenerateQuad(
                    f"quad {q} has non-positive corner Jacobian at corner {c} "
                    "(collapsed, non-convex, or clockwise)"
                )
        control = np.empty((2, 2, 2))
        control[0, 0], control[1, 0], control[1, 1], control[0, 1] = v[0], v[1], v[2], v[3]
        patches.append(GeometryMap(space=gspace, control=control))

    # undirected edge -> list of (quad, side, natural direction start/end ids)
    edge_map: dict[tuple[int, int], list[tuple[int, str, int, int]]] = {}
    for q, quad in enumerate(quads):
        for side, (a, b) in _SIDE_LOCAL_ENDS.items():
            va, vb = int(quad[a]), int(quad[b])
            edge_map.setdefault((min(va, vb), max(va, vb)), []).append((q, side, va, vb))

    inner_edges: list[InnerEdge] = []
    boundary_edges: list[BoundaryEdge] = []
    for key in sorted(edge_map):
        recs = edge_map[key]
        lo, hi = key
        if len(recs) > 2:
            raise NonManifold(f"edge {key} shared by {len(recs)} quads")
        if len(recs) == 1:
            q, side, va, vb = recs[0]
            boundary_edges.append(
                BoundaryEdge(id=len(boundary_edges), patch=q, side=side, vertices=key)
            )
            continue
        (qa, sa, va0, va1), (qb, sb, vb0, vb1) = recs
        if qa == qb:
            raise NonManifold(f"quad {qa} glued to itself along edge {key}")
        # ccw boundary traversal runs with the natural side parameter on S/E
        # and against it on N/W; neighbors must traverse the edge oppositely
        trav_a = va0 if sa in ("S", "E") else va1
        trav_b = vb0 if sb in ("S", "E") else vb1
        if trav_a == trav_b:
            raise NonManifold(
                f"edge {key}: adjacent quads {qa}, {qb} traverse it in the same "
                "direction (inconsistent orientation)"
            )
        views = []
        for q, side, v_start, v_end in recs:
            views.append(EdgeView(patch=q, side=side, reverse=(v_start != lo)))
        views.sort(key=lambda vw: vw.patch)
        inner_edges.append(
            InnerEdge(id=len(inner_edges), vertices=key, views=tuple(views))
        )

    vertices = _build_vertices(points, quads, inner_edges)

    domain = MultiPatchDomain(
        s=s,
        patches=patches,
        inner_edges=inner_edges,
        boundary_edges=boundary_edges,
        vertices=vertices,
    )
    _check_overlaps(domain)
    for i, edge in enumerate(inner_edges):
        _check_edge_curves(domain, edge, tol=1e-12, err=InconsistentOrientation)
        gluing = derive_bilinear_gluing(domain, i)
        inner_edges[i] = InnerEdge(
            id=edge.id, vertices=edge.vertices, views=edge.views, gluing=gluing
        )
    domain.inner_edges = inner_edges
    return domain


def _build_vertices(points, quads, inner_edges) -> list[Vertex]:
    edge_by_pair = {tuple(sorted(e.vertices)): e.id for e in inner_edges}
    incident: dict[int, list[tuple[int, int]]] = {}
    for q, quad in enumerate(quads):
        for c, vid in enumerate(quad):
            incident.setdefault(int(vid), []).append((q, c))

    vertices: list[Vertex] = []
    for vid in range(len(points)):
        recs = incident[vid]
        pos = points[vid]
        # sector of each incident quad: (angle of its ccw-first edge at the
        # vertex, quad, corner slot, endpoint of its ccw-last edge)
        sectors = []
        for q, c in recs:
            nxt = points[quads[q][(c + 1) % 4]] - pos
            start = math.atan2(nxt[1], nxt[0])
            sectors.append((start, q, c, int(quads[q][(c + 3) % 4])))
        sectors.sort(key=lambda rec: rec[0])
        nu = len(sectors)

        # which consecutive (cyclically) sector pairs are joined by an inner edge
        joints = []
        for i in range(nu):
            j = (i + 1) % nu
            shared = edge_by_pair.get(tuple(sorted((vid, sectors[i][3]))))
            joined = False
            if shared is not None and nu > 1:
                other = inner_edges[shared].patches
                if set(other) == {sectors[i][1], sectors[j][1]} and sectors[i][1] != sectors[j][1]:
                    joined = True
            joints.append((joined, shared))
        n_gaps = sum(1 for joined, _ in joints if not joined)

        if nu == 1:
            cycle_order = [0]
            inner = False
        elif n_gaps == 0:
            inner = True
            ids = [sectors[i][1] for i in range(nu)]
            start = ids.index(min(ids))
            cycle_order = [(start + i) % nu for i in range(nu)]
        elif n_gaps == 1:
            inner = False
            gap_at = next(i for i, (joined, _) in enumerate(joints) if not joined)
            cycle_order = [(gap_at + 1 + i) % nu for i in range(nu)]
        else:
            raise NonManifold(f"vertex {vid}: {n_gaps} fans meet at one point")

        cycle = tuple(sectors[i][1] for i in cycle_order)
        if len(set(cycle)) != len(cycle):
            raise NonManifold(f"vertex {vid}: a patch touches the vertex twice")
        corners = tuple(_CORNER_PARAMS[sectors[i][2]] for i in cycle_order)
        path_edges = []
        for idx in range(len(cycle_order) if inner else len(cycle_order) - 1):
            i = cycle_order[idx]
            _, eid = joints[i]
            path_edges.append(int(eid))
        vertices.append(
            Vertex(
                id=vid,
                position=pos.copy(),
                cycle=cycle,
                corners=corners,
                path_edges=tuple(path_edges),
                inner=inner,
            )
        )
    return vertices


def _patch_polygon(g: GeometryMap, samples_per_side: int = 8) -> Polygon:
    ts = np.linspace(0.0, 1.0, samples_per_side, endpoint=False)
    ring = []
    for side, param in (("S", 0), ("E", 1), ("N", 2), ("W", 3)):
        for t in ts:
            if side == "S":
                xi = (t, 0.0)
            elif side == "E":
                xi = (1.0, t)
            elif side == "N":
                xi = (1.0 - t, 1.0)
            else:
                xi = (0.0, 1.0 - t)
            ring.append(g.value(xi))
    return Polygon(np.array(ring))


def _check_overlaps(domain: MultiPatchDomain):
    polys = [_patch_polygon(g) for g in domain.patches]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            inter = polys[i].intersection(polys[j]).area
            limit = 1e-10 * min(polys[i].area, polys[j].area)
            if inter > limit:
                raise ValidationError(
                    f"patches {i} and {j} overlap (intersection area {inter:.2e})"
                )


# --- built-in domains ------------------------------------------------------

BUILTIN_DOMAINS = ("square1", "strip2", "corner3L", "fan3")


def builtin_domain(name: str, s: int = 0) -> MultiPatchDomain:
    """Built-in test domains.

    square1: the unit square, one patch.
    strip2:  [0,2]x[0,1] as two unit squares, one inner edge.
    corner3L: L-shape of three unit squares around a reentrant corner.
    fan3:    equilateral triangle split into three quads around its centroid
             (one inner vertex of valency 3, three inner edges).
    """
    h = math.sqrt(3.0) / 2.0
    if name == "square1":
        pts = [(0, 0), (1, 0), (1, 1), (0, 1)]
        quads = [[0, 1, 2, 3]]
    elif name == "strip2":
        pts = [(0, 0), (1, 0), (2, 0), (2, 1), (1, 1), (0, 1)]
        quads = [[0, 1, 4, 5], [1, 2, 3, 4]]
    elif name == "corner3L":
        pts = [(0, 0), (1, 0), (1, 1), (0, 1), (-1, 0), (-1, 1), (0, -1), (1, -1)]
        quads = [[0, 1, 2, 3], [4, 0, 3, 5], [6, 7, 1, 0]]
    elif name == "fan3":
        pts = [
            (0.0, 0.0), (1.0, 0.0), (0.5, h),          # triangle corners
            (0.5, 0.0), (0.75, h / 2), (0.25, h / 2),  # edge midpoints
            (0.5, h / 3),                              # centroid
        ]
        quads = [[0, 3, 6, 5], [1, 4, 6, 3], [2, 5, 6, 4]]
    else:
        raise ValidationError(
            f"unknown built-in domain {name!r}; choose from {BUILTIN_DOMAINS}"
        )
    return build_bilinear_domain(np.array(pts, dtype=float), quads, s=s)


# --- JSON serialization ----------------------------------------------------

def save_domain(domain: MultiPatchDomain, path):
    doc = {
        "s": domain.s,
        "patches": [
            {
                "degree": g.space.p,
                "regularity": g.space.r,
                "interior_knots": g.space.k,
                "control": np.asarray(g.control).reshape(-1, 2).tolist(),
            }
            for g in domain.patches
        ],
        "inner_edges": [
            {
                "vertices": list(e.vertices),
                "sides": [
                    {"patch": vw.patch, "side": vw.side, "reverse": vw.reverse}
                    for vw in e.views
                ],
                **(
                    {
                        "gluing": {
                            "alpha": e.gluing.alpha.tolist(),
                            "beta": e.gluing.beta.tolist(),
                        }
                    }
                    if e.gluing is not None
                    else {}
                ),
            }
            for e in domain.inner_edges
        ],
        "boundary_edges": [
            {"patch": b.patch, "side": b.side, "vertices": list(b.vertices)}
            for b in domain.boundary_edges
        ],
        "vertices": [
            {
                "position": v.position.tolist(),
                "cycle": list(v.cycle),
                "inner": v.inner,
            }
            for v in domain.vertices
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_domain(path) -> MultiPatchDomain:
    """Load and fully validate a domain file; derives missing gluing data."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc

    try:
        s = int(doc["s"])
        patches = []
        for rec in doc["patches"]:
            space = make_space(int(rec["degree"]), int(rec["regularity"]), int(rec["interior_knots"]))
            control = np.asarray(rec["control"], dtype=float).reshape(space.n, space.n, 2)
            patches.append(GeometryMap(space=space, control=control))
        raw_inner = [
            (
                tuple(int(v) for v in rec["vertices"]),
                tuple(
                    EdgeView(patch=int(sd["patch"]), side=str(sd["side"]), reverse=bool(sd["reverse"]))
                    for sd in rec["sides"]
                ),
                rec.get("gluing"),
            )
            for rec in doc["inner_edges"]
        ]
        raw_boundary = [
            (int(rec["patch"]), str(rec["side"]), tuple(int(v) for v in rec["vertices"]))
            for rec in doc["boundary_edges"]
        ]
        raw_vertices = [
            (np.asarray(rec["position"], dtype=float), tuple(int(q) for q in rec["cycle"]), bool(rec["inner"]))
            for rec in doc["vertices"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed domain document: {exc}") from exc

    for _, views, _ in raw_inner:
        if len(views) != 2:
            raise ValidationError("inner edge must list exactly 2 sides")
        if views[0].patch == views[1].patch:
            raise ValidationError("self-glued patches are not supported")
        for vw in views:
            if vw.side not in SIDES:
                raise ValidationError(f"unknown side {vw.side!r}")

    # every patch side must appear exactly once across all edges
    seen: dict[tuple[int, str], int] = {}
    for _, views, _ in raw_inner:
        for vw in views:
            seen[(vw.patch, vw.side)] = seen.get((vw.patch, vw.side), 0) + 1
    for patch, side, _ in raw_boundary:
        seen[(patch, side)] = seen.get((patch, side), 0) + 1
    for q in range(len(patches)):
        for side in SIDES:
            count = seen.get((q, side), 0)
            if count != 1:
                raise ValidationError(
                    f"patch {q} side {side} appears {count} times across edges (expected 1)"
                )

    inner_edges = [
        InnerEdge(id=i, vertices=v if v[0] < v[1] else (v[1], v[0]), views=views)
        for i, (v, views, _) in enumerate(raw_inner)
    ]
    boundary_edges = [
        BoundaryEdge(id=i, patch=p, side=sd, vertices=v)
        for i, (p, sd, v) in enumerate(raw_boundary)
    ]

    vertices = _rebuild_vertex_wiring(patches, inner_edges, raw_vertices)

    domain = MultiPatchDomain(
        s=s,
        patches=patches,
        inner_edges=inner_edges,
        boundary_edges=boundary_edges,
        vertices=vertices,
    )
    _check_overlaps(domain)

    for i, (raw, edge) in enumerate(zip(raw_inner, inner_edges)):
        _check_edge_curves(domain, edge, tol=1e-10, err=InconsistentOrientation)
        g0 = domain.viewed_geometry(edge, 0)
        g1 = domain.viewed_geometry(edge, 1)
        if raw[2] is not None:
            try:
                gluing = GluingData(
                    alpha=np.asarray(raw[2]["alpha"], dtype=float),
                    beta=np.asarray(raw[2]["beta"], dtype=float),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"edge {i}: malformed gluing record: {exc}") from exc
            gluing.validate_sign_pattern()
            _validate_gluing_identity(g0, g1, gluing, edge_id=i)
        else:
            if not (g0.is_bilinear and g1.is_bilinear):
                raise NotBilinear(
                    f"edge {i}: gluing data missing and patches are not bilinear"
                )
            gluing = derive_gluing_from_views(g0, g1)
        inner_edges[i] = InnerEdge(
            id=edge.id, vertices=edge.vertices, views=edge.views, gluing=gluing
        )
    domain.inner_edges = inner_edges
    _check_regularity(domain)
    return domain


def _validate_gluing_identity(g0, g1, gluing: GluingData, edge_id: int):
    scale = max(np.abs(g0.control).max(), np.abs(g1.control).max(), 1.0)
    for t in np.linspace(0.0, 1.0, 20):
        tg = g0.jet((0.0, t), 1)[:, 0, 1]
        if np.linalg.norm(tg) < 1e-12:
            raise DegenerateQuad(f"edge {edge_id}: degenerate tangent")
        d = []
        for tau, g in enumerate((g0, g1)):
            d1 = g.jet((0.0, t), 1)[:, 1, 0]
            a = float(gluing.alpha_at(tau, t))
            b = float(gluing.beta_at(tau, t))
            d.append((d1 - b * tg) / a)
        if np.linalg.norm(d[0] - d[1]) > 1e-9 * scale:
            raise ValidationError(
                f"edge {edge_id}: stored gluing violates the first-order identity "
                f"at t={t:.3f} (gap {np.linalg.norm(d[0] - d[1]):.2e})"
            )


def _rebuild_vertex_wiring(patches, inner_edges, raw_vertices) -> list[Vertex]:
    edge_at = {}
    for e in inner_edges:
        for vid in e.vertices:
            edge_at.setdefault(vid, []).append(e)

    vertices = []
    for vid, (pos, cycle, inner) in enumerate(raw_vertices):
        corners = []
        for q in cycle:
            g = patches[q]
            found = None
            scale = max(1.0, np.abs(g.control).max())
            for c1 in (0, 1):
                for c2 in (0, 1):
                    if np.linalg.norm(g.corner(c1, c2) - pos) <= 1e-10 * scale:
                        found = (c1, c2)
            if found is None:
                raise ValidationError(
                    f"vertex {vid}: position {pos.tolist()} is not a corner of patch {q}"
                )
            corners.append(found)

        path_edges = []
        nu = len(cycle)
        npairs = nu if inner else nu - 1
        for idx in range(npairs):
            qa, qb = cycle[idx], cycle[(idx + 1) % nu]
            match = [
                e.id
                for e in edge_at.get(vid, [])
                if set(e.patches) == {qa, qb}
            ]
            if len(match) != 1:
                raise ValidationError(
                    f"vertex {vid}: cycle patches {qa},{qb} not joined by exactly "
                    f"one inner edge at the vertex (found {len(match)})"
                )
            path_edges.append(match[0])
        vertices.append(
            Vertex(
                id=vid,
                position=pos,
                cycle=tuple(cycle),
                corners=tuple(corners),
                path_edges=tuple(path_edges),
                inner=inner,
            )
        )
    return vertices


def _check_regularity(domain: MultiPatchDomain, samples: int = 8, eps_reg: float = 1e-8):
    for q, g in enumerate(domain.patches):
        dets = []
        for x1 in np.linspace(0.0, 1.0, samples):
            for x2 in np.linspace(0.0, 1.0, samples):
                dets.append(float(np.linalg.det(g.jacobian((x1, x2)))))
        dets = np.asarray(dets)
        scale = max(1.0, np.abs(g.control).max() ** 2)
        if np.abs(dets).min() < eps_reg * scale or dets.max() * dets.min() <= 0.0:
            raise ValidationError(
                f"patch {q}: geometry map not regular (det J in "
                f"[{dets.min():.2e}, {dets.max():.2e}])"
            )
