"""Solver pipeline: DOF split, boundary fit, reduction, block inverse, duals."""

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse

from polyieti import ieti
from polyieti.constraints import assemble_constraints
from polyieti.domains import builtin_domain
from polyieti.errors import (
    ConfigError,
    DimensionMismatch,
    SingularCoupling,
    TooCoarse,
)
from polyieti.manufactured import get_solution
from polyieti.quadrature import make_quadrature
from polyieti.splines import make_tensor_space


def _pipeline(name, m, s, p, r, k, solution="trig"):
    """Assemble everything up to the factorized block inverse."""
    dom = builtin_domain(name, s)
    space = make_tensor_space(p, r, k)
    quad = make_quadrature(space.U)
    target = get_solution(solution)
    systems = ieti.assemble_patch_systems(
        dom, space, m, lambda x, y: target.load(m, x, y), quad)
    split = ieti.split_dofs(dom, space, m, s)
    cset = assemble_constraints(dom, space.U, m, s, split.full_mask("B"))
    fit = ieti.fit_boundary_data(dom, space, m, split, cset, target, quad)
    reduced = ieti.reduce_system(systems, cset, split, fit.u_b)
    fact = ieti.build_dual_primal(dom, space, s, reduced)
    return dom, space, systems, split, cset, fit, reduced, fact


# --- DOF split --------------------------------------------------------------

@pytest.mark.parametrize("n,s,np_,nr", [(6, 1, 32, 4), (12, 1, 80, 64), (12, 2, 108, 36)])
def test_split_ring_counts(n, s, np_, nr):
    # closed-form check: |R| = (n - 2(s+1))^2 per patch, |P| the rest
    rings = ieti.ring_index(n)
    assert int((rings <= s).sum()) == np_
    assert int((rings > s).sum()) == nr


def test_split_blocks_partition():
    dom = builtin_domain("corner3L", 1)
    space = make_tensor_space(3, 1, 1)
    split = ieti.split_dofs(dom, space, 2, 1)
    n2 = split.n * split.n
    for i in range(split.n_patches):
        p, r = set(split.p_idx[i].tolist()), set(split.r_idx[i].tolist())
        b, f = set(split.b_idx[i].tolist()), set(split.f_idx[i].tolist())
        assert p | r == set(range(n2)) and not p & r
        assert b | f == p and not b & f
    counts = split.counts()
    assert counts["P"] + counts["R"] == split.n_patches * n2
    assert counts["B"] + counts["F"] == counts["P"]


def test_split_too_coarse():
    dom = builtin_domain("strip2", 1)
    space = make_tensor_space(3, 1, 0)  # n = 4 <= 2(s+1)
    with pytest.raises(TooCoarse):
        ieti.split_dofs(dom, space, 2, 1)


def test_split_boundary_exceeds_primal():
    # m = 2 boundary rings cannot fit inside s = 0 primal rings
    dom = builtin_domain("square1", 0)
    space = make_tensor_space(2, 1, 3)
    with pytest.raises(ConfigError):
        ieti.split_dofs(dom, space, 2, 0)


# --- boundary fit -----------------------------------------------------------

def test_solve_boundary_fit_hand_case():
    # M = I, b = (1, 0), one agreement row (1, -1):
    # x = (1, 0), W = 2, mu = 1/2, u = (1/2, 1/2)
    u, mu = ieti.solve_boundary_fit(np.eye(2), np.array([[1.0, -1.0]]),
                                    np.array([1.0, 0.0]))
    assert np.allclose(u, [0.5, 0.5], atol=1e-14)
    assert np.allclose(mu, [0.5], atol=1e-14)


def test_solve_boundary_fit_no_rows():
    m = np.array([[2.0, 0.0], [0.0, 4.0]])
    u, mu = ieti.solve_boundary_fit(m, np.zeros((0, 2)), np.array([2.0, 4.0]))
    assert np.allclose(u, [1.0, 1.0], atol=1e-14)
    assert mu.size == 0


def test_solve_boundary_fit_dependent_rows():
    rows = np.array([[1.0, -1.0], [2.0, -2.0]])
    with pytest.raises(SingularCoupling):
        ieti.solve_boundary_fit(np.eye(2), rows, np.array([1.0, 0.0]))


def test_fit_satisfies_vertex_agreement():
    # fitted boundary data must agree across patches at boundary vertices
    _, _, _, split, cset, fit, _, _ = _pipeline("corner3L", 2, 1, 3, 1, 1)
    bmask = split.full_mask("B")
    full = np.zeros(cset.ncols)
    full[bmask] = fit.u_b
    for blk in cset.bvertices:
        if blk.b_rows.shape[0]:
            assert np.abs(blk.b_rows @ full).max() < 1e-10
    assert fit.residual < 1e-12


def test_fit_error_decreases_under_refinement():
    # trace fit of the trig field improves as the knot mesh is refined
    errs = []
    for k in (1, 3, 7):
        dom = builtin_domain("strip2", 1)
        space = make_tensor_space(3, 1, k)
        quad = make_quadrature(space.U)
        split = ieti.split_dofs(dom, space, 2, 1)
        cset = assemble_constraints(dom, space.U, 2, 1, split.full_mask("B"))
        target = get_solution("trig")
        fit = ieti.fit_boundary_data(dom, space, 2, split, cset, target, quad)
        # measure the trace misfit at the south-west patch corner of patch 0
        from polyieti.splines import eval_basis
        n = space.U.n
        vals = eval_basis(space.U, 0.0, 0)[0]
        coeffs = np.zeros(n * n)
        coeffs[np.array(sorted(split.b_idx[0]))] = fit.u_b[:split.b_idx[0].size]
        corner = float(np.outer(vals, vals).ravel() @ coeffs)
        xy = dom.patches[0].jet((0.0, 0.0), 0)[:, 0, 0]
        errs.append(abs(corner - float(target.value(xy[0], xy[1]))))
    assert errs[2] < errs[0]


# --- reduction and Schur ----------------------------------------------------

def test_reduce_length_mismatch():
    dom, space, systems, split, cset, fit, _, _ = _pipeline("strip2", 1, 0, 2, 1, 1)
    with pytest.raises(DimensionMismatch):
        ieti.reduce_system(systems, cset, split, fit.u_b[:-1])


def test_reduce_zero_boundary_keeps_raw_loads():
    dom, space, systems, split, cset, _, _, _ = _pipeline("strip2", 1, 0, 2, 1, 1)
    red = ieti.reduce_system(systems, cset, split, np.zeros_like(split.full_mask("B"), dtype=float)[split.full_mask("B")])
    for i in range(split.n_patches):
        assert np.allclose(red.fbar_f[i], systems[i].load[split.f_idx[i]])
        assert np.allclose(red.fbar_r[i], systems[i].load[split.r_idx[i]])


def test_schur_hand_case():
    # K = [[2,1,0],[1,3,1],[0,1,4]], F = {0,1}, R = {2}:
    # S = [[2,1],[1,3]] - [[0],[1]] (1/4) [0,1] = [[2,1],[1,2.75]]
    k = scipy.sparse.csr_matrix(np.array([[2.0, 1.0, 0.0],
                                          [1.0, 3.0, 1.0],
                                          [0.0, 1.0, 4.0]]))
    kff = k[[0, 1], :][:, [0, 1]]
    kfr = k[[0, 1], :][:, [2]]
    krr = ieti._KrrSolve(k[[2], :][:, [2]], 0)
    s = ieti.schur_patch(kff, kfr, krr)
    assert np.allclose(s, [[2.0, 1.0], [1.0, 2.75]], atol=1e-14)


def test_schur_empty_interior():
    k = scipy.sparse.csr_matrix(np.diag([2.0, 3.0]))
    s = ieti.schur_patch(k, k[:, []], ieti._KrrSolve(scipy.sparse.csr_matrix((0, 0)), 0))
    assert np.allclose(s, np.diag([2.0, 3.0]))


def test_schur_is_spd_on_test_patch():
    _, _, _, _, _, _, reduced, fact = _pipeline("corner3L", 2, 1, 3, 1, 1)
    for s in fact.sf:
        assert np.abs(s - s.T).max() < 1e-12
        assert np.linalg.eigvalsh(s).min() > 0.0


# --- block inverse ----------------------------------------------------------

@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
@pytest.mark.parametrize("name,m,s,p,r,k", [
    ("strip2", 1, 0, 2, 1, 1),
    ("strip2", 2, 1, 3, 1, 1),
    ("corner3L", 2, 1, 3, 1, 1),
    ("fan3", 2, 1, 3, 1, 1),
    ("fan3", 3, 2, 5, 2, 1),
])
def test_block_inverse_matches_dense(name, m, s, p, r, k):
    _, _, _, _, _, _, reduced, fact = _pipeline(name, m, s, p, r, k)
    dense = ieti.dense_s_tilde(fact, reduced.cxi_f)
    rng = np.random.default_rng(42)
    for _ in range(5):
        rhs = rng.standard_normal(dense.shape[0])
        ref = scipy.linalg.solve(dense, rhs)
        u_f, lam, _ = ieti.apply_s_tilde_inverse(
            fact, rhs[:fact.n_f], rhs[fact.n_f:])
        got = np.concatenate([u_f, lam])
        assert np.abs(got - ref).max() <= 1e-9 * max(1.0, np.abs(ref).max())


def test_block_inverse_shape_guards():
    _, _, _, _, _, _, reduced, fact = _pipeline("strip2", 1, 0, 2, 1, 1)
    with pytest.raises(DimensionMismatch):
        ieti.apply_s_tilde_inverse(fact, np.zeros(fact.n_f + 1), np.zeros(fact.n_xi))
    with pytest.raises(DimensionMismatch):
        ieti.apply_s_tilde_inverse(fact, np.zeros(fact.n_f), np.zeros(fact.n_xi + 1))


def test_vertex_coupling_scales_match_assembled_rows():
    # the stored scales must reproduce the assembled unit-norm vertex rows
    dom, space, _, split, cset, _, _, _ = _pipeline("fan3", 2, 1, 3, 1, 1)
    data = ieti.vertex_coupling_data(dom, space, 1, split)
    fmask = split.full_mask("F")
    for vc in data:
        nu = len(vc.patches)
        nb = vc.blocks[0].shape[0]
        for ell in range(nu - 1):
            for comp in range(nb):
                row = np.zeros(int(fmask.sum()))
                pa, pb = vc.patches[ell], vc.patches[ell + 1]
                fa = np.flatnonzero(fmask)  # global F order
                # scatter the two corner blocks into the F layout
                full = np.zeros(cset.ncols)
                n2 = split.n * split.n
                full[pa * n2 + split.f_idx[pa]] += vc.blocks[ell][comp]
                full[pb * n2 + split.f_idx[pb]] -= vc.blocks[ell + 1][comp]
                rebuilt = full[fmask] / vc.scales[ell, comp]
                stored = cset.cxi[vc.row_offset + ell * nb + comp][fmask]
                assert np.abs(rebuilt - stored).max() < 1e-15


# --- dual solve -------------------------------------------------------------

def test_dual_matrix_spd():
    _, _, _, _, _, _, reduced, fact = _pipeline("corner3L", 2, 1, 3, 1, 1)
    nrows = reduced.cgf.shape[0]
    a = np.zeros((nrows, nrows))
    for j in range(nrows):
        e = np.zeros(nrows)
        e[j] = 1.0
        u_f, _, _ = ieti.apply_s_tilde_inverse(
            fact, reduced.cgf.T @ e, np.zeros(fact.n_xi))
        a[:, j] = reduced.cgf @ u_f
    assert np.abs(a - a.T).max() <= 1e-12 * np.abs(a).max()
    assert np.linalg.eigvalsh(0.5 * (a + a.T)).min() > 0.0


def test_dual_empty_for_single_patch():
    _, _, _, _, _, _, reduced, fact = _pipeline("square1", 1, 0, 2, 1, 2)
    lam, iters = ieti.solve_dual(fact, reduced.cgf, reduced.ftilde_f(),
                                 reduced.gbar)
    assert lam.size == 0 and iters == 0


def test_edge_block_preconditioner_inverts_single_edge_exactly():
    # one inner edge: the block preconditioner is the full dual inverse, so
    # preconditioned CG needs exactly one iteration
    _, _, _, _, cset, _, reduced, fact = _pipeline("strip2", 2, 1, 3, 1, 2)
    lam, iters = ieti.solve_dual(fact, reduced.cgf, reduced.ftilde_f(),
                                 reduced.gbar, edge_ids=cset.cgamma_edges)
    assert iters == 1
    a = ieti.dual_matrix(fact, reduced.cgf)
    u0, _, _ = ieti.apply_s_tilde_inverse(fact, reduced.ftilde_f(),
                                          np.zeros(fact.n_xi))
    rhs = reduced.cgf @ u0 - reduced.gbar
    resid = np.linalg.norm(a @ lam - rhs) / np.linalg.norm(rhs)
    assert resid < 1e-10


def test_solve_dual_preconditioned_matches_plain():
    _, _, _, _, cset, _, reduced, fact = _pipeline("corner3L", 2, 1, 3, 1, 1)
    lam0, _ = ieti.solve_dual(fact, reduced.cgf, reduced.ftilde_f(),
                              reduced.gbar, tol=1e-12)
    lam1, _ = ieti.solve_dual(fact, reduced.cgf, reduced.ftilde_f(),
                              reduced.gbar, tol=1e-12,
                              edge_ids=cset.cgamma_edges)
    assert np.abs(lam0 - lam1).max() < 1e-8 * max(1.0, np.abs(lam0).max())


def test_edge_block_preconditioner_rejects_wrong_id_count():
    _, _, _, _, _, _, reduced, fact = _pipeline("strip2", 1, 0, 2, 1, 1)
    with pytest.raises(DimensionMismatch):
        ieti.edge_block_preconditioner(fact, reduced.cgf, [0])


# --- end-to-end solve -------------------------------------------------------

@pytest.mark.parametrize("name,m,s,p,r,k", [
    ("strip2", 1, 0, 2, 1, 1),
    ("corner3L", 2, 1, 3, 1, 1),
])
def test_solve_matches_dense_saddle(name, m, s, p, r, k):
    dom = builtin_domain(name, s)
    sol = ieti.solve(dom, m=m, s=s, p=p, r=r, k=k)
    space = make_tensor_space(p, r, k)
    quad = make_quadrature(space.U)
    target = get_solution("trig")
    systems = ieti.assemble_patch_systems(
        dom, space, m, lambda x, y: target.load(m, x, y), quad)
    split = ieti.split_dofs(dom, space, m, s)
    cset = assemble_constraints(dom, space.U, m, s, split.full_mask("B"))
    kmat = scipy.linalg.block_diag(*[t.stiffness.toarray() for t in systems])
    f = np.concatenate([t.load for t in systems])
    bcols = np.flatnonzero(split.full_mask("B"))
    pins = np.zeros((bcols.size, cset.ncols))
    pins[np.arange(bcols.size), bcols] = 1.0
    cmat = np.vstack([pins, cset.cxi, cset.cgamma])
    rhs = np.concatenate([f, sol.u_b,
                          np.zeros(cset.cxi.shape[0] + cset.cgamma.shape[0])])
    a = np.block([[kmat, cmat.T],
                  [cmat, np.zeros((cmat.shape[0], cmat.shape[0]))]])
    x = scipy.linalg.solve(a, rhs)
    u_ref = x[:cset.ncols]
    scale = max(1.0, float(np.abs(u_ref).max()))
    assert np.abs(sol.coefficients.ravel() - u_ref).max() <= 1e-10 * scale


def test_solve_residuals_small():
    dom = builtin_domain("fan3", 1)
    sol = ieti.solve(dom, m=2, s=1, p=3, r=1, k=1)
    d = sol.diagnostics
    assert d["momentum_residual"] <= 1e-8 * d["scale"]
    assert d["constraint_residual"] <= 1e-8 * d["scale"]
    assert d["fit_residual"] < 1e-10


def test_solve_triharmonic_fine_ring_scales():
    # the s = 2 boundary fit mixes value rows with order-4 derivative rows
    # whose entries differ by ~13 orders of magnitude at this mesh size;
    # without equilibration the fit factorization rejects the system
    dom = builtin_domain("fan3", 2)
    sol = ieti.solve(dom, m=3, s=2, p=5, r=2, k=3)
    d = sol.diagnostics
    assert d["fit_residual"] < 1e-10
    assert d["constraint_residual"] <= 1e-10 * d["scale"]


def test_solve_fine_mesh_dual_converges_quickly():
    # the unpreconditioned dual system needs >10x the iteration budget at
    # this refinement; the per-edge block preconditioner keeps CG short
    dom = builtin_domain("corner3L", 1)
    sol = ieti.solve(dom, m=2, s=1, p=3, r=1, k=15)
    assert sol.diagnostics["cg_iterations"] <= 100
    assert sol.diagnostics["momentum_residual"] <= 1e-8 * sol.diagnostics["scale"]


def test_solve_deterministic():
    dom = builtin_domain("corner3L", 1)
    a = ieti.solve(dom, m=2, s=1, p=3, r=1, k=1)
    b = ieti.solve(dom, m=2, s=1, p=3, r=1, k=1)
    assert np.array_equal(a.coefficients, b.coefficients)
    assert np.array_equal(a.lam_gamma, b.lam_gamma)


def test_solve_zero_data_gives_zero():
    dom = builtin_domain("strip2", 1)
    sol = ieti.solve(dom, m=2, s=1, p=3, r=1, k=1, solution="zero")
    assert np.abs(sol.coefficients).max() < 1e-12


def test_solve_ablation_drops_edge_rows():
    dom = builtin_domain("corner3L", 1)
    sol = ieti.solve(dom, m=2, s=1, p=3, r=1, k=1, ablate_edges=True)
    assert sol.diagnostics["ablated"]
    assert sol.diagnostics["dual_size"] == 0
    assert sol.lam_gamma.size == 0


def test_stage_tag_on_failure():
    dom = builtin_domain("strip2", 1)
    with pytest.raises(TooCoarse, match=r"\[split\]"):
        ieti.solve(dom, m=2, s=1, p=3, r=1, k=0)


@pytest.mark.parametrize("m,s,p,r,msg", [
    (0, 0, 2, 1, "m >= 1"),
    (2, 0, 2, 1, "s >= m - 1"),
    (1, 1, 2, 1, "p >= 2s"),
    (1, 0, 2, 0, None),          # r < s is impossible for s=0; use r > p-s-1
    (1, 0, 2, 2, "p - "),
    (2, 1, 4, 0, "r >= s"),
])
def test_validate_parameters(m, s, p, r, msg):
    if msg is None:
        with pytest.raises(ConfigError):
            ieti.validate_parameters(m, s, p, r, -1)  # bad knot count instead
        return
    with pytest.raises(ConfigError, match=msg):
        ieti.validate_parameters(m, s, p, r, 0)
