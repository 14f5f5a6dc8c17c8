import math

import numpy as np
import pytest
from scipy.integrate import quad

from magshape.material import constant_curve, region_beta
from magshape.shapegrad import PerturbationError, eval_dJ, random_admissible_field
from magshape.state import apply_dirichlet, element_gradients, h1_norm, solve_linear, solve_state, stiffness_matrix
from magshape.objective import assemble_adjoint_rhs
from magshape.verify import (
    averaged_coefficient,
    check_kernels,
    check_lipschitz_state,
    eval_transported_lagrangian,
    flip_design,
    gauss_unit,
    lagrangian_dt0,
    l2_transport_error,
    nested_flips,
    solve_averaged_adjoint,
    solve_perturbed_state,
    tangential_jacobian,
    transport_kernels,
)
from magshape.shapegrad import perturbed_mesh


@pytest.fixture(scope="module")
def field(solved):
    return random_admissible_field(solved.mesh, np.random.default_rng(21))


def args(solved):
    pb = solved.problem
    return solved.mesh, pb.curve, pb.src, pb.target


def test_kernels_at_zero_and_derivatives(solved, field):
    kc = check_kernels(solved.mesh, field)
    assert kc.xi0_error == 0.0 and kc.M0_error == 0.0
    assert kc.max_error < 1e-6
    k = transport_kernels(solved.mesh, field, 0.0)
    assert np.array_equal(k.P, k.M) and np.all(k.xi == 1.0)


def test_transported_geometry_equals_moved_mesh(solved, field):
    t = 0.05
    geo = transport_kernels(solved.mesh, field, t).geometry(solved.mesh)
    moved = perturbed_mesh(solved.mesh, field, t).geometry
    assert np.allclose(geo.areas, moved.areas, rtol=1e-12)
    assert np.allclose(geo.grads, moved.grads, rtol=1e-9, atol=1e-9 * np.abs(moved.grads).max())


def test_inadmissible_transport_raises(solved, field):
    with pytest.raises(PerturbationError):
        transport_kernels(solved.mesh, field, 5.0).geometry(solved.mesh)


def test_gamma0_does_not_stretch(solved, field):
    assert np.all(tangential_jacobian(solved.mesh, field, 0.1) == 1.0)


def test_lagrangian_at_zero_is_cost(solved, field):
    mesh, curve, src, target = args(solved)
    g = eval_transported_lagrangian(mesh, curve, src, target, field, 0.0, solved.state.u, solved.p)
    assert math.isclose(g, solved.J, rel_tol=1e-12)


def test_lagrangian_without_motion_is_constant(solved):
    mesh, curve, src, target = args(solved)
    zero = np.zeros((mesh.n_vertices, 2))
    vals = [eval_transported_lagrangian(mesh, curve, src, target, zero, t, solved.state.u, solved.p) for t in (0.0, 0.1, 1.0)]
    assert vals[0] == vals[1] == vals[2]


def test_lagrangian_affine_in_multiplier(solved, field):
    mesh, curve, src, target = args(solved)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, mesh.n_vertices))
    f = lambda psi: eval_transported_lagrangian(mesh, curve, src, target, field, 0.03, solved.state.u, psi)  # noqa: E731
    lhs = f(0.25 * a + 0.75 * b)
    rhs = 0.25 * f(a) + 0.75 * f(b)
    assert math.isclose(lhs, rhs, rel_tol=1e-10)


def test_lagrangian_derivative(solved, field):
    mesh, curve, src, target = args(solved)
    dj = eval_dJ(solved.g, field)
    h = 1e-6
    gp = eval_transported_lagrangian(mesh, curve, src, target, field, h, solved.state.u, solved.p)
    gm = eval_transported_lagrangian(mesh, curve, src, target, field, -h, solved.state.u, solved.p)
    assert abs((gp - gm) / (2 * h) - dj) <= 1e-5 * abs(dj)
    assert abs(lagrangian_dt0(mesh, curve, src, field, solved.state.u, solved.p) - dj) <= 1e-10 * abs(dj)


def test_perturbed_state_trivial_cases(solved, field):
    mesh, curve, src, _ = args(solved)
    u = solve_state(mesh, curve, src).u
    assert np.array_equal(solve_perturbed_state(mesh, curve, src, field, 0.0).u, u)
    assert np.array_equal(solve_perturbed_state(mesh, curve, src, np.zeros_like(field), 0.3).u, u)


def test_perturbed_state_matches_moved_mesh(solved, field):
    mesh, curve, src, _ = args(solved)
    t = 1e-2
    a = solve_perturbed_state(mesh, curve, src, field, t, tol=1e-12).u
    b = solve_state(perturbed_mesh(mesh, field, t), curve, src, tol=1e-12).u
    assert np.abs(a - b).max() <= 1e-8 * np.abs(b).max()


def test_averaged_coefficient_against_adaptive_quadrature(solved):
    mesh, curve = solved.mesh, solved.problem.curve
    rng = np.random.default_rng(2)
    g0 = element_gradients(solved.state.u, mesh.triangles, mesh.geometry.grads)
    g1 = g0 * (1 + 0.5 * rng.standard_normal((mesh.n_triangles, 1)))
    a = averaged_coefficient(mesh, curve, g0, g1)
    iron = np.flatnonzero(mesh.iron)

    def kinks(a, b):
        # s where |a + s (b - a)| hits a knot: the spline is only C^1 there
        d = b - a
        out = []
        for k in curve.knots[curve.knots > 0]:
            out += [r.real for r in np.roots([d @ d, 2 * a @ d, a @ a - k * k]) if abs(r.imag) < 1e-14 and 0 < r.real < 1]
        return sorted(out) or None
    for e in rng.choice(iron, 10, replace=False):
        for i, j in ((0, 0), (0, 1), (1, 1)):
            def entry(s):
                g = g0[e] + s * (g1[e] - g0[e])
                b, db = region_beta(curve, np.array([True]), np.array([g @ g]))
                return b[0] * (i == j) + 2 * db[0] * g[i] * g[j]

            ref = quad(entry, 0.0, 1.0, points=kinks(g0[e], g1[e]), epsabs=0, epsrel=1e-13, limit=500)[0]
            assert math.isclose(a[e, i, j], ref, rel_tol=1e-9, abs_tol=1e-9 * abs(a[e]).max()), (e, i, j)


def test_averaged_adjoint_at_zero_is_adjoint(solved, field):
    mesh, curve, _, target = args(solved)
    u = solved.state.u
    p0 = solve_averaged_adjoint(mesh, curve, target, field, 0.0, u, u)
    assert np.abs(p0 - solved.p).max() <= 1e-10 * np.abs(solved.p).max()


def test_linear_material_averaged_adjoint_is_exact(solved, field):
    mesh, target = solved.mesh, solved.problem.target
    curve = constant_curve()
    src = solved.problem.src
    t = 0.02
    u0 = solve_state(mesh, curve, src).u
    ut = solve_perturbed_state(mesh, curve, src, field, t, tol=1e-12).u
    p5 = solve_averaged_adjoint(mesh, curve, target, field, t, u0, ut, n_gauss=5)
    p1 = solve_averaged_adjoint(mesh, curve, target, field, t, u0, ut, n_gauss=1)
    assert np.abs(p5 - p1).max() <= 1e-10 * np.abs(p5).max()
    # one solve with the transported stiffness; the cost term is linear, so its s-average is the midpoint
    geo = transport_kernels(mesh, field, t).geometry(mesh)
    k = curve.nu0 * stiffness_matrix(mesh.with_vertices(perturbed_mesh(mesh, field, t).vertices))
    rhs = assemble_adjoint_rhs(mesh, 0.5 * (u0 + ut), target)
    p = solve_linear(apply_dirichlet(k, rhs, mesh.dirichlet_mask))
    assert np.abs(p5 - p).max() <= 1e-9 * np.abs(p).max()
    assert geo.areas.sum() > 0


def test_gauss_rule():
    x, w = gauss_unit(5)
    assert math.isclose(w.sum(), 1.0, rel_tol=1e-15)
    assert math.isclose(float(w @ x**9), 0.1, rel_tol=1e-13)


def test_state_difference_scales_with_t(solved, field):
    mesh, curve, src, _ = args(solved)
    u = solved.state.u
    ratios = [h1_norm(mesh, solve_perturbed_state(mesh, curve, src, field, t, tol=1e-12, u0=u).u - u) / t for t in (1e-2, 1e-3, 1e-4)]
    assert max(ratios) / min(ratios) < 2.0


def test_lipschitz_identical_designs(solved):
    mesh, curve, src, _ = args(solved)
    res = check_lipschitz_state(mesh, curve, src, mesh.regions, mesh.regions)
    assert res.numerator == 0.0 and not res.defined and math.isnan(res.ratio)


def test_flips_and_nested_sets(solved):
    mesh = solved.mesh
    idx = nested_flips(mesh, np.random.default_rng(0), 16)
    assert len(set(idx.tolist())) == 16 and mesh.design[idx].all()
    d = np.hypot(*(mesh.centroids[idx] - mesh.centroids[idx[0]]).T)
    assert np.all(np.diff(d) >= 0)
    flipped = flip_design(mesh.regions, idx[:3])
    assert np.count_nonzero(flipped != mesh.regions) == 3
    assert np.array_equal(flip_design(flipped, idx[:3]), mesh.regions)


def test_transport_error_first_order(solved, field):
    fn = lambda x: np.sin(x[:, 0] / 0.01) * np.cos(x[:, 1] / 0.01)  # noqa: E731
    e = [l2_transport_error(solved.mesh, field, t, fn) for t in (1e-2, 1e-3, 1e-4)]
    assert 0.9 < math.log10(e[1] / e[2]) < 1.1
    assert l2_transport_error(solved.mesh, field, 0.0, fn) == 0.0


def test_verification_report(verification, tmp_path):
    rep, _ = verification
    assert rep.passed, rep.to_text()
    files = rep.write(tmp_path)
    assert [f.name for f in files] == ["verify_report.txt", "verify_report.csv"]
    lines = files[1].read_text().splitlines()
    assert lines[0] == "check,params,value,threshold,passed"
    assert len(lines) == len(rep.rows) + 1
    assert rep["averaged_adjoint_gauss5_vs_gauss10"].value < 1e-8
