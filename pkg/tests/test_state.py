import math

import numpy as np
import pytest
import scipy.sparse as sp

from magshape.material import analytic_samples, build_curve, constant_curve
from magshape.mesh import Mesh, Region, generate_disc_mesh, refine_uniform
from magshape.state import (
    Factorization,
    SolverError,
    SourceSpec,
    SparseSystem,
    apply_dirichlet,
    assemble_jacobian,
    assemble_residual,
    flux_density,
    h1_norm,
    mass_matrix,
    solve_linear,
    solve_state,
    stiffness_matrix,
)

COIL = int(Region.Coil)


def one_triangle() -> Mesh:
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh(v, np.array([[0, 1, 2]]), np.array([int(Region.Air)]), np.zeros((1, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


def l2_error(mesh: Mesh, u: np.ndarray, exact) -> float:
    """Edge-midpoint rule, exact for quadratics on each triangle."""
    x, uu, area = mesh.vertices[mesh.triangles], u[mesh.triangles], mesh.geometry.areas
    e = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        xm, um = 0.5 * (x[:, a] + x[:, b]), 0.5 * (uu[:, a] + uu[:, b])
        e += np.sum(area / 3 * (um - exact(xm)) ** 2)
    return math.sqrt(e)


def manufactured_orders(levels: int = 4) -> tuple[list[float], list[float]]:
    """-div grad u = 1 on the unit disc, u = 0 on the circle: u* = (1 - r^2)/4."""
    mesh = generate_disc_mesh(1.0, 16)
    src = SourceSpec({COIL: 1.0}, 0.0)
    errs = []
    for _ in range(levels):
        u = solve_state(mesh, constant_curve(1.0), src).u
        errs.append(l2_error(mesh, u, lambda x: 0.25 * (1 - (x**2).sum(axis=1))))
        mesh = refine_uniform(mesh, 1.0)
    return errs, [math.log2(errs[k] / errs[k + 1]) for k in range(levels - 1)]


def test_zero_everything_gives_zero_residual(problem):
    r = assemble_residual(problem.mesh, problem.curve, np.zeros(problem.mesh.n_vertices), SourceSpec({}, 0.0))
    assert not r.any()


def test_single_triangle_residual_by_hand():
    m = one_triangle()
    u = m.vertices[:, 0].copy()
    r = assemble_residual(m, constant_curve(1.0), u, SourceSpec({}, 0.0))
    # grad phi = (-1,-1), (1,0), (0,1); area 1/2; grad u = (1, 0)
    assert np.allclose(r, [-0.5, 0.5, 0.0], atol=1e-15)
    k = stiffness_matrix(m).toarray()
    assert np.allclose(k, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)
    assert np.allclose(r, k @ u, atol=1e-15)


def test_current_load_on_single_triangle():
    m = one_triangle().with_regions(np.array([COIL]))
    r = assemble_residual(m, constant_curve(1.0), np.zeros(3), SourceSpec({COIL: 6.0}, 0.0))
    assert np.allclose(r, -1.0)  # -J area / 3


def test_jacobian_at_zero_is_scaled_stiffness():
    m = generate_disc_mesh(1.0, 12, Region.IronFixed)
    curve = build_curve(analytic_samples())
    k = assemble_jacobian(m, curve, np.zeros(m.n_vertices))
    ref = curve.nu(np.array([0.0]))[0] * stiffness_matrix(m)
    assert abs(k - ref).max() <= 1e-12 * abs(ref).max()


def test_jacobian_exactly_symmetric(solved):
    k = assemble_jacobian(solved.mesh, solved.problem.curve, solved.state.u)
    assert abs(k - k.T).max() == 0.0


def test_jacobian_directional_finite_difference(solved):
    mesh, curve, src, u = solved.mesh, solved.problem.curve, solved.problem.src, solved.state.u
    rng = np.random.default_rng(3)
    k = assemble_jacobian(mesh, curve, u)
    r0 = assemble_residual(mesh, curve, u, src)
    free = ~mesh.dirichlet_mask
    delta = 1e-6
    for _ in range(5):
        w = rng.standard_normal(mesh.n_vertices) * np.abs(u).max()
        w[~free] = 0.0
        fd = (assemble_residual(mesh, curve, u + delta * w, src) - r0) / delta
        kw = (k @ w)[free]
        assert np.linalg.norm(fd[free] - kw) <= 1e-5 * np.linalg.norm(kw)


def test_solve_linear_identity_and_two_by_two():
    b = np.array([1.0, -2.0, 3.0])
    assert np.allclose(solve_linear(SparseSystem(sp.identity(3, format="csr"), b)), b)
    x = solve_linear(SparseSystem(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), np.array([1.0, 1.0])))
    assert np.allclose(x, [1 / 3, 1 / 3], rtol=1e-14)


def test_solve_linear_random_spd_against_dense():
    rng = np.random.default_rng(7)
    bm = rng.standard_normal((100, 100))
    a = bm @ bm.T + np.eye(100)
    b = rng.standard_normal(100)
    x = solve_linear(SparseSystem(sp.csr_matrix(a), b))
    ref = np.linalg.solve(a, b)
    assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)


def test_singular_matrix_raises():
    with pytest.raises(SolverError):
        Factorization(sp.csr_matrix(np.zeros((3, 3)))).solve(np.ones(3))


def test_dirichlet_elimination_keeps_symmetry():
    a = sp.csr_matrix(np.array([[4.0, 1, 0], [1, 3, 1], [0, 1, 2]]))
    s = apply_dirichlet(a, np.ones(3), np.array([True, False, False]))
    d = s.matrix.toarray()
    assert np.array_equal(d, d.T)
    assert d[0, 0] == 1 and not d[0, 1:].any() and s.rhs[0] == 0


def test_zero_source_needs_no_newton_step(problem, initial_design):
    _, mesh = initial_design
    st = solve_state(mesh, problem.curve, SourceSpec({}, 0.0))
    assert st.iterations <= 1
    assert not st.u.any()


def test_linear_problem_converges_in_one_step():
    m = generate_disc_mesh(1.0, 24)
    st = solve_state(m, constant_curve(1.0), SourceSpec({COIL: 1.0}, 0.0))
    assert st.iterations == 1


def test_manufactured_solution_second_order():
    errs, orders = manufactured_orders()
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert min(orders) >= 1.9, orders


def test_motor_solution_has_small_residual(solved):
    st = solved.state
    assert st.history[-1] <= 1e-13 * np.linalg.norm(
        assemble_residual(solved.mesh, solved.problem.curve, np.zeros_like(st.u), solved.problem.src)
    )
    assert not st.u[solved.mesh.dirichlet_mask].any()


def test_state_solution_is_deterministic(problem, initial_design):
    _, mesh = initial_design
    a = solve_state(mesh, problem.curve, problem.src)
    b = solve_state(mesh, problem.curve, problem.src)
    assert np.array_equal(a.u, b.u)


def test_threaded_assembly_matches_serial(solved, monkeypatch):
    mesh, curve, u = solved.mesh, solved.problem.curve, solved.state.u
    serial = assemble_jacobian(mesh, curve, u)
    monkeypatch.setenv("MAGSHAPE_THREADS", "3")
    threaded = assemble_jacobian(mesh, curve, u)
    assert np.array_equal(serial.data, threaded.data)


def test_newton_budget_exhaustion_raises(problem, initial_design):
    _, mesh = initial_design
    with pytest.raises(SolverError) as info:
        solve_state(mesh, problem.curve, problem.src, max_newton=1)
    assert len(info.value.history) == 2


def test_norms_and_flux(solved):
    mesh = solved.mesh
    one = np.ones(mesh.n_vertices)
    assert math.isclose(h1_norm(mesh, one) ** 2, mesh.signed_areas.sum(), rel_tol=1e-12)
    assert math.isclose(float(one @ (mass_matrix(mesh) @ one)), mesh.signed_areas.sum(), rel_tol=1e-12)
    b = flux_density(mesh, mesh.vertices[:, 0])
    assert np.allclose(b, [0.0, -1.0])
