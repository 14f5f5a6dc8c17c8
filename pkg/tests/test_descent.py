import math

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from magshape.descent import AlphaSpec, b_form, classify_alpha, solve_descent
from magshape.shapegrad import ShapeGradient, eval_dJ
from magshape.state import mass_matrix


@pytest.fixture(scope="module")
def descent(solved):
    return solve_descent(solved.mesh, solved.g, solved.problem.alpha, solved.polygons)


def l2(mesh, V):
    mm = mass_matrix(mesh)
    return math.sqrt(sum(V[:, d] @ (mm @ V[:, d]) for d in range(2)))


def test_zero_gradient_gives_zero_field(solved):
    g = ShapeGradient(np.zeros((solved.mesh.n_vertices, 2)), solved.mesh.velocity_free.copy())
    d = solve_descent(solved.mesh, g, AlphaSpec())
    assert not d.V.any() and d.bVV == 0.0


def test_galerkin_identity(solved, descent):
    dj = eval_dJ(solved.g, descent.V)
    assert dj < 0
    assert abs(dj + descent.bVV) <= 1e-10 * descent.bVV
    assert math.isclose(b_form(solved.mesh, descent.alpha, descent.V), descent.bVV, rel_tol=1e-12)


def test_field_vanishes_off_free_vertices(solved, descent):
    assert not descent.V[~solved.mesh.velocity_free].any()


def test_stiffer_alpha_damps_field(solved, descent):
    stiff = solve_descent(solved.mesh, solved.g, 100 * descent.alpha)
    assert l2(solved.mesh, stiff.V) < l2(solved.mesh, descent.V)
    assert abs(eval_dJ(solved.g, stiff.V) + stiff.bVV) <= 1e-10 * stiff.bVV


def test_bilinear_form_symmetric(solved, descent):
    rng = np.random.default_rng(5)
    V, W = rng.standard_normal((2, solved.mesh.n_vertices, 2))
    a, b = b_form(solved.mesh, descent.alpha, V, W), b_form(solved.mesh, descent.alpha, W, V)
    assert math.isclose(a, b, rel_tol=1e-12)


def test_alpha_classes_against_shapely(solved, descent):
    mesh, polys = solved.mesh, solved.polygons
    eps = solved.problem.alpha.resolve_epsilon(mesh)
    shapes = [Polygon(p) for p in polys.points]
    rng = np.random.default_rng(6)
    rotor = np.flatnonzero(mesh.rotor_triangles)
    checked = {1.0: 0, 10.0: 0, 100.0: 0}
    for e in rng.choice(rotor, size=1500, replace=False):
        pt = Point(mesh.centroids[e])
        dist = min(s.exterior.distance(pt) for s in shapes)
        inside = any(s.contains(pt) for s in shapes)
        if inside:
            expect = 1.0
        elif dist <= eps * (1 - 1e-9):
            expect = 10.0
        elif dist > eps * (1 + 1e-9):
            expect = 100.0
        else:
            continue
        assert descent.alpha[e] == expect, e
        checked[expect] += 1
    assert all(v > 0 for v in checked.values()), checked


def test_alpha_near_band_at_half_epsilon(solved):
    # a point eps/2 outside the pocket side lies in the middle band
    mesh, polys = solved.mesh, solved.polygons
    spec = AlphaSpec(epsilon=1e-3)
    alpha = classify_alpha(mesh, polys, spec)
    pk = polys.pockets[0]
    probe = pk.to_global(np.array([[0.5 * (pk.base + pk.top), pk.b_max + 0.5e-3]]))[0]
    e = int(np.argmin(np.hypot(*(mesh.centroids - probe).T)))
    ab = pk.to_local(mesh.centroids[e : e + 1])[0]
    assert ab[1] > pk.b_max and ab[1] - pk.b_max < 1e-3
    assert alpha[e] == 10.0


def test_alpha_spec_validation():
    with pytest.raises(ValueError):
        AlphaSpec(inside=0.0)
    with pytest.raises(ValueError):
        AlphaSpec(epsilon=-1.0)
