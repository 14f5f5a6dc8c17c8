import io
import math

import numpy as np
import pytest
from scipy.interpolate import CubicHermiteSpline

from magshape.material import (
    IRON,
    NONFERROMAGNETIC,
    NU0,
    MaterialError,
    a_matrix,
    analytic_reluctivity,
    analytic_samples,
    beta,
    build_curve,
    certify_assumptions,
    constant_curve,
    dbeta_dzeta,
    read_samples,
)


@pytest.fixture(scope="module")
def curve():
    return build_curve(analytic_samples())


@pytest.fixture(scope="module")
def certificate(curve):
    return certify_assumptions(curve)


def spiked_curve():
    data = analytic_samples()
    data[30, 1] *= 3.0
    return build_curve(data, relax=False), float(data[30, 0])


def test_vacuum_reluctivity_value():
    assert math.isclose(NU0, 1e7 / (4 * math.pi), rel_tol=1e-15)
    assert math.isclose(beta(constant_curve(), NONFERROMAGNETIC, 2.5), 7.957747e5, rel_tol=1e-7)


def test_constant_samples_give_constant_curve():
    c = build_curve([(0.0, NU0), (1.0, NU0), (2.0, NU0)])
    s = np.linspace(0, 5, 51)
    assert np.all(c.nu(s) == NU0)
    assert np.all(c.dnu(s) == 0.0)


def test_constant_curve_certificate():
    rep = certify_assumptions(constant_curve())
    assert rep.passed, rep.to_text()
    assert rep.m == NU0 and rep.lam == NU0 and rep.Lam == NU0


def test_analytic_curve_reproduces_model(curve):
    data = analytic_samples()
    assert np.allclose(curve.nu(data[:, 0]), data[:, 1], rtol=1e-3)
    s = np.linspace(0, 2, 2001)
    # between knots the Hermite spline is an approximation; stays within a percent of the model
    assert np.allclose(curve.nu(s), analytic_reluctivity(s), rtol=1e-2)


def test_analytic_curve_certifies(certificate):
    assert certificate.passed, certificate.to_text()
    assert certificate.m > 0
    names = [c.name for c in certificate.checks]
    assert names == [
        "bounds", "strong_monotonicity", "lipschitz_nu0", "c1_continuity", "eigenvalue_bounds", "vector_monotonicity",
    ]


def test_spike_breaks_monotonicity():
    c, s_spike = spiked_curve()
    rep = certify_assumptions(c)
    assert not rep.passed
    mono = rep["strong_monotonicity"]
    assert not mono.passed
    worst = float(mono.detail.rsplit("=", 1)[1])
    assert abs(worst - s_spike) < 2 * (2.0 / 49)


def test_relaxation_repairs_spike():
    data = analytic_samples()
    data[30, 1] *= 3.0
    c = build_curve(data)
    assert certify_assumptions(c).passed
    # knots up to the spike are kept; only the field strength after it is lifted
    assert np.allclose(c.nu(data[:31, 0]), data[:31, 1], rtol=1e-12)
    assert np.all(np.diff(c.field_strength(data[:, 0])) > 0)


@pytest.mark.parametrize(
    "samples",
    [
        [(0.0, 100.0), (1.0, 2 * NU0)],
        [(0.0, 100.0), (1.0, -1.0)],
        [(0.0, 100.0), (0.0, 200.0)],
        [(0.0, 100.0)],
        [(-0.5, 100.0), (1.0, 200.0)],
    ],
)
def test_bad_samples_rejected(samples):
    with pytest.raises(MaterialError):
        build_curve(samples)


def test_beta_iron_values(curve):
    assert beta(curve, IRON, 0.0) == curve.nu(np.array([0.0]))[0]
    oracle = CubicHermiteSpline(curve.knots, curve.values, curve.slopes)
    assert math.isclose(beta(curve, IRON, 4.0), float(oracle(2.0)), rel_tol=1e-12)
    s = np.linspace(0.0, 2.0, 997)
    assert np.allclose(curve.nu(s), oracle(s), rtol=1e-12, atol=0)


def test_dbeta_nonferromagnetic_is_zero(curve):
    assert dbeta_dzeta(curve, NONFERROMAGNETIC, 3.0) == 0.0


def test_dbeta_finite_difference(curve):
    d = 1e-6
    for z in (0.3, 1.0, 2.5, 6.0):
        fd = (beta(curve, IRON, z + d) - beta(curve, IRON, z - d)) / (2 * d)
        assert math.isclose(dbeta_dzeta(curve, IRON, z), fd, rel_tol=1e-6), z


def test_dbeta_continuous_at_zero(curve):
    z = np.array([0.0, 1e-12, 1e-8, 1e-6])
    d = dbeta_dzeta(curve, IRON, z)
    assert np.all(np.isfinite(d))
    assert np.allclose(d, d[0], rtol=1e-3)
    h = 1e-4
    fd = (beta(curve, IRON, 2 * h) - beta(curve, IRON, 0.0)) / (2 * h)
    assert math.isclose(fd, dbeta_dzeta(curve, IRON, h), rel_tol=1e-3)


def test_a_matrix_vacuum(curve):
    assert np.array_equal(a_matrix(curve, NONFERROMAGNETIC, [0.3, -1.2]), NU0 * np.eye(2))


def test_a_matrix_eigenpairs(curve):
    for s in (0.2, 1.0, 1.7, 2.5):
        a = a_matrix(curve, IRON, [s, 0.0])
        nu, dnu = curve.nu(np.array([s]))[0], curve.dnu(np.array([s]))[0]
        assert np.allclose(a, np.diag([nu + dnu * s, nu]), rtol=1e-12, atol=0)


def test_a_matrix_eigenvalues_bounded(curve, certificate):
    rng = np.random.default_rng(1)
    g = rng.uniform(0, 3, size=(100, 2))
    eig = np.linalg.eigvalsh(a_matrix(curve, IRON, g))
    lam = min(certificate.lam, float(curve.differential(np.linspace(0, 3 * math.sqrt(2), 20001)).min()))
    assert eig.min() >= lam * (1 - 1e-10)
    assert eig.max() <= NU0 * (1 + 1e-10)
    assert certificate.lam > 0


def test_tail_stays_admissible(curve):
    s = np.linspace(2.0, 50.0, 5001)
    h = curve.field_strength(s)
    assert np.all(np.diff(h) > 0)
    assert np.all(curve.nu(s) <= NU0)
    assert np.all(curve.differential(s) <= NU0 * (1 + 1e-12))


def test_read_samples_with_comments():
    text = "# B nu\n0.0 100.0\n\n0.5 120.0  # knee\n1.0 300.0\n"
    data = read_samples(io.StringIO(text))
    assert data.shape == (3, 2)
    assert data[1, 1] == 120.0


@pytest.mark.parametrize("text, line", [("0 1\n0.5\n", 2), ("0 1\n1 x\n", 2), ("# c\n\n1 2 3\n", 3)])
def test_read_samples_errors(text, line):
    with pytest.raises(MaterialError, match=f"line {line}"):
        read_samples(io.StringIO(text))
