"""Numeric checks of the transported Lagrangian, the averaged adjoint and the state Lipschitz bound."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .material import ReluctivityCurve, region_beta
from .mesh import ElementGeometry, Mesh, Region
from .objective import TargetProfile, assemble_adjoint_rhs, eval_cost, solve_adjoint
from .shapegrad import PerturbationError, assemble_shape_gradient, eval_dJ, random_admissible_field
from .state import (
    DEFAULT_TOL,
    _pattern,
    Factorization,
    SourceSpec,
    StateSolution,
    apply_dirichlet,
    element_gradients,
    h1_norm,
    solve_state,
)

# --------------------------------------------------------------------------- transport kernels


def element_dv(mesh: Mesh, V: np.ndarray) -> np.ndarray:
    """Elementwise constant Jacobian DV, shape (M, 2, 2) with DV[e, i, j] = dV_i/dx_j."""
    return np.einsum("eki,ekj->eij", np.asarray(V, dtype=float)[mesh.triangles], mesh.geometry.grads)


@dataclass(frozen=True)
class TransportKernels:
    """Per-element kernels of T_t = id + tV on the reference mesh."""

    t: float
    DT: np.ndarray
    xi: np.ndarray
    M: np.ndarray

    @property
    def P(self) -> np.ndarray:
        return self.xi[:, None, None] * self.M

    @property
    def Q(self) -> np.ndarray:
        return self.xi[:, None, None] * np.einsum("eki,ekj->eij", self.M, self.M)

    def geometry(self, mesh: Mesh) -> ElementGeometry:
        """Basis gradients and areas of the transported elements expressed on the reference mesh."""
        if np.any(self.xi <= 0):
            raise PerturbationError(f"t={self.t:g} is inadmissible: det DT_t <= 0 on {int(np.sum(self.xi <= 0))} element(s)")
        geo = mesh.geometry
        return ElementGeometry(np.einsum("eij,ekj->eki", self.M, geo.grads), geo.areas * self.xi)


def transport_kernels(mesh: Mesh, V: np.ndarray, t: float) -> TransportKernels:
    dt = np.eye(2)[None] + t * element_dv(mesh, V)
    xi = np.linalg.det(dt)
    m = np.linalg.inv(dt).transpose(0, 2, 1)
    return TransportKernels(float(t), dt, xi, m)


def tangential_jacobian(mesh: Mesh, V: np.ndarray, t: float) -> np.ndarray:
    """Length ratio |DT_t tau| of every Gamma0 edge."""
    e = mesh.gamma0_edges
    x = mesh.vertices + t * np.asarray(V, dtype=float)
    d0 = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    d1 = x[e[:, 1]] - x[e[:, 0]]
    return np.hypot(*d1.T) / np.hypot(*d0.T)


@dataclass
class KernelCheck:
    xi0_error: float
    M0_error: float
    dxi_error: float
    dM_error: float
    dP_error: float
    dQ_error: float

    @property
    def max_error(self) -> float:
        return max(self.xi0_error, self.M0_error, self.dxi_error, self.dM_error, self.dP_error, self.dQ_error)


def check_kernels(mesh: Mesh, V: np.ndarray, h: float = 1e-6) -> KernelCheck:
    """Identities at t=0 and central-difference derivatives against their closed forms."""
    dv = element_dv(mesh, V)
    div = dv[:, 0, 0] + dv[:, 1, 1]
    dvt = dv.transpose(0, 2, 1)
    eye = np.eye(2)[None]
    k0 = transport_kernels(mesh, V, 0.0)
    kp, km = transport_kernels(mesh, V, h), transport_kernels(mesh, V, -h)

    def rel(fd, exact):
        scale = max(float(np.abs(exact).max()), 1e-300)
        return float(np.abs(fd - exact).max() / scale)

    return KernelCheck(
        xi0_error=float(np.abs(k0.xi - 1.0).max()),
        M0_error=float(np.abs(k0.M - eye).max()),
        dxi_error=rel((kp.xi - km.xi) / (2 * h), div),
        dM_error=rel((kp.M - km.M) / (2 * h), -dvt),
        dP_error=rel((kp.P - km.P) / (2 * h), div[:, None, None] * eye - dvt),
        dQ_error=rel((kp.Q - km.Q) / (2 * h), div[:, None, None] * eye - dv - dvt),
    )


# --------------------------------------------------------------------------- transported Lagrangian


def eval_transported_lagrangian(
    mesh: Mesh,
    curve: ReluctivityCurve,
    src: SourceSpec,
    target: TargetProfile,
    V: np.ndarray,
    t: float,
    phi: np.ndarray,
    psi: np.ndarray,
) -> float:
    """G(t, phi, psi): transported cost plus the transported weak residual paired with psi.

    V must vanish on Gamma0 and the magnets, so the cost term is the
    reference one (unit tangential Jacobian, fixed target).
    """
    k = transport_kernels(mesh, V, t)
    geo = k.geometry(mesh)
    phi = np.asarray(phi, dtype=float)
    psi = np.where(mesh.dirichlet_mask, 0.0, np.asarray(psi, dtype=float))
    gphi = element_gradients(phi, mesh.triangles, geo.grads)
    gpsi = element_gradients(psi, mesh.triangles, geo.grads)
    b, _ = region_beta(curve, mesh.iron, np.einsum("ed,ed->e", gphi, gphi))
    mp = src.m_perp(mesh, curve.nu0)
    psibar = psi[mesh.triangles].mean(axis=1)
    integrand = b * np.einsum("ed,ed->e", gphi, gpsi) - np.einsum("ed,ed->e", mp, gpsi) - src.j(mesh) * psibar
    return eval_cost(mesh, phi, target) + float(np.sum(geo.areas * integrand))


def lagrangian_dt0(
    mesh: Mesh,
    curve: ReluctivityCurve,
    src: SourceSpec,
    V: np.ndarray,
    u: np.ndarray,
    p: np.ndarray,
) -> float:
    """Closed-form d/dt G(t, u, p) at t = 0 through xi' = div V and M' = -DV^T."""
    geo = mesh.geometry
    dv = element_dv(mesh, V)
    div = dv[:, 0, 0] + dv[:, 1, 1]
    pterm = div[:, None, None] * np.eye(2)[None] - dv.transpose(0, 2, 1)  # P'(0)
    gu = element_gradients(np.asarray(u, dtype=float), mesh.triangles, geo.grads)
    gp = element_gradients(np.where(mesh.dirichlet_mask, 0.0, p), mesh.triangles, geo.grads)
    b, db = region_beta(curve, mesh.iron, np.einsum("ed,ed->e", gu, gu))
    dvt_gu = np.einsum("eji,ej->ei", dv, gu)
    # d/dt [beta(|M gu|^2) M gu . M gp xi]
    energy = (
        b * np.einsum("ed,ed->e", gu, gp) * div
        - b * (np.einsum("ed,ed->e", dvt_gu, gp) + np.einsum("ed,ed->e", gu, np.einsum("eji,ej->ei", dv, gp)))
        - 2 * db * np.einsum("ed,ed->e", gu, dvt_gu) * np.einsum("ed,ed->e", gu, gp)
    )
    mp = src.m_perp(mesh, curve.nu0)
    magnet = -np.einsum("ed,edk,ek->e", mp, pterm, gp)
    pbar = np.where(mesh.dirichlet_mask, 0.0, p)[mesh.triangles].mean(axis=1)
    current = -src.j(mesh) * pbar * div
    return float(np.sum(geo.areas * (energy + magnet + current)))


# --------------------------------------------------------------------------- perturbed state and averaged adjoint


def solve_perturbed_state(
    mesh: Mesh,
    curve: ReluctivityCurve,
    src: SourceSpec,
    V: np.ndarray,
    t: float,
    tol: float = DEFAULT_TOL,
    u0: np.ndarray | None = None,
) -> StateSolution:
    """u^t on the reference mesh: the state equation with transported kernels (same nodal values as x + tV)."""
    if t == 0 or not np.any(V):
        return solve_state(mesh, curve, src, tol=tol, u0=u0)
    geo = transport_kernels(mesh, V, t).geometry(mesh)
    return solve_state(mesh, curve, src, tol=tol, u0=u0, geometry=geo)


def gauss_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _knot_breakpoints(curve: ReluctivityCurve, g0: np.ndarray, d: np.ndarray, iron: np.ndarray) -> np.ndarray:
    """Per element, the sorted s in (0, 1) where |g0 + s d| crosses a spline knot, padded with 1."""
    knots = curve.knots[curve.knots > 0] if not curve.is_constant else np.zeros(0)
    m = len(g0)
    if knots.size == 0 or not iron.any():
        return np.ones((m, 0))
    a = np.einsum("ed,ed->e", d, d)[:, None]
    b = 2.0 * np.einsum("ed,ed->e", g0, d)[:, None]
    c = np.einsum("ed,ed->e", g0, g0)[:, None] - knots[None, :] ** 2
    disc = b * b - 4 * a * c
    ok = (a > 0) & (disc >= 0) & iron[:, None]
    sq = np.sqrt(np.where(ok, disc, 0.0))
    den = np.where(ok, 2 * a, 1.0)
    roots = np.concatenate([(-b - sq) / den, (-b + sq) / den], axis=1)
    valid = np.concatenate([ok, ok], axis=1) & (roots > 0) & (roots < 1)
    roots = np.sort(np.where(valid, roots, 1.0), axis=1)
    width = int(valid.sum(axis=1).max(initial=0))
    return roots[:, :width]


def averaged_coefficient(
    mesh: Mesh,
    curve: ReluctivityCurve,
    g0: np.ndarray,
    g1: np.ndarray,
    n_gauss: int = 5,
) -> np.ndarray:
    """int_0^1 A(g0 + s (g1 - g0)) ds per element, shape (M, 2, 2).

    The spline reluctivity is only C^1 in |B|, so [0, 1] is split at the
    knot crossings of every element and the Gauss rule is applied on each
    smooth piece.
    """
    d = g1 - g0
    bp = _knot_breakpoints(curve, g0, d, mesh.iron)
    m = len(g0)
    edges = np.concatenate([np.zeros((m, 1)), bp, np.ones((m, 1))], axis=1)
    x, w = gauss_unit(n_gauss)
    out = np.zeros((m, 2, 2))
    for j in range(edges.shape[1] - 1):
        lo, hi = edges[:, j], edges[:, j + 1]
        span = hi - lo
        if not np.any(span > 0):
            continue
        for xq, wq in zip(x, w):
            s = lo + span * xq
            g = g0 + s[:, None] * d
            b, db = region_beta(curve, mesh.iron, np.einsum("ed,ed->e", g, g))
            a = b[:, None, None] * np.eye(2) + 2 * db[:, None, None] * (g[:, :, None] * g[:, None, :])
            out += (wq * span)[:, None, None] * a
    return out


def solve_averaged_adjoint(
    mesh: Mesh,
    curve: ReluctivityCurve,
    target: TargetProfile,
    V: np.ndarray,
    t: float,
    u0: np.ndarray,
    ut: np.ndarray,
    n_gauss: int = 5,
) -> np.ndarray:
    """p^t from the s-averaged linearization between u^0 and u^t."""
    geo = transport_kernels(mesh, V, t).geometry(mesh)
    u0 = np.asarray(u0, dtype=float)
    ut = np.asarray(ut, dtype=float)
    g0 = element_gradients(u0, mesh.triangles, geo.grads)
    g1 = element_gradients(ut, mesh.triangles, geo.grads)
    a = averaged_coefficient(mesh, curve, g0, g1, n_gauss)
    ag = np.einsum("eij,ekj->eki", a, geo.grads)
    local = geo.areas[:, None, None] * np.einsum("eki,eli->ekl", ag, geo.grads)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    # B_r is linear in u, so the s-average of the cost derivative is its midpoint value
    s_pts, s_w = gauss_unit(n_gauss)
    rhs = sum(w * assemble_adjoint_rhs(mesh, s * ut + (1.0 - s) * u0, target) for s, w in zip(s_pts, s_w))
    system = apply_dirichlet(_pattern(mesh).matrix(local), rhs, mesh.dirichlet_mask)
    p = Factorization(system.matrix).solve(system.rhs)
    p[mesh.dirichlet_mask] = 0.0
    return p


# --------------------------------------------------------------------------- Lipschitz probe


@dataclass
class LipschitzResult:
    numerator: float
    l1: float

    @property
    def defined(self) -> bool:
        return self.l1 > 0

    @property
    def ratio(self) -> float:
        return self.numerator / self.l1 if self.l1 > 0 else float("nan")


def _iron_label(regions: np.ndarray) -> np.ndarray:
    return np.isin(regions, (Region.IronFixed, Region.DesignIron))


def check_lipschitz_state(
    mesh: Mesh,
    curve: ReluctivityCurve,
    src: SourceSpec,
    regions1: np.ndarray,
    regions2: np.ndarray,
    tol: float = DEFAULT_TOL,
    state1: StateSolution | None = None,
) -> LipschitzResult:
    """||u(chi1) - u(chi2)||_H1 against the area where the iron indicators differ."""
    diff = _iron_label(np.asarray(regions1)) != _iron_label(np.asarray(regions2))
    l1 = float(np.sum(mesh.signed_areas[diff]))
    if l1 == 0:
        return LipschitzResult(0.0, 0.0)
    s1 = state1 or solve_state(mesh.with_regions(regions1), curve, src, tol=tol)
    s2 = solve_state(mesh.with_regions(regions2), curve, src, tol=tol, u0=s1.u)
    return LipschitzResult(h1_norm(mesh, s1.u - s2.u), l1)


def flip_design(regions: np.ndarray, idx: np.ndarray) -> np.ndarray:
    out = np.array(regions, copy=True)
    sel = out[idx]
    out[idx] = np.where(sel == Region.DesignIron, Region.DesignAir, Region.DesignIron)
    return out


def nested_flips(mesh: Mesh, rng: np.random.Generator, n: int) -> np.ndarray:
    """The n design elements closest to a random design element, nearest first."""
    design = np.flatnonzero(mesh.design)
    seed = design[rng.integers(design.size)]
    d = np.hypot(*(mesh.centroids[design] - mesh.centroids[seed]).T)
    return design[np.argsort(d, kind="stable")[:n]]


def l2_transport_error(mesh: Mesh, V: np.ndarray, t: float, fn: Callable[[np.ndarray], np.ndarray]) -> float:
    """||fn o T_t - fn||_L2 with edge-midpoint quadrature (V interpolated linearly)."""
    tri = mesh.triangles
    x, v = mesh.vertices[tri], np.asarray(V, dtype=float)[tri]
    total = 0.0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        xm = 0.5 * (x[:, a] + x[:, b])
        vm = 0.5 * (v[:, a] + v[:, b])
        total += np.sum(mesh.geometry.areas / 3.0 * (fn(xm + t * vm) - fn(xm)) ** 2)
    return float(math.sqrt(total))


# --------------------------------------------------------------------------- report


@dataclass
class CheckRow:
    name: str
    params: str
    value: float
    threshold: float
    passed: bool


@dataclass
class VerificationReport:
    rows: list[CheckRow] = field(default_factory=list)

    def add(self, name: str, params: str, value: float, threshold: float, passed: bool) -> CheckRow:
        row = CheckRow(name, params, float(value), float(threshold), bool(passed))
        self.rows.append(row)
        return row

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def __getitem__(self, name: str) -> CheckRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        w = max([len(r.name) for r in self.rows] + [5])
        wp = max([len(r.params) for r in self.rows] + [6])
        lines = [f"{'check':<{w}}  {'params':<{wp}}  {'value':>12}  {'threshold':>10}  result"]
        for r in self.rows:
            lines.append(
                f"{r.name:<{w}}  {r.params:<{wp}}  {r.value:12.4e}  {r.threshold:10.2e}  {'PASS' if r.passed else 'FAIL'}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["check", "params", "value", "threshold", "passed"])
        for r in self.rows:
            w.writerow([r.name, r.params, repr(r.value), repr(r.threshold), int(r.passed)])
        return out.getvalue()

    def write(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        txt, csvp = d / "verify_report.txt", d / "verify_report.csv"
        txt.write_text(self.to_text())
        csvp.write_text(self.to_csv())
        return [txt, csvp]


def _monotone_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def _trend_slope(k, values) -> float:
    """Least-squares slope of log(value) against log(k)."""
    return float(np.polyfit(np.log(k), np.log(values), 1)[0])


@dataclass
class VerifyInputs:
    mesh: Mesh
    curve: ReluctivityCurve
    src: SourceSpec
    target: TargetProfile
    tol: float = DEFAULT_TOL


def run_verification(
    inp: VerifyInputs,
    seed: int = 0,
    t_values=(1e-1, 1e-2, 1e-3, 1e-4),
    fd_t: float = 1e-6,
    flips=(1, 2, 4, 8, 16),
    n_single: int = 5,
) -> VerificationReport:
    """All verification checks on one design; each row records value, threshold and outcome."""
    rng = np.random.default_rng(seed)
    mesh, curve, src, target = inp.mesh, inp.curve, inp.src, inp.target
    rep = VerificationReport()
    st = solve_state(mesh, curve, src, tol=inp.tol)
    u = st.u
    J = eval_cost(mesh, u, target)
    p = solve_adjoint(mesh, curve, u, target)
    g = assemble_shape_gradient(mesh, curve, u, p, src)
    V = random_admissible_field(mesh, rng)

    kc = check_kernels(mesh, V)
    rep.add("kernel_identity_t0", "t=0", max(kc.xi0_error, kc.M0_error), 0.0, kc.xi0_error == 0 and kc.M0_error == 0)
    for name, val in (("dxi_dt", kc.dxi_error), ("dM_dt", kc.dM_error), ("dP_dt", kc.dP_error), ("dQ_dt", kc.dQ_error)):
        rep.add(f"kernel_{name}_fd", "h=1e-6", val, 1e-6, val <= 1e-6)
    xt = float(np.abs(tangential_jacobian(mesh, V, 0.1) - 1.0).max())
    rep.add("tangential_jacobian_gamma0", "t=0.1", xt, 0.0, xt == 0.0)

    g0 = eval_transported_lagrangian(mesh, curve, src, target, V, 0.0, u, p)
    rep.add("lagrangian_t0_equals_J", "psi=p", abs(g0 - J) / abs(J), 1e-12, abs(g0 - J) <= 1e-12 * abs(J))
    g_zero = [eval_transported_lagrangian(mesh, curve, src, target, np.zeros_like(V), t, u, p) for t in (0.0, 0.1)]
    rep.add("lagrangian_V0_t_independent", "t in {0,0.1}", abs(g_zero[1] - g_zero[0]), 0.0, g_zero[0] == g_zero[1])
    psi1, psi2 = rng.standard_normal((2, mesh.n_vertices))
    a = 0.3
    gm = eval_transported_lagrangian(mesh, curve, src, target, V, 0.05, u, a * psi1 + (1 - a) * psi2)
    ga = a * eval_transported_lagrangian(mesh, curve, src, target, V, 0.05, u, psi1) + (
        1 - a
    ) * eval_transported_lagrangian(mesh, curve, src, target, V, 0.05, u, psi2)
    aff = abs(gm - ga) / max(abs(gm), abs(ga), 1e-300)
    rep.add("lagrangian_affine_in_psi", "a=0.3,t=0.05", aff, 1e-10, aff <= 1e-10)

    dj = eval_dJ(g, V)
    gp = eval_transported_lagrangian(mesh, curve, src, target, V, fd_t, u, p)
    gmn = eval_transported_lagrangian(mesh, curve, src, target, V, -fd_t, u, p)
    fd = (gp - gmn) / (2 * fd_t)
    err = abs(fd - dj) / abs(dj)
    rep.add("dG_dt_fd_vs_dJ", f"t={fd_t:g}", err, 1e-5, err <= 1e-5)
    dt0 = lagrangian_dt0(mesh, curve, src, V, u, p)
    err = abs(dt0 - dj) / abs(dj)
    rep.add("dG_dt_closed_form_vs_dJ", "t=0", err, 1e-10, err <= 1e-10)

    # perturbed states and averaged adjoints
    ut0 = solve_perturbed_state(mesh, curve, src, V, 0.0, tol=inp.tol)
    rep.add("perturbed_state_t0_bitwise", "t=0", float(np.abs(ut0.u - u).max()), 0.0, np.array_equal(ut0.u, u))
    p0 = solve_averaged_adjoint(mesh, curve, target, V, 0.0, u, u)
    e0 = float(np.abs(p0 - p).max() / np.abs(p).max())
    rep.add("averaged_adjoint_t0_vs_adjoint", "t=0", e0, 1e-10, e0 <= 1e-10)
    du, dp, gauss_diff = [], [], []
    for t in t_values:
        ut = solve_perturbed_state(mesh, curve, src, V, t, tol=inp.tol, u0=u).u
        du.append(h1_norm(mesh, ut - u) / t)
        pt = solve_averaged_adjoint(mesh, curve, target, V, t, u, ut, n_gauss=5)
        pt10 = solve_averaged_adjoint(mesh, curve, target, V, t, u, ut, n_gauss=10)
        gauss_diff.append(h1_norm(mesh, pt - pt10) / h1_norm(mesh, pt10))
        dp.append(h1_norm(mesh, pt - p))
    ts = ",".join(f"{t:g}" for t in t_values)
    spread = max(du[1:]) / min(du[1:])
    rep.add("state_lipschitz_in_t", f"t in {{{ts[ts.index(',') + 1:]}}}", spread, 2.0, spread < 2.0)
    rep.add("averaged_adjoint_gauss5_vs_gauss10", f"t in {{{ts}}}", max(gauss_diff), 1e-8, max(gauss_diff) < 1e-8)
    rep.add(
        "averaged_adjoint_convergence",
        f"t in {{{ts}}}",
        dp[-1],
        0.0,
        _monotone_decreasing(dp),
    )

    fn = lambda x: np.sin(x[:, 0] / 0.01) * np.cos(x[:, 1] / 0.01)  # noqa: E731
    e1, e2 = l2_transport_error(mesh, V, 1e-3, fn), l2_transport_error(mesh, V, 1e-4, fn)
    order = math.log10(e1 / e2)
    rep.add("transport_l2_order", "t in {1e-3,1e-4}", order, 0.9, order >= 0.9)

    # Lipschitz probe in the design labels
    singles = []
    design = np.flatnonzero(mesh.design)
    for idx in rng.choice(design, size=n_single, replace=False):
        singles.append(check_lipschitz_state(mesh, curve, src, mesh.regions, flip_design(mesh.regions, [idx]), inp.tol, st).ratio)
    sp_ratio = max(singles) / min(singles)
    rep.add("lipschitz_single_flip_spread", f"n={n_single}", sp_ratio, 10.0, sp_ratio <= 10.0)
    order_idx = nested_flips(mesh, rng, max(flips))
    nested = [
        check_lipschitz_state(mesh, curve, src, mesh.regions, flip_design(mesh.regions, order_idx[:k]), inp.tol, st).ratio
        for k in flips
    ]
    slope = _trend_slope(flips, nested)
    rep.add("lipschitz_nested_trend", "k=" + ",".join(map(str, flips)), slope, 0.0, slope <= 0.0)
    same = check_lipschitz_state(mesh, curve, src, mesh.regions, mesh.regions, inp.tol, st)
    rep.add("lipschitz_identical_numerator", "chi1=chi2", same.numerator, 0.0, same.numerator == 0.0 and not same.defined)
    return rep
