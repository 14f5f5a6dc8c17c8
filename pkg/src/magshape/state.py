"""P1 finite elements and damped Newton for the nonlinear magnetostatic state equation."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .material import ReluctivityCurve, region_beta
from .mesh import ElementGeometry, Mesh, Region

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_NEWTON = 50
ARMIJO_C = 1e-4
MIN_STEP = 2.0**-30
LINEAR_RTOL = 1e-12


class SolverError(RuntimeError):
    """Linear or nonlinear solver failure; ``history`` holds residual norms so far."""

    def __init__(self, msg: str, history: list[float] | None = None, residual: float | None = None):
        super().__init__(msg)
        self.history = list(history or [])
        self.residual = residual


def n_threads() -> int:
    env = os.environ.get("MAGSHAPE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer MAGSHAPE_THREADS=%r", env)
    return 1


# --------------------------------------------------------------------------- sources


@dataclass(frozen=True)
class SourceSpec:
    """Current densities per region (A/m^2) and magnet remanence (T).

    Every Magnet triangle carries the magnetization ``remanence * d`` with the
    unit direction ``d`` stored on the mesh.
    """

    current_density: Mapping[int, float] = field(default_factory=dict)
    remanence: float = 1.0

    def j(self, mesh: Mesh) -> np.ndarray:
        out = np.zeros(mesh.n_triangles)
        for region, value in self.current_density.items():
            out[mesh.regions == int(region)] = value
        return out

    def magnetization(self, mesh: Mesh) -> np.ndarray:
        return self.remanence * mesh.magnet_dirs * (mesh.regions == Region.Magnet)[:, None]

    def m_perp(self, mesh: Mesh, nu0: float) -> np.ndarray:
        """Rotated magnetization nu0 (-M_y, M_x), in A/m, per triangle."""
        mag = self.magnetization(mesh)
        return nu0 * np.stack([-mag[:, 1], mag[:, 0]], axis=1)

    @property
    def is_zero(self) -> bool:
        return self.remanence == 0 and not any(self.current_density.values())


# --------------------------------------------------------------------------- assembly


class _Pattern:
    """CSR sparsity of the P1 stiffness matrix and the scatter map for element matrices."""

    def __init__(self, triangles: np.ndarray, n: int):
        rows = np.repeat(triangles, 3, axis=1).ravel()
        cols = np.tile(triangles, (1, 3)).ravel()
        key = rows * n + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        self.n = n
        self.scatter = inverse.ravel()
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)
        self.nnz = len(uniq)

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.scatter, weights=local.ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


_PATTERNS: dict[tuple[int, int, bytes], _Pattern] = {}


def _pattern(mesh: Mesh) -> _Pattern:
    tri = mesh.triangles
    key = (id(tri), mesh.n_vertices, tri[:4].tobytes())
    pat = _PATTERNS.get(key)
    if pat is None:
        if len(_PATTERNS) > 8:
            _PATTERNS.clear()
        pat = _Pattern(tri, mesh.n_vertices)
        _PATTERNS[key] = pat
    return pat


def _chunked(fn, m: int, *arrays):
    """Apply an elementwise kernel over chunks, possibly threaded; output order is fixed."""
    threads = n_threads()
    if threads == 1 or m < 20000:
        return fn(*arrays)
    bounds = np.linspace(0, m, threads + 1).astype(int)
    parts = [tuple(a[lo:hi] for a in arrays) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda args: fn(*args), parts))
    return np.concatenate(results, axis=0)


def element_gradients(u: np.ndarray, triangles: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Constant gradient of a P1 field on every triangle, shape (M, 2)."""
    return np.einsum("ek,ekd->ed", u[triangles], grads)


def _geometry(mesh: Mesh, geometry: ElementGeometry | None) -> ElementGeometry:
    return mesh.geometry if geometry is None else geometry


def _check_finite(u: np.ndarray) -> None:
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite values in field")


def assemble_residual(
    mesh: Mesh,
    curve: ReluctivityCurve,
    u: np.ndarray,
    src: SourceSpec,
    geometry: ElementGeometry | None = None,
) -> np.ndarray:
    """Weak-form residual with Dirichlet rows set to zero."""
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    geo = _geometry(mesh, geometry)
    g = element_gradients(u, mesh.triangles, geo.grads)
    b, _ = region_beta(curve, mesh.iron, np.einsum("ed,ed->e", g, g))
    flux = b[:, None] * g - src.m_perp(mesh, curve.nu0)
    local = geo.areas[:, None] * (np.einsum("ekd,ed->ek", geo.grads, flux) - src.j(mesh)[:, None] / 3.0)
    r = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    r[mesh.dirichlet_mask] = 0.0
    return r


def _jacobian_local(grads, areas, g, b, db):
    a = b[:, None, None] * np.eye(2) + 2 * db[:, None, None] * (g[:, :, None] * g[:, None, :])
    ag = np.einsum("eij,ekj->eki", a, grads)
    return areas[:, None, None] * np.einsum("eki,eli->ekl", ag, grads)


def assemble_jacobian(
    mesh: Mesh,
    curve: ReluctivityCurve,
    u: np.ndarray,
    geometry: ElementGeometry | None = None,
) -> sp.csr_matrix:
    """Newton matrix with entries int A(grad u) grad phi_j . grad phi_i (no Dirichlet elimination)."""
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    geo = _geometry(mesh, geometry)
    g = element_gradients(u, mesh.triangles, geo.grads)
    b, db = region_beta(curve, mesh.iron, np.einsum("ed,ed->e", g, g))
    local = _chunked(_jacobian_local, mesh.n_triangles, geo.grads, geo.areas, g, b, db)
    # exact symmetry: average with the transpose before scattering
    local = 0.5 * (local + local.transpose(0, 2, 1))
    return _pattern(mesh).matrix(local)


def stiffness_matrix(mesh: Mesh, coefficient: np.ndarray | float = 1.0) -> sp.csr_matrix:
    """P1 matrix of int c grad phi_j . grad phi_i with elementwise-constant c."""
    geo = mesh.geometry
    c = np.broadcast_to(np.asarray(coefficient, dtype=float), (mesh.n_triangles,))
    local = (c * geo.areas)[:, None, None] * np.einsum("ekd,eld->ekl", geo.grads, geo.grads)
    return _pattern(mesh).matrix(local)


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix."""
    local = np.broadcast_to((np.ones((3, 3)) + np.eye(3)) / 12.0, (mesh.n_triangles, 3, 3))
    return _pattern(mesh).matrix(local * mesh.geometry.areas[:, None, None])


# --------------------------------------------------------------------------- linear algebra


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray


def apply_dirichlet(matrix: sp.spmatrix, rhs: np.ndarray, mask: np.ndarray) -> SparseSystem:
    """Eliminate homogeneous Dirichlet rows and columns, keeping symmetry (unit diagonal)."""
    keep = (~mask).astype(float)
    d = sp.diags(keep)
    a = (d @ matrix @ d + sp.diags(mask.astype(float))).tocsr()
    a.sort_indices()
    b = np.where(mask, 0.0, rhs)
    return SparseSystem(a, b)


class Factorization:
    """Sparse LU of an SPD system with iterative refinement and a residual guarantee."""

    def __init__(self, matrix: sp.spmatrix, rtol: float = LINEAR_RTOL, max_refine: int = 5):
        self.matrix = sp.csc_matrix(matrix)
        self.rtol = rtol
        self.max_refine = max_refine
        try:
            self._lu = spla.splu(self.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        res = np.linalg.norm(b - self.matrix @ x) / nb
        for _ in range(self.max_refine):
            if res <= self.rtol:
                break
            x = x + self._lu.solve(b - self.matrix @ x)
            res = np.linalg.norm(b - self.matrix @ x) / nb
        if not np.isfinite(res) or res > self.rtol:
            raise SolverError(f"linear solve reached relative residual {res:.3e} > {self.rtol:.1e}", residual=res)
        return x


def solve_linear(system: SparseSystem, rtol: float = LINEAR_RTOL) -> np.ndarray:
    return Factorization(system.matrix, rtol=rtol).solve(system.rhs)


# --------------------------------------------------------------------------- Newton


@dataclass
class StateSolution:
    u: np.ndarray
    iterations: int
    history: list[float]
    jacobian: SparseSystem | None = None

    def __post_init__(self) -> None:
        self.u.setflags(write=False)


def solve_state(
    mesh: Mesh,
    curve: ReluctivityCurve,
    src: SourceSpec,
    tol: float = DEFAULT_TOL,
    max_newton: int = DEFAULT_MAX_NEWTON,
    u0: np.ndarray | None = None,
    geometry: ElementGeometry | None = None,
    linear_tol: float = LINEAR_RTOL,
) -> StateSolution:
    """Damped Newton iteration until ||r|| <= tol ||r(0)||.

    ``r(0)`` is the residual at u = 0 regardless of the initial guess, so the
    stopping test does not depend on ``u0``.  The returned solution carries the
    Jacobian at the final iterate (Dirichlet-eliminated) for adjoint reuse.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    mask = mesh.dirichlet_mask
    u = np.zeros(mesh.n_vertices) if u0 is None else np.array(u0, dtype=float)
    u[mask] = 0.0
    r0 = np.linalg.norm(assemble_residual(mesh, curve, np.zeros(mesh.n_vertices), src, geometry))
    target = tol * r0 if r0 > 0 else 1e-14
    r = assemble_residual(mesh, curve, u, src, geometry)
    rn = float(np.linalg.norm(r))
    history = [rn]
    it = 0
    while rn > target:
        if it >= max_newton:
            raise SolverError(f"Newton did not converge in {max_newton} iterations (|r| = {rn:.3e})", history, rn)
        system = apply_dirichlet(assemble_jacobian(mesh, curve, u, geometry), -r, mask)
        du = solve_linear(system, rtol=linear_tol)
        phi = 0.5 * rn * rn
        step = 1.0
        while True:
            trial = u + step * du
            r_trial = assemble_residual(mesh, curve, trial, src, geometry)
            rt = float(np.linalg.norm(r_trial))
            if 0.5 * rt * rt <= phi * (1.0 - 2.0 * ARMIJO_C * step):
                break
            step *= 0.5
            if step < MIN_STEP:
                raise SolverError(f"Newton line search failed at |r| = {rn:.3e}", history, rn)
        u, r, rn = trial, r_trial, rt
        history.append(rn)
        it += 1
        log.debug("newton %d: |r| = %.3e step = %g", it, rn, step)
    jac = apply_dirichlet(assemble_jacobian(mesh, curve, u, geometry), np.zeros(mesh.n_vertices), mask)
    return StateSolution(u=u, iterations=it, history=history, jacobian=jac)


def h1_seminorm(mesh: Mesh, u: np.ndarray) -> float:
    g = element_gradients(np.asarray(u, dtype=float), mesh.triangles, mesh.geometry.grads)
    return float(np.sqrt(np.sum(mesh.geometry.areas * np.einsum("ed,ed->e", g, g))))


def h1_norm(mesh: Mesh, u: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    l2 = float(u @ (mass_matrix(mesh) @ u))
    return float(np.sqrt(l2 + h1_seminorm(mesh, u) ** 2))


def flux_density(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """B = (du/dy, -du/dx) per triangle."""
    g = element_gradients(np.asarray(u, dtype=float), mesh.triangles, mesh.geometry.grads)
    return np.stack([g[:, 1], -g[:, 0]], axis=1)
