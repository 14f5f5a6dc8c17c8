"""Volume form of the shape derivative, assembled as a nodal vector, and its finite-difference oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .material import ReluctivityCurve, region_beta
from .mesh import ElementGeometry, Mesh
from .objective import TargetProfile, eval_cost
from .state import SourceSpec, element_gradients, solve_state


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeGradient:
    """g such that dJ(V) = sum_i g_i . V_i for nodal V."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.values.setflags(write=False)


def shape_stress(
    mesh: Mesh,
    curve: ReluctivityCurve,
    u: np.ndarray,
    p: np.ndarray,
    src: SourceSpec,
    geometry: ElementGeometry | None = None,
) -> np.ndarray:
    """Per-element tensor S with dJ(V) = sum_e area_e S_e : DV_e (S_ij pairs with dV_i/dx_j)."""
    geo = mesh.geometry if geometry is None else geometry
    gu = element_gradients(np.asarray(u, dtype=float), mesh.triangles, geo.grads)
    gp = element_gradients(np.asarray(p, dtype=float), mesh.triangles, geo.grads)
    b, db = region_beta(curve, mesh.iron, np.einsum("ed,ed->e", gu, gu))
    mp = src.m_perp(mesh, curve.nu0)
    pbar = np.asarray(p, dtype=float)[mesh.triangles].mean(axis=1)
    up = np.einsum("ed,ed->e", gu, gp)
    # divergence part: energy, magnet and current terms
    iso = b * up - np.einsum("ed,ed->e", mp, gp) - src.j(mesh) * pbar
    s = iso[:, None, None] * np.eye(2)
    s += gp[:, :, None] * mp[:, None, :]
    s -= b[:, None, None] * (gp[:, :, None] * gu[:, None, :] + gu[:, :, None] * gp[:, None, :])
    s -= (2 * db * up)[:, None, None] * (gu[:, :, None] * gu[:, None, :])
    return s


def assemble_shape_gradient(
    mesh: Mesh,
    curve: ReluctivityCurve,
    u: np.ndarray,
    p: np.ndarray,
    src: SourceSpec,
    mask: np.ndarray | None = None,
) -> ShapeGradient:
    """Nodal shape gradient; vertices outside ``mask`` (default: mesh.velocity_free) are zeroed."""
    n = mesh.n_vertices
    if np.shape(u) != (n,) or np.shape(p) != (n,):
        raise ValueError(f"u and p must have shape ({n},)")
    geo = mesh.geometry
    s = shape_stress(mesh, curve, u, p, src)
    # dV/dx_j on element e from the basis field phi_k e_i is delta_i grad_j phi_k
    local = geo.areas[:, None, None] * np.einsum("eij,ekj->eki", s, geo.grads)
    g = np.zeros((n, 2))
    for d in range(2):
        g[:, d] = np.bincount(mesh.triangles.ravel(), weights=local[:, :, d].ravel(), minlength=n)
    free = mesh.velocity_free if mask is None else np.asarray(mask, dtype=bool)
    g[~free] = 0.0
    return ShapeGradient(g, free.copy())


def eval_dJ(g: ShapeGradient | np.ndarray, V: np.ndarray) -> float:
    vals = g.values if isinstance(g, ShapeGradient) else np.asarray(g)
    V = np.asarray(V, dtype=float)
    if V.shape != vals.shape:
        raise ValueError(f"V has shape {V.shape}, expected {vals.shape}")
    return float(np.sum(vals * V))


def perturbed_mesh(mesh: Mesh, V: np.ndarray, t: float) -> Mesh:
    """Mesh with vertices x + t V(x); rejects inverted triangles."""
    moved = mesh.with_vertices(mesh.vertices + t * np.asarray(V, dtype=float))
    bad = np.flatnonzero(moved.signed_areas <= 0)
    if bad.size:
        raise PerturbationError(
            f"perturbation t={t:g} inverts {bad.size} triangle(s) (first {bad[0]}); use a smaller t"
        )
    return moved


def cost_on(mesh: Mesh, curve: ReluctivityCurve, src: SourceSpec, target: TargetProfile, tol: float) -> float:
    st = solve_state(mesh, curve, src, tol=tol)
    return eval_cost(mesh, st.u, target)


def finite_difference_dJ(
    mesh: Mesh,
    curve: ReluctivityCurve,
    src: SourceSpec,
    target: TargetProfile,
    V: np.ndarray,
    t: float,
    tol: float = 1e-13,
) -> float:
    """Central difference (J(x + tV) - J(x - tV)) / 2t with full nonlinear re-solves."""
    V = np.asarray(V, dtype=float)
    if not np.any(V):
        return 0.0
    plus = perturbed_mesh(mesh, V, t)
    minus = perturbed_mesh(mesh, V, -t)
    return (cost_on(plus, curve, src, target, tol) - cost_on(minus, curve, src, target, tol)) / (2 * t)


def random_admissible_field(mesh: Mesh, rng: np.random.Generator, smooth: int = 3) -> np.ndarray:
    """Random nodal field on the free vertices, smoothed by neighbor averaging.

    Scaled so the largest elementwise |DV| is one, which keeps x + tV
    untangled for t up to about 0.1.
    """
    free = mesh.velocity_free
    V = rng.standard_normal((mesh.n_vertices, 2))
    V[~free] = 0.0
    tri = mesh.triangles
    deg = np.bincount(tri.ravel(), minlength=mesh.n_vertices) * 1.0
    for _ in range(smooth):
        acc = np.zeros_like(V)
        s = V[tri].sum(axis=1)
        for d in range(2):
            acc[:, d] = np.bincount(tri.ravel(), weights=np.repeat(s[:, d], 3), minlength=mesh.n_vertices)
        V = np.where(deg[:, None] > 0, acc / np.maximum(deg, 1)[:, None] / 3.0, 0.0)
        V[~free] = 0.0
    dv = np.einsum("eki,ekj->eij", V[tri], mesh.geometry.grads)
    scale = np.abs(dv).max()
    return V / scale if scale > 0 else V
