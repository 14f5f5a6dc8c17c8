"""Smoothed descent direction from the penalized H^1 problem on the rotor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .shapegrad import ShapeGradient
from .state import Factorization, _pattern, stiffness_matrix


@dataclass(frozen=True)
class AlphaSpec:
    inside: float = 1.0
    near: float = 10.0
    far: float = 100.0
    epsilon: float | None = None  # meters; None means two design-element diameters

    def __post_init__(self) -> None:
        if min(self.inside, self.near, self.far) <= 0:
            raise ValueError("alpha values must be positive")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def resolve_epsilon(self, mesh: Mesh) -> float:
        if self.epsilon is not None:
            return self.epsilon
        tri = mesh.triangles[mesh.design] if mesh.design.any() else mesh.triangles
        p = mesh.vertices[tri]
        edges = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        return 2.0 * float(edges.max(axis=1).mean())


def classify_alpha(mesh: Mesh, polygons, alpha: AlphaSpec) -> np.ndarray:
    """Elementwise alpha: inside a design polygon, within epsilon of one, or elsewhere."""
    from .design import points_in_polygon, segment_distance

    eps = alpha.resolve_epsilon(mesh)
    c = mesh.centroids
    out = np.full(mesh.n_triangles, alpha.far)
    near = np.zeros(mesh.n_triangles, dtype=bool)
    inside = np.zeros(mesh.n_triangles, dtype=bool)
    for pts in polygons.points:
        # cheap bounding-box prefilter before exact distances
        box_lo, box_hi = pts.min(axis=0) - eps, pts.max(axis=0) + eps
        cand = np.flatnonzero(np.all((c >= box_lo) & (c <= box_hi), axis=1))
        if cand.size == 0:
            continue
        inside[cand] |= points_in_polygon(c[cand], pts)
        near[cand] |= segment_distance(c[cand], pts) <= eps
    out[near] = alpha.near
    out[inside] = alpha.inside
    return out


@dataclass
class DescentResult:
    V: np.ndarray
    bVV: float
    alpha: np.ndarray


def _bilinear_matrix(mesh: Mesh, alpha_e: np.ndarray) -> sp.csr_matrix:
    rot = mesh.rotor_triangles.astype(float)
    # restrict both terms to D_rot by zeroing element weights elsewhere
    k = stiffness_matrix(mesh, alpha_e * rot)
    m = _masked_mass(mesh, rot)
    return (k + m).tocsr()


def _masked_mass(mesh: Mesh, weight: np.ndarray) -> sp.csr_matrix:
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _pattern(mesh).matrix(local[None] * (mesh.geometry.areas * weight)[:, None, None])


def b_form(mesh: Mesh, alpha_e: np.ndarray, V: np.ndarray, W: np.ndarray | None = None) -> float:
    """b(V, W) = int_{D_rot} alpha DV:DW + V.W."""
    W = V if W is None else W
    a = _bilinear_matrix(mesh, alpha_e)
    return float(sum(V[:, d] @ (a @ W[:, d]) for d in range(2)))


def solve_descent(
    mesh: Mesh,
    g: ShapeGradient,
    alpha: AlphaSpec | np.ndarray,
    polygons=None,
) -> DescentResult:
    """Solve b(V, W) = -dJ(W) for all admissible W.

    ``alpha`` is either an AlphaSpec (classified against ``polygons``) or a
    precomputed elementwise array.
    """
    if isinstance(alpha, AlphaSpec):
        if polygons is None:
            alpha_e = np.full(mesh.n_triangles, alpha.far)
            alpha_e[mesh.design] = alpha.inside
        else:
            alpha_e = classify_alpha(mesh, polygons, alpha)
    else:
        alpha_e = np.asarray(alpha, dtype=float)
    free = np.flatnonzero(g.mask)
    V = np.zeros((mesh.n_vertices, 2))
    if free.size == 0 or not np.any(g.values[free]):
        return DescentResult(V, 0.0, alpha_e)
    a = _bilinear_matrix(mesh, alpha_e)
    a_ff = a[free][:, free]
    fac = Factorization(a_ff)
    for d in range(2):
        V[free, d] = fac.solve(-g.values[free, d])
    bvv = float(sum(V[free, d] @ (a_ff @ V[free, d]) for d in range(2)))
    return DescentResult(V, bvv, alpha_e)
