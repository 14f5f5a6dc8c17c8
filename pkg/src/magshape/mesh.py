"""Motor cross-section mesh: data model, synthetic generator, ASCII I/O and validation."""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

MESH_HEADER = "magshape-mesh v1"
DIRICHLET_MARKER = "OuterDirichlet"


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid generator parameters."""


class Region(enum.IntEnum):
    IronFixed = 0
    DesignIron = 1
    DesignAir = 2
    Magnet = 3
    Air = 4
    AirGap = 5
    Coil = 6


IRON_REGIONS = (Region.IronFixed, Region.DesignIron)
DESIGN_REGIONS = (Region.DesignIron, Region.DesignAir)


@dataclass(frozen=True)
class MotorGeometryParams:
    """Parametric synthetic interior-permanent-magnet motor (all lengths in meters).

    Each pole holds a rectangular cavity centered on the pole axis.  Inside it
    sit, from the bottom up, a bar magnet, a thin iron strip and the design
    pocket; the rest of the cavity is air (flux barriers).  Radial positions
    are measured along the pole axis.
    """

    shaft_radius: float = 0.015
    rotor_outer_radius: float = 0.045
    gamma0_radius: float = 0.046
    stator_inner_radius: float = 0.047
    stator_outer_radius: float = 0.065
    pole_pairs: int = 4
    n_design_pockets: int = 8
    magnet_base: float = 0.031
    magnet_thickness: float = 0.005
    magnet_width: float = 0.021
    barrier_width: float = 0.002
    pocket_offset: float = 0.0005
    pocket_top: float = 0.0427
    n_slots: int = 24
    slot_half_angle_deg: float = 4.0
    slot_offset: float = 0.0015
    slot_depth: float = 0.010
    h: float = 2e-3
    design_refinement: float = 3.0

    @property
    def gap_width(self) -> float:
        return self.stator_inner_radius - self.rotor_outer_radius

    @property
    def n_poles(self) -> int:
        return 2 * self.pole_pairs

    @property
    def magnet_top(self) -> float:
        return self.magnet_base + self.magnet_thickness

    @property
    def pocket_base(self) -> float:
        return self.magnet_top + self.pocket_offset

    @property
    def pocket_width(self) -> float:
        return self.magnet_width

    @property
    def cavity_half_width(self) -> float:
        return 0.5 * self.magnet_width + self.barrier_width

    @property
    def bridge_thickness(self) -> float:
        """Thinnest iron between a cavity corner and the rotor surface."""
        return self.rotor_outer_radius - math.hypot(self.pocket_top, self.cavity_half_width)

    def pole_angle(self, k: int) -> float:
        return (k + 0.5) * math.pi / self.pole_pairs

    def check(self) -> None:
        radii = [
            ("shaft_radius", self.shaft_radius),
            ("rotor_outer_radius", self.rotor_outer_radius),
            ("stator_inner_radius", self.stator_inner_radius),
            ("stator_outer_radius", self.stator_outer_radius),
        ]
        if radii[0][1] <= 0:
            raise MeshError("shaft_radius must be positive")
        for (na, a), (nb, b) in zip(radii, radii[1:]):
            if not b > a:
                raise MeshError(f"radii must increase strictly: {nb}={b} <= {na}={a}")
        if not self.rotor_outer_radius < self.gamma0_radius < self.stator_inner_radius:
            raise MeshError(
                f"gamma0_radius={self.gamma0_radius} must lie strictly inside the air gap "
                f"({self.rotor_outer_radius}, {self.stator_inner_radius})"
            )
        if self.pole_pairs < 1:
            raise MeshError("pole_pairs must be >= 1")
        if self.n_design_pockets != self.n_poles:
            raise MeshError("one design pocket per pole is required (n_design_pockets == 2*pole_pairs)")
        if self.h <= 0 or self.design_refinement < 1:
            raise MeshError("h must be positive and design_refinement >= 1")
        if min(self.magnet_thickness, self.magnet_width, self.barrier_width, self.pocket_offset) <= 0:
            raise MeshError("magnet, barrier and pocket dimensions must be positive")
        if self.magnet_base <= self.shaft_radius:
            raise MeshError("magnet cavity reaches into the shaft")
        if self.pocket_top <= self.pocket_base:
            raise MeshError("pocket_top must lie above the pocket base")
        if self.bridge_thickness <= 0:
            raise MeshError("magnet cavity does not fit inside the rotor (no iron bridge left)")
        if math.atan2(self.cavity_half_width, self.magnet_base) >= math.pi / self.n_poles:
            raise MeshError("magnet cavities of neighboring poles overlap")
        if self.n_slots > 0:
            c0 = self.stator_inner_radius + self.slot_offset
            if c0 + self.slot_depth >= self.stator_outer_radius:
                raise MeshError("coil slots do not fit inside the stator")
            if math.radians(self.slot_half_angle_deg) >= math.pi / self.n_slots:
                raise MeshError("coil slots overlap")


@dataclass(frozen=True)
class Pocket:
    """Rectangular reference design region in the pole-local frame (a: radial, b: tangential)."""

    index: int
    angle: float
    base: float
    top: float
    b_min: float
    b_max: float

    @property
    def e_r(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])

    @property
    def e_t(self) -> np.ndarray:
        return np.array([-math.sin(self.angle), math.cos(self.angle)])

    def to_local(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy @ self.e_r, xy @ self.e_t], axis=-1)

    def to_global(self, ab: np.ndarray) -> np.ndarray:
        ab = np.asarray(ab, dtype=float)
        return ab[..., :1] * self.e_r + ab[..., 1:2] * self.e_t

    @property
    def area(self) -> float:
        return (self.top - self.base) * (self.b_max - self.b_min)


@dataclass(frozen=True)
class ElementGeometry:
    """Per-triangle P1 basis gradients (M, 3, 2) and areas (M,)."""

    grads: np.ndarray
    areas: np.ndarray


def element_geometry(vertices: np.ndarray, triangles: np.ndarray) -> ElementGeometry:
    p = vertices[triangles]
    x, y = p[..., 0], p[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    grads = np.empty(triangles.shape + (2,))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / det
        grads[:, i, 1] = (x[:, k] - x[:, j]) / det
    return ElementGeometry(grads=grads, areas=0.5 * det)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with region labels.

    ``magnet_dirs`` holds the unit magnetization direction of every Magnet
    triangle and zeros elsewhere.  ``gamma0_edges`` lists the edges of the
    evaluation circle in the air gap.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    regions: np.ndarray
    magnet_dirs: np.ndarray
    boundary_edges: np.ndarray
    gamma0_edges: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "regions", np.ascontiguousarray(self.regions, dtype=np.int8))
        object.__setattr__(self, "magnet_dirs", np.ascontiguousarray(self.magnet_dirs, dtype=float))
        object.__setattr__(
            self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        )
        object.__setattr__(
            self, "gamma0_edges", np.ascontiguousarray(self.gamma0_edges, dtype=np.int64).reshape(-1, 2)
        )
        for name in ("vertices", "triangles", "regions", "magnet_dirs", "boundary_edges", "gamma0_edges"):
            getattr(self, name).setflags(write=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, n), getattr(other, n))
            for n in ("vertices", "triangles", "regions", "magnet_dirs", "boundary_edges", "gamma0_edges")
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_regions(self, regions: np.ndarray) -> "Mesh":
        return Mesh(self.vertices, self.triangles, regions, self.magnet_dirs, self.boundary_edges, self.gamma0_edges)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.triangles, self.regions, self.magnet_dirs, self.boundary_edges, self.gamma0_edges)

    @cached_property
    def geometry(self) -> ElementGeometry:
        return element_geometry(self.vertices, self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        return self.geometry.areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def iron(self) -> np.ndarray:
        return np.isin(self.regions, IRON_REGIONS)

    @cached_property
    def design(self) -> np.ndarray:
        return np.isin(self.regions, DESIGN_REGIONS)

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    @cached_property
    def gamma0_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.gamma0_edges.ravel()] = True
        return mask

    @cached_property
    def gamma0_radius(self) -> float:
        r = np.hypot(*self.vertices[self.gamma0_vertices].T)
        return float(r.mean())

    @cached_property
    def rotor_triangles(self) -> np.ndarray:
        """Triangles of D_rot: everything inside the gap except the air-gap layer."""
        r = np.hypot(self.centroids[:, 0], self.centroids[:, 1])
        return (r < self.gamma0_radius) & (self.regions != Region.AirGap)

    @cached_property
    def rotor_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.triangles[self.rotor_triangles].ravel()] = True
        return mask

    @cached_property
    def velocity_free(self) -> np.ndarray:
        """Vertices where a deformation field may be nonzero.

        Excludes the boundary of D_rot, Dirichlet vertices, Gamma0 and every
        magnet vertex.
        """
        outside = np.zeros(self.n_vertices, dtype=bool)
        outside[self.triangles[~self.rotor_triangles].ravel()] = True
        magnet = np.zeros(self.n_vertices, dtype=bool)
        magnet[self.triangles[self.regions == Region.Magnet].ravel()] = True
        return self.rotor_mask & ~outside & ~self.dirichlet_mask & ~self.gamma0_vertices & ~magnet

    @cached_property
    def pockets(self) -> list[Pocket]:
        design_idx = np.flatnonzero(self.design)
        if design_idx.size == 0:
            return []
        labels = _triangle_components(self.triangles[design_idx], self.n_vertices)
        pockets = []
        for lab in np.unique(labels):
            tris = design_idx[labels == lab]
            areas = self.signed_areas[tris]
            c = (self.centroids[tris] * areas[:, None]).sum(axis=0) / areas.sum()
            angle = math.atan2(c[1], c[0]) % (2 * math.pi)
            e_r = np.array([math.cos(angle), math.sin(angle)])
            e_t = np.array([-math.sin(angle), math.cos(angle)])
            pts = self.vertices[np.unique(self.triangles[tris])]
            a, b = pts @ e_r, pts @ e_t
            pockets.append(
                (angle, tris, Pocket(0, angle, float(a.min()), float(a.max()), float(b.min()), float(b.max())))
            )
        pockets.sort(key=lambda item: item[0])
        return [
            Pocket(k, p.angle, p.base, p.top, p.b_min, p.b_max) for k, (_, _, p) in enumerate(pockets)
        ]

    @cached_property
    def pocket_of_triangle(self) -> np.ndarray:
        """Pocket index of each design triangle, -1 elsewhere."""
        out = np.full(self.n_triangles, -1, dtype=np.int64)
        for pk in self.pockets:
            ab = pk.to_local(self.centroids)
            inside = (
                self.design
                & (ab[:, 0] > pk.base) & (ab[:, 0] < pk.top)
                & (ab[:, 1] > pk.b_min) & (ab[:, 1] < pk.b_max)
            )
            out[inside] = pk.index
        return out


def _triangle_components(triangles: np.ndarray, n_vertices: int) -> np.ndarray:
    """Connected components of a triangle set (sharing an edge)."""
    m = len(triangles)
    edges = np.sort(np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(m), 3)
    key = edges[:, 0] * n_vertices + edges[:, 1]
    order = np.argsort(key, kind="stable")
    key, owner = key[order], owner[order]
    same = key[1:] == key[:-1]
    a, b = owner[:-1][same], owner[1:][same]
    graph = sp.coo_matrix((np.ones(len(a)), (a, b)), shape=(m, m))
    _, labels = connected_components(graph, directed=False)
    return labels


# --------------------------------------------------------------------------- generation


class _PSLG:
    """Planar straight-line graph with coordinate de-duplication."""

    def __init__(self, tol: float = 1e-12) -> None:
        self.points: list[tuple[float, float]] = []
        self.segments: list[tuple[int, int]] = []
        self._index: dict[tuple[int, int], int] = {}
        self._seg: set[tuple[int, int]] = set()
        self.tol = tol

    def point(self, x: float, y: float) -> int:
        key = (round(x / self.tol), round(y / self.tol))
        idx = self._index.get(key)
        if idx is None:
            idx = len(self.points)
            self.points.append((x, y))
            self._index[key] = idx
        return idx

    def polyline(self, xy: Iterable[tuple[float, float]], closed: bool = False) -> list[int]:
        ids = [self.point(x, y) for x, y in xy]
        pairs = list(zip(ids, ids[1:]))
        if closed:
            pairs.append((ids[-1], ids[0]))
        for a, b in pairs:
            if a == b:
                continue
            key = (min(a, b), max(a, b))
            if key not in self._seg:
                self._seg.add(key)
                self.segments.append((a, b))
        return ids


def _nseg(length: float, size: float) -> int:
    return max(1, int(math.ceil(length / size - 1e-9)))


def _arc(r: float, t0: float, t1: float, size: float) -> list[tuple[float, float]]:
    n = _nseg(r * abs(t1 - t0), size)
    return [(r * math.cos(t), r * math.sin(t)) for t in np.linspace(t0, t1, n + 1)]


def _ray(t: float, r0: float, r1: float, size: float) -> list[tuple[float, float]]:
    n = _nseg(abs(r1 - r0), size)
    return [(r * math.cos(t), r * math.sin(t)) for r in np.linspace(r0, r1, n + 1)]


def _circle(r: float, n: int) -> list[tuple[float, float]]:
    return [(r * math.cos(t), r * math.sin(t)) for t in 2 * math.pi * np.arange(n) / n]


def _sector(pslg: _PSLG, r0: float, r1: float, t0: float, t1: float, size: float) -> None:
    pslg.polyline(_arc(r0, t0, t1, size))
    pslg.polyline(_arc(r1, t0, t1, size))
    pslg.polyline(_ray(t0, r0, r1, size))
    pslg.polyline(_ray(t1, r0, r1, size))


def _polar(r: float, t: float) -> tuple[float, float]:
    return (r * math.cos(t), r * math.sin(t))


def generate_motor_mesh(params: MotorGeometryParams | None = None) -> Mesh:
    """Mesh the synthetic 2p-pole motor cross-section.

    Every pole carries a bar magnet magnetized along the pole axis
    (alternating outward/inward) with the rectangular design pocket stacked
    above it; air flux barriers flank both.  The stator has closed coil
    slots.  Gamma0 is an edge-aligned polygonal circle.
    """
    import triangle  # deferred: only generation needs it

    prm = params or MotorGeometryParams()
    prm.check()
    h = prm.h
    h_gap = min(h, prm.gap_width / 2)
    h_cav = min(h, prm.magnet_thickness / 2, prm.barrier_width)
    h_des = h / prm.design_refinement
    n_gap = prm.n_poles * _nseg(2 * math.pi * prm.gamma0_radius / prm.n_poles, h_gap)

    pslg = _PSLG()
    regions: list[tuple[float, float, int, float]] = []  # x, y, attribute, max area

    def area_for(size: float) -> float:
        return 0.433 * size * size

    shaft = pslg.polyline(_circle(prm.shaft_radius, prm.n_poles * _nseg(2 * math.pi * prm.shaft_radius / prm.n_poles, h)), closed=True)
    outer = pslg.polyline(
        _circle(prm.stator_outer_radius, prm.n_poles * _nseg(2 * math.pi * prm.stator_outer_radius / prm.n_poles, h)),
        closed=True,
    )
    rotor_ring = pslg.polyline(_circle(prm.rotor_outer_radius, n_gap), closed=True)
    gamma0 = pslg.polyline(_circle(prm.gamma0_radius, n_gap), closed=True)
    stator_ring = pslg.polyline(_circle(prm.stator_inner_radius, n_gap), closed=True)
    del rotor_ring, stator_ring

    a0, a1, a2, a3 = prm.magnet_base, prm.magnet_top, prm.pocket_base, prm.pocket_top
    wm, wc = 0.5 * prm.magnet_width, prm.cavity_half_width
    # attribute codes: 1 rotor iron, 2 stator iron, 3 air gap, 4 barrier, 5 coil, 100+k magnet, 200+k pocket
    for k in range(prm.n_poles):
        tc = prm.pole_angle(k)
        pk = Pocket(k, tc, a2, a3, -wm, wm)

        def line(p0, p1, size, pk=pk):
            n = _nseg(math.hypot(p1[0] - p0[0], p1[1] - p0[1]), size)
            ab = np.stack([np.linspace(p0[0], p1[0], n + 1), np.linspace(p0[1], p1[1], n + 1)], axis=1)
            pslg.polyline([tuple(q) for q in pk.to_global(ab)])

        for a in (a0, a3):  # cavity bottom and top, split where the magnet/pocket sides meet them
            line((a, -wc), (a, -wm), h_cav)
            line((a, wm), (a, wc), h_cav)
        line((a0, -wm), (a0, wm), h_cav)
        line((a1, -wm), (a1, wm), h_cav)
        line((a2, -wm), (a2, wm), h_des)
        line((a3, -wm), (a3, wm), h_des)
        for b in (-wm, wm):
            line((a0, b), (a1, b), h_cav)
            line((a1, b), (a2, b), h_des)
            line((a2, b), (a3, b), h_des)
        for b in (-wc, wc):
            line((a0, b), (a3, b), h_cav)

        def seed(a, b, attr, size, pk=pk):
            regions.append((*pk.to_global(np.array([a, b])), attr, area_for(size)))

        seed(0.5 * (a0 + a1), 0.0, 100 + k, h_cav)
        seed(0.5 * (a1 + a2), 0.0, 1, h_des)
        seed(0.5 * (a2 + a3), 0.0, 200 + k, h_des)
        for b in (-0.5 * (wm + wc), 0.5 * (wm + wc)):
            seed(0.5 * (a0 + a3), b, 4, h_cav)
        # pole shoe between the cavity and the rotor surface
        seed(0.5 * (a3 + prm.rotor_outer_radius), 0.0, 1, min(h, 2 * h_des))

    regions.append((*_polar(0.5 * (prm.shaft_radius + a0), 0.0), 1, area_for(h)))
    regions.append((*_polar(0.5 * (prm.rotor_outer_radius + prm.gamma0_radius), 0.0), 3, area_for(h_gap)))
    regions.append((*_polar(0.5 * (prm.gamma0_radius + prm.stator_inner_radius), 0.0), 3, area_for(h_gap)))

    if prm.n_slots > 0:
        phi_s = math.radians(prm.slot_half_angle_deg)
        c0 = prm.stator_inner_radius + prm.slot_offset
        c1 = c0 + prm.slot_depth
        for j in range(prm.n_slots):
            ts = (j + 0.5) * 2 * math.pi / prm.n_slots
            _sector(pslg, c0, c1, ts - phi_s, ts + phi_s, h)
            regions.append((*_polar(0.5 * (c0 + c1), ts), 5, area_for(h)))
        r_yoke = 0.5 * (c1 + prm.stator_outer_radius)
    else:
        r_yoke = 0.5 * (prm.stator_inner_radius + prm.stator_outer_radius)
    regions.append((*_polar(r_yoke, 0.0), 2, area_for(h)))
    if prm.n_slots > 0:
        # stator bridge ring between gap and slots
        regions.append((*_polar(prm.stator_inner_radius + 0.5 * prm.slot_offset, 0.0), 2, area_for(h_gap)))

    tri_in = {
        "vertices": np.array(pslg.points, dtype=float),
        "segments": np.array(pslg.segments, dtype=np.int64),
        "holes": np.array([[0.0, 0.0]]),
        "regions": np.array(regions, dtype=float),
    }
    out = triangle.triangulate(tri_in, "pq28AaYYQ")
    verts = np.asarray(out["vertices"], dtype=float)
    tris = np.asarray(out["triangles"], dtype=np.int64)
    attr = np.asarray(out["triangle_attributes"]).ravel().round().astype(int)
    if np.any(attr == 0):
        raise MeshError("mesh generation left unlabeled triangles")

    # counterclockwise orientation
    geo = element_geometry(verts, tris)
    flip = geo.areas < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    reg = np.empty(len(tris), dtype=np.int8)
    mdirs = np.zeros((len(tris), 2))
    reg[attr == 1] = Region.IronFixed
    reg[attr == 2] = Region.IronFixed
    reg[attr == 3] = Region.AirGap
    reg[attr == 4] = Region.Air
    reg[attr == 5] = Region.Coil
    mag = (attr >= 100) & (attr < 200)
    reg[mag] = Region.Magnet
    k = attr[mag] - 100
    tc = (k + 0.5) * math.pi / prm.pole_pairs
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    mdirs[mag] = sign[:, None] * np.stack([np.cos(tc), np.sin(tc)], axis=1)
    reg[attr >= 200] = Region.DesignIron

    bnd = [(a, b) for a, b in zip(shaft, shaft[1:] + shaft[:1])]
    bnd += [(a, b) for a, b in zip(outer, outer[1:] + outer[:1])]
    g0 = [(a, b) for a, b in zip(gamma0, gamma0[1:] + gamma0[:1])]
    return Mesh(verts, tris, reg, mdirs, np.array(bnd), np.array(g0))


def generate_disc_mesh(radius: float = 1.0, n_boundary: int = 16, region: Region = Region.Coil) -> Mesh:
    """Quasi-uniform mesh of a disc with one region label and Dirichlet boundary (no Gamma0)."""
    import triangle

    if n_boundary < 3 or radius <= 0:
        raise MeshError("disc needs radius > 0 and at least 3 boundary points")
    pts = np.array(_circle(radius, n_boundary))
    seg = np.stack([np.arange(n_boundary), np.roll(np.arange(n_boundary), -1)], axis=1)
    h = 2 * math.pi * radius / n_boundary
    out = triangle.triangulate({"vertices": pts, "segments": seg}, f"pq30a{0.433 * h * h:.17g}YQ")
    verts = np.asarray(out["vertices"], dtype=float)
    tris = np.asarray(out["triangles"], dtype=np.int64)
    flip = element_geometry(verts, tris).areas < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    m = len(tris)
    return Mesh(verts, tris, np.full(m, int(region)), np.zeros((m, 2)), seg, np.zeros((0, 2), dtype=np.int64))


def refine_uniform(mesh: Mesh, boundary_radius: float | None = None) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    With ``boundary_radius`` the new Dirichlet-boundary vertices are
    projected radially onto that circle.
    """
    tri = mesh.triangles
    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.ravel()
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    m = len(tri)
    ab, bc, ca = (inv[k * m : (k + 1) * m] + nv for k in range(3))
    a, b, c = tri.T
    new_tri = np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([ab, b, bc], axis=1),
        np.stack([ca, bc, c], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])
    order = np.argsort(np.tile(np.arange(m), 4), kind="stable")  # children stay next to each other
    lookup = {tuple(e): k + nv for k, e in enumerate(uniq.tolist())}

    def split(pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mid = np.array([lookup[(min(p, q), max(p, q))] for p, q in pairs.tolist()], dtype=np.int64)
        return np.concatenate([np.stack([pairs[:, 0], mid], axis=1), np.stack([mid, pairs[:, 1]], axis=1)]), mid

    bnd, bmid = split(mesh.boundary_edges)
    g0, _ = split(mesh.gamma0_edges) if len(mesh.gamma0_edges) else (mesh.gamma0_edges, None)
    verts = np.concatenate([mesh.vertices, mids])
    if boundary_radius is not None and len(bmid):
        r = np.hypot(*verts[bmid].T)
        verts[bmid] *= (boundary_radius / r)[:, None]
    return Mesh(
        verts,
        new_tri[order],
        np.tile(mesh.regions, 4)[order],
        np.tile(mesh.magnet_dirs, (4, 1))[order],
        bnd,
        g0,
    )


# --------------------------------------------------------------------------- I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def save_mesh(mesh: Mesh, stream: IO[str] | str | Path) -> None:
    if isinstance(stream, (str, Path)):
        with open(stream, "w", encoding="ascii", newline="\n") as fh:
            save_mesh(mesh, fh)
        return
    w = stream.write
    w(MESH_HEADER + "\n")
    w(f"vertices {mesh.n_vertices}\n")
    for x, y in mesh.vertices:
        w(f"{_fmt(x)} {_fmt(y)}\n")
    w(f"triangles {mesh.n_triangles}\n")
    for (i, j, k), r, d in zip(mesh.triangles, mesh.regions, mesh.magnet_dirs):
        name = Region(int(r)).name
        if r == Region.Magnet:
            w(f"{i} {j} {k} {name} {_fmt(d[0])} {_fmt(d[1])}\n")
        else:
            w(f"{i} {j} {k} {name}\n")
    w(f"boundary {len(mesh.boundary_edges)}\n")
    for i, j in mesh.boundary_edges:
        w(f"{i} {j} {DIRICHLET_MARKER}\n")
    w(f"gamma0 {len(mesh.gamma0_edges)}\n")
    for i, j in mesh.gamma0_edges:
        w(f"{i} {j}\n")


def mesh_to_string(mesh: Mesh) -> str:
    buf = io.StringIO()
    save_mesh(mesh, buf)
    return buf.getvalue()


def load_mesh(stream: IO[str] | str | Path) -> Mesh:
    """Parse the ``magshape-mesh v1`` ASCII format.

    Errors carry the 1-based line number of the offending line.
    """
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="ascii") as fh:
            return load_mesh(fh)
    lines = stream.read().splitlines()
    pos = 0

    def fail(msg: str, lineno: int | None = None) -> MeshError:
        return MeshError(f"line {lineno if lineno is not None else pos}: {msg}")

    def next_line() -> tuple[int, list[str]]:
        nonlocal pos
        while pos < len(lines):
            pos += 1
            text = lines[pos - 1].strip()
            if text and not text.startswith("#"):
                return pos, text.split()
        raise fail("unexpected end of file", len(lines))

    def section(name: str) -> int:
        lineno, tok = next_line()
        if len(tok) != 2 or tok[0] != name:
            raise fail(f"expected '{name} <count>'", lineno)
        try:
            n = int(tok[1])
        except ValueError:
            raise fail(f"bad count {tok[1]!r}", lineno) from None
        if n < 0:
            raise fail("negative count", lineno)
        return n

    lineno, tok = next_line()
    if " ".join(tok) != MESH_HEADER:
        raise fail(f"missing header '{MESH_HEADER}'", lineno)

    nv = section("vertices")
    verts = np.empty((nv, 2))
    for v in range(nv):
        lineno, tok = next_line()
        if len(tok) != 2:
            raise fail("vertex line needs 'x y'", lineno)
        try:
            verts[v] = float(tok[0]), float(tok[1])
        except ValueError:
            raise fail("non-numeric vertex coordinate", lineno) from None

    def index(text: str, lineno: int) -> int:
        try:
            i = int(text)
        except ValueError:
            raise fail(f"bad vertex index {text!r}", lineno) from None
        if not 0 <= i < nv:
            raise fail(f"vertex index {i} out of range [0, {nv})", lineno)
        return i

    nt = section("triangles")
    tris = np.empty((nt, 3), dtype=np.int64)
    regs = np.empty(nt, dtype=np.int8)
    dirs = np.zeros((nt, 2))
    for t in range(nt):
        lineno, tok = next_line()
        if len(tok) < 4:
            raise fail("triangle line needs 'i j k region'", lineno)
        tris[t] = [index(s, lineno) for s in tok[:3]]
        try:
            reg = Region[tok[3]]
        except KeyError:
            raise fail(f"unknown region {tok[3]!r}", lineno) from None
        regs[t] = reg
        if reg == Region.Magnet:
            if len(tok) != 6:
                raise fail("Magnet needs a direction 'dx dy'", lineno)
            try:
                dirs[t] = float(tok[4]), float(tok[5])
            except ValueError:
                raise fail("non-numeric magnet direction", lineno) from None
        elif len(tok) != 4:
            raise fail("trailing tokens after region", lineno)

    nb = section("boundary")
    bnd = np.empty((nb, 2), dtype=np.int64)
    for b in range(nb):
        lineno, tok = next_line()
        if len(tok) != 3:
            raise fail("boundary line needs 'i j marker'", lineno)
        bnd[b] = index(tok[0], lineno), index(tok[1], lineno)
        if tok[2] != DIRICHLET_MARKER:
            raise fail(f"unknown boundary marker {tok[2]!r}", lineno)

    ng = section("gamma0")
    g0 = np.empty((ng, 2), dtype=np.int64)
    for g in range(ng):
        lineno, tok = next_line()
        if len(tok) != 2:
            raise fail("gamma0 line needs 'i j'", lineno)
        g0[g] = index(tok[0], lineno), index(tok[1], lineno)

    return Mesh(verts, tris, regs, dirs, bnd, g0)


# --------------------------------------------------------------------------- validation


@dataclass
class DiagnosticsReport:
    problems: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:  # truthy when something is wrong
        return bool(self.problems)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __str__(self) -> str:
        return "mesh valid" if self.ok else "\n".join(self.problems)


def _edge_owner_table(triangles: np.ndarray, n_vertices: int) -> dict[tuple[int, int], list[int]]:
    table: dict[tuple[int, int], list[int]] = {}
    for t, (i, j, k) in enumerate(triangles.tolist()):
        for a, b in ((i, j), (j, k), (k, i)):
            table.setdefault((min(a, b), max(a, b)), []).append(t)
    return table


def _gamma0_cycle(edges: np.ndarray) -> list[int] | None:
    """Vertex sequence of the Gamma0 cycle, or None when it is not one closed loop."""
    if len(edges) < 3:
        return None
    adj: dict[int, list[int]] = {}
    for a, b in edges.tolist():
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(n) != 2 for n in adj.values()):
        return None
    start = min(adj)
    seq, prev, cur = [start], None, start
    while True:
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        if nxt == start:
            break
        seq.append(nxt)
        prev, cur = cur, nxt
        if len(seq) > len(adj):
            return None
    return seq if len(seq) == len(adj) == len(edges) else None


def validate(mesh: Mesh) -> DiagnosticsReport:
    rep = DiagnosticsReport()
    nv = mesh.n_vertices
    if not np.all(np.isfinite(mesh.vertices)):
        rep.problems.append("non-finite vertex coordinates")
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= nv):
        rep.problems.append("triangle vertex index out of range")
        return rep

    areas = mesh.signed_areas
    for t in np.flatnonzero(~(areas > 0)):
        rep.problems.append(f"negative area at triangle {t}")

    valid_codes = {int(r) for r in Region}
    bad = [t for t, r in enumerate(mesh.regions.tolist()) if r not in valid_codes]
    for t in bad:
        rep.problems.append(f"unknown region label at triangle {t}")
    mag = mesh.regions == Region.Magnet
    norms = np.hypot(mesh.magnet_dirs[:, 0], mesh.magnet_dirs[:, 1])
    for t in np.flatnonzero(mag & (np.abs(norms - 1.0) > 1e-9)):
        rep.problems.append(f"magnet direction not a unit vector at triangle {t}")
    for t in np.flatnonzero(~mag & (norms != 0)):
        rep.problems.append(f"non-magnet triangle {t} carries a magnetization direction")

    owners = _edge_owner_table(mesh.triangles, nv)
    free_edges = {e for e, ts in owners.items() if len(ts) == 1}
    declared = {(min(a, b), max(a, b)) for a, b in mesh.boundary_edges.tolist()}
    for e in sorted(free_edges - declared):
        rep.problems.append(f"boundary edge {e} lacks marker {DIRICHLET_MARKER}")
    for e in sorted(declared - free_edges):
        rep.problems.append(f"edge {e} marked {DIRICHLET_MARKER} is not on the boundary")

    seq = _gamma0_cycle(mesh.gamma0_edges)
    if seq is None:
        rep.problems.append("gamma0 not closed")
    else:
        heads = mesh.gamma0_edges[:, 1].tolist()
        tails = mesh.gamma0_edges[:, 0].tolist()
        if sorted(heads) != sorted(tails) or len(set(tails)) != len(tails):
            rep.problems.append("gamma0 edges inconsistently oriented")
    air_like = {int(Region.Air), int(Region.AirGap)}
    for a, b in mesh.gamma0_edges.tolist():
        ts = owners.get((min(a, b), max(a, b)), [])
        if len(ts) != 2:
            rep.problems.append(f"gamma0 edge ({a}, {b}) shared by {len(ts)} triangles")
        elif any(int(mesh.regions[t]) not in air_like for t in ts):
            rep.problems.append(f"gamma0 edge ({a}, {b}) touches a non-air triangle")

    if mesh.design.any():
        for pk in mesh.pockets:
            tris = np.flatnonzero(mesh.pocket_of_triangle == pk.index)
            covered = float(areas[tris].sum())
            if abs(covered - pk.area) > 1e-9 * pk.area:
                rep.problems.append(
                    f"design pocket {pk.index} is not a filled rectangle (area {covered:.6g} vs {pk.area:.6g})"
                )
        stray = mesh.design & (mesh.pocket_of_triangle < 0)
        for t in np.flatnonzero(stray):
            rep.problems.append(f"design triangle {t} outside every reference pocket")
    return rep


# --------------------------------------------------------------------------- Gamma0


@dataclass(frozen=True)
class Gamma0Edge:
    i: int
    j: int
    length: float
    tangent: np.ndarray
    theta: float


@dataclass(frozen=True)
class Gamma0Trace:
    """Gamma0 edges ordered counterclockwise; (i, j) oriented along the tangent."""

    i: np.ndarray
    j: np.ndarray
    length: np.ndarray
    tangent: np.ndarray
    theta: np.ndarray
    theta_i: np.ndarray
    theta_j: np.ndarray

    def __len__(self) -> int:
        return len(self.i)

    def edges(self) -> list[Gamma0Edge]:
        return [
            Gamma0Edge(int(a), int(b), float(l), t.copy(), float(th))
            for a, b, l, t, th in zip(self.i, self.j, self.length, self.tangent, self.theta)
        ]


def gamma0_trace(mesh: Mesh) -> Gamma0Trace:
    seq = _gamma0_cycle(mesh.gamma0_edges)
    if seq is None:
        raise MeshError("gamma0 not closed")
    pts = mesh.vertices[seq]
    signed = 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    if signed < 0:
        seq = seq[::-1]
    i = np.array(seq)
    j = np.roll(i, -1)
    d = mesh.vertices[j] - mesh.vertices[i]
    length = np.hypot(d[:, 0], d[:, 1])
    tangent = d / length[:, None]
    mid = 0.5 * (mesh.vertices[i] + mesh.vertices[j])
    theta = np.arctan2(mid[:, 1], mid[:, 0]) % (2 * np.pi)
    th_i = np.arctan2(mesh.vertices[i, 1], mesh.vertices[i, 0])
    th_j = np.arctan2(mesh.vertices[j, 1], mesh.vertices[j, 0])
    dth = (th_j - th_i + np.pi) % (2 * np.pi) - np.pi
    th_i = theta - 0.5 * dth
    th_j = theta + 0.5 * dth
    start = int(np.argmin(theta))
    roll = lambda a: np.roll(a, -start, axis=0)  # noqa: E731
    return Gamma0Trace(roll(i), roll(j), roll(length), roll(tangent), roll(theta), roll(th_i), roll(th_j))
