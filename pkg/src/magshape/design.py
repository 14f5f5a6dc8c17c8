"""Polygonal iron/air interfaces inside the design pockets."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .mesh import Mesh, Pocket, Region

SIDES = ("N", "E", "S", "W")


class PolygonError(ValueError):
    """Invalid polygon: self-intersecting, degenerate, or malformed snapshot."""


@dataclass(frozen=True, eq=False)
class DesignPolygons:
    """One closed point chain per pocket; the closing chord runs along the fixed base.

    Points run from the base-left corner up the W side, across the N side and
    down the E side to the base-right corner.  The two base corners carry the
    label S and never move.
    """

    points: tuple[np.ndarray, ...]
    sides: tuple[np.ndarray, ...]
    pockets: tuple[Pocket, ...]

    def __post_init__(self) -> None:
        for arr in self.points + self.sides:
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DesignPolygons):
            return NotImplemented
        return (
            len(self) == len(other)
            and all(np.array_equal(a, b) for a, b in zip(self.points, other.points))
            and all(np.array_equal(a, b) for a, b in zip(self.sides, other.sides))
        )

    __hash__ = None  # type: ignore[assignment]

    def movable(self, k: int) -> np.ndarray:
        return self.sides[k] != "S"

    def replace_points(self, points) -> "DesignPolygons":
        return DesignPolygons(tuple(np.array(p, dtype=float) for p in points), self.sides, self.pockets)

    def areas(self) -> np.ndarray:
        return np.array([polygon_area(p) for p in self.points])


def polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def init_polygons(mesh: Mesh, n_side_points: int = 71, n_top_points: int = 9) -> DesignPolygons:
    """Trace every pocket's reference rectangle with W/N/E point chains."""
    if n_side_points < 2 or n_top_points < 0:
        raise PolygonError("need at least two points per side and a non-negative top count")
    pockets = mesh.pockets
    if not pockets:
        raise PolygonError("mesh has no design pockets")
    pts_all, sides_all = [], []
    for pk in pockets:
        if not (pk.top > pk.base and pk.b_max > pk.b_min):
            raise PolygonError(f"pocket {pk.index} is degenerate")
        a_side = np.linspace(pk.base, pk.top, n_side_points)
        b_top = np.linspace(pk.b_min, pk.b_max, n_top_points + 2)[1:-1]
        west = np.stack([a_side, np.full(n_side_points, pk.b_min)], axis=1)
        north = np.stack([np.full(n_top_points, pk.top), b_top], axis=1)
        east = np.stack([a_side[::-1], np.full(n_side_points, pk.b_max)], axis=1)
        local = np.concatenate([west, north, east])
        sides = np.array(["W"] * n_side_points + ["N"] * n_top_points + ["E"] * n_side_points)
        sides[0] = sides[-1] = "S"
        pts_all.append(pk.to_global(local))
        sides_all.append(sides)
    return DesignPolygons(tuple(pts_all), tuple(sides_all), tuple(pockets))


# --------------------------------------------------------------------------- geometry kernels


def _segments(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return poly, np.roll(poly, -1, axis=0)


def segment_distance(x: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from every point to the closed polygon boundary."""
    a, b = _segments(poly)
    ab = b - a
    L2 = np.einsum("sd,sd->s", ab, ab)
    ax = x[:, None, :] - a[None, :, :]
    t = np.einsum("psd,sd->ps", ax, ab) / np.where(L2 > 0, L2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    d = ax - t[..., None] * ab[None]
    return np.sqrt(np.einsum("psd,psd->ps", d, d).min(axis=1))


def points_in_polygon(x: np.ndarray, poly: np.ndarray, on_edge_tol: float = 1e-12) -> np.ndarray:
    """Even-odd rule; points on the boundary (within tol times the polygon size) count as inside."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    if len(poly) < 3 or abs(polygon_area(poly)) == 0.0:
        return np.zeros(len(x), dtype=bool)
    a, b = _segments(poly)
    px, py = x[:, 0:1], x[:, 1:2]
    ay, by = a[None, :, 1], b[None, :, 1]
    crosses = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[None, :, 0] + (py - ay) * (b[None, :, 0] - a[None, :, 0]) / (by - ay)
    inside = (np.count_nonzero(crosses & (px < xint), axis=1) % 2) == 1
    scale = float(np.ptp(poly, axis=0).max())
    on_edge = segment_distance(x, poly) <= on_edge_tol * scale
    return inside | on_edge


def _orient(p, q, r) -> np.ndarray:
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])


SNAP_FRACTION = 1e-6


def _prune_collinear(poly: np.ndarray) -> np.ndarray:
    """Drop vertices whose neighbors are exactly collinear with them (repeat until none)."""
    pts = [tuple(p) for p in np.asarray(poly, dtype=float)]
    changed = True
    while changed and len(pts) >= 3:
        changed = False
        k = 0
        while k < len(pts) and len(pts) >= 3:
            (ax, ay), (bx, by), (cx, cy) = pts[k - 1], pts[k], pts[(k + 1) % len(pts)]
            if (bx - ax) * (cy - ay) - (by - ay) * (cx - ax) == 0:
                del pts[k]
                changed = True
            else:
                k += 1
    return np.array(pts).reshape(-1, 2)


def is_simple(poly: np.ndarray, allow_overlap: bool = False) -> bool:
    """True when the closed chain has no self-intersections (zero-length segments are ignored).

    With ``allow_overlap`` exactly collinear vertices are pruned first, so
    zero-area spikes (as produced by clamping several points onto one line)
    are tolerated; the remaining chain must then be strictly simple.
    """
    if allow_overlap:
        poly = _prune_collinear(poly)
    keep = np.any(poly != np.roll(poly, 1, axis=0), axis=1)
    if not keep.any():
        return False
    pts = poly[keep]
    n = len(pts)
    if n < 3:
        return False
    a, b = _segments(pts)
    i, j = np.triu_indices(n, k=1)
    adjacent = (j == i + 1) | ((i == 0) & (j == n - 1))
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]
    o1, o2 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    o3, o4 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    if np.any(proper & ~adjacent):
        return False

    def on_seg(p, q, r, o):  # r collinear with p-q and within its box
        return (o == 0) & (np.minimum(p[:, 0], q[:, 0]) <= r[:, 0]) & (r[:, 0] <= np.maximum(p[:, 0], q[:, 0])) & (
            np.minimum(p[:, 1], q[:, 1]) <= r[:, 1]
        ) & (r[:, 1] <= np.maximum(p[:, 1], q[:, 1]))

    touch = on_seg(p1, p2, q1, o1) | on_seg(p1, p2, q2, o2) | on_seg(q1, q2, p1, o3) | on_seg(q1, q2, p2, o4)
    if np.any(touch & ~adjacent):
        return False
    # adjacent segments may only share their common vertex: reject folding back
    ia = np.flatnonzero(adjacent)
    for k in ia:
        s, t = i[k], j[k]
        if t == s + 1:
            u, v, w = a[s], b[s], b[t]  # u -> v -> w
        else:
            u, v, w = a[t], b[t], b[s]  # last segment closes onto the first
        d1, d2 = v - u, w - v
        cross = d1[0] * d2[1] - d1[1] * d2[0]
        if cross == 0 and float(d1 @ d2) < 0:
            return False
    return True


# --------------------------------------------------------------------------- classification


def classify_elements(mesh: Mesh, polygons: DesignPolygons) -> tuple[Mesh, int]:
    """Relabel design triangles by centroid containment; returns the new mesh and the switch count."""
    regions = mesh.regions.copy()
    owner = mesh.pocket_of_triangle
    c = mesh.centroids
    for k, pts in enumerate(polygons.points):
        tris = np.flatnonzero(owner == polygons.pockets[k].index)
        if tris.size == 0:
            continue
        inside = points_in_polygon(c[tris], pts)
        regions[tris] = np.where(inside, Region.DesignIron, Region.DesignAir)
    switches = int(np.count_nonzero(regions != mesh.regions))
    if switches == 0:
        return mesh, 0
    return mesh.with_regions(regions), switches


# --------------------------------------------------------------------------- motion


class _Locator:
    """Barycentric point location among one pocket's design triangles."""

    def __init__(self, mesh: Mesh, tris: np.ndarray):
        self.tris = tris
        self.nodes = mesh.triangles[tris]
        p = mesh.vertices[self.nodes]
        self.p0 = p[:, 0]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.inv = np.stack([np.stack([e2[:, 1], -e2[:, 0]], 1), np.stack([-e1[:, 1], e1[:, 0]], 1)], 1) / det[:, None, None]
        self.centroids = p.mean(axis=1)

    def weights(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle nodes (P, 3) and barycentric weights (P, 3)."""
        rel = x[:, None, :] - self.p0[None]
        lam12 = np.einsum("tij,ptj->pti", self.inv, rel)
        lam = np.concatenate([1 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)
        worst = lam.min(axis=2)
        best = np.argmax(worst, axis=1)
        w = lam[np.arange(len(x)), best]
        # points a hair outside the pocket: clip to the nearest triangle's closure
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        return self.nodes[best], w


def sample_velocity(mesh: Mesh, polygons: DesignPolygons, V: np.ndarray) -> list[np.ndarray]:
    """P1 interpolation of the nodal field V at every polygon point."""
    owner = mesh.pocket_of_triangle
    out = []
    for k, pts in enumerate(polygons.points):
        loc = _Locator(mesh, np.flatnonzero(owner == polygons.pockets[k].index))
        nodes, w = loc.weights(pts)
        out.append(np.einsum("pk,pkd->pd", w, V[nodes]))
    return out


def move_polygons(
    polygons: DesignPolygons,
    V: np.ndarray | list[np.ndarray],
    tau: float,
    mesh: Mesh | None = None,
) -> DesignPolygons:
    """Move non-S points by tau * V, clamp into the reference pockets, and reject self-intersections.

    ``V`` is either a nodal field (then ``mesh`` is required) or a list of
    velocities already sampled at each polygon's points.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if tau == 0:
        return polygons
    if isinstance(V, np.ndarray):
        if mesh is None:
            raise ValueError("mesh required to sample a nodal field")
        vel = sample_velocity(mesh, polygons, V)
    else:
        vel = list(V)
    new = []
    for k, (pts, v, pk) in enumerate(zip(polygons.points, vel, polygons.pockets)):
        move = polygons.movable(k)
        q = pts.copy()
        q[move] = pts[move] + tau * v[move]
        ab = pk.to_local(q)
        ab[:, 0] = np.clip(ab[:, 0], pk.base, pk.top)
        ab[:, 1] = np.clip(ab[:, 1], pk.b_min, pk.b_max)
        # check in the local frame, where clamped coordinates are exact;
        # points within a tiny fraction of the pocket width of a bound (far
        # below mesh resolution) are snapped onto it so near-degenerate
        # folds along a bound collapse into prunable collinear spikes
        ab[~move] = pk.to_local(pts[~move])
        snap = SNAP_FRACTION * (pk.b_max - pk.b_min)
        for col, bounds in ((0, (pk.base, pk.top)), (1, (pk.b_min, pk.b_max))):
            for bound in bounds:
                ab[np.abs(ab[:, col] - bound) < snap, col] = bound
        if not is_simple(ab, allow_overlap=True):
            raise PolygonError(f"polygon {k} self-intersects at tau={tau:g}")
        q[move] = pk.to_global(ab[move])
        new.append(q)
    return polygons.replace_points(new)


# --------------------------------------------------------------------------- snapshots


def save_polygons(polygons: DesignPolygons, stream: IO[str] | str | Path) -> None:
    if isinstance(stream, (str, Path)):
        with open(stream, "w", encoding="ascii") as fh:
            save_polygons(polygons, fh)
            return
    for k, (pts, sides) in enumerate(zip(polygons.points, polygons.sides)):
        stream.write(f"# pocket {k} {len(pts)}\n")
        for (x, y), s in zip(pts, sides):
            stream.write(f"{float(x)!r} {float(y)!r} {s}\n")


def load_polygons(stream: IO[str] | str | Path, mesh: Mesh) -> DesignPolygons:
    """Read a snapshot written by save_polygons; pockets are taken from ``mesh``."""
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="ascii") as fh:
            return load_polygons(fh, mesh)
    chains: list[list[tuple[float, float, str]]] = []
    for lineno, line in enumerate(stream, 1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            if text.split()[1:2] == ["pocket"]:
                chains.append([])
            continue
        parts = text.split()
        if len(parts) != 3 or parts[2] not in SIDES or not chains:
            raise PolygonError(f"line {lineno}: expected 'x y side' inside a pocket block")
        try:
            chains[-1].append((float(parts[0]), float(parts[1]), parts[2]))
        except ValueError:
            raise PolygonError(f"line {lineno}: non-numeric coordinate") from None
    pockets = tuple(mesh.pockets)
    if len(chains) != len(pockets):
        raise PolygonError(f"snapshot has {len(chains)} pockets, mesh has {len(pockets)}")
    pts = tuple(np.array([(x, y) for x, y, _ in ch]) for ch in chains)
    sides = tuple(np.array([s for _, _, s in ch]) for ch in chains)
    return DesignPolygons(pts, sides, pockets)
