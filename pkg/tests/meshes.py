"""Small hand-built meshes shared by several test modules."""
import numpy as np

from magshape.mesh import Mesh, Region


def ring_mesh(n: int, r: float, dr: float = 5e-4, layers: int = 1) -> Mesh:
    """Concentric n-gons at r + k dr, |k| <= layers, stitched into an annulus.

    Gamma0 is the middle ring, the innermost and outermost rings carry the
    Dirichlet marker and every triangle is AirGap.
    """
    ang = 2 * np.pi * np.arange(n) / n
    radii = [r + k * dr for k in range(-layers, layers + 1)]
    verts = np.concatenate([np.stack([rr * np.cos(ang), rr * np.sin(ang)], axis=1) for rr in radii])
    tris = []
    for ring in range(len(radii) - 1):
        a0, b0 = ring * n, (ring + 1) * n
        for k in range(n):
            k1 = (k + 1) % n
            tris.append((a0 + k, b0 + k1, a0 + k1))
            tris.append((a0 + k, b0 + k, b0 + k1))
    idx = np.arange(n)
    inner = np.stack([idx, np.roll(idx, -1)], axis=1)
    outer = inner + 2 * layers * n
    g0 = inner + layers * n
    m = len(tris)
    return Mesh(verts, np.array(tris), np.full(m, int(Region.AirGap)), np.zeros((m, 2)), np.concatenate([inner, outer]), g0)
