"""Legacy ASCII VTK unstructured-grid output for ParaView and friends."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .mesh import Mesh

VTK_TRIANGLE = 5


def _name(key: str) -> str:
    if not key or any(c.isspace() for c in key):
        raise ValueError(f"invalid VTK field name {key!r}")
    return key


def _block(fh, fields: Mapping[str, np.ndarray], n: int) -> None:
    for key, arr in fields.items():
        a = np.asarray(arr)
        if a.shape[0] != n:
            raise ValueError(f"field {key!r} has {a.shape[0]} entries, expected {n}")
        if a.ndim == 1:
            kind = "int" if np.issubdtype(a.dtype, np.integer) else "double"
            fh.write(f"SCALARS {_name(key)} {kind} 1\nLOOKUP_TABLE default\n")
            fmt = "{:d}\n" if kind == "int" else "{!r}\n"
            fh.writelines(fmt.format(int(v) if kind == "int" else float(v)) for v in a)
        elif a.ndim == 2 and a.shape[1] == 2:
            fh.write(f"VECTORS {_name(key)} double\n")
            fh.writelines(f"{float(x)!r} {float(y)!r} 0.0\n" for x, y in a)
        else:
            raise ValueError(f"field {key!r} must be scalar or 2-vector per entry")


def write_vtk(
    path: str | Path,
    mesh: Mesh,
    point_data: Mapping[str, np.ndarray] | None = None,
    cell_data: Mapping[str, np.ndarray] | None = None,
    title: str = "magshape",
) -> Path:
    """Write the triangulation with nodal and elementwise fields (region labels are always included)."""
    path = Path(path)
    cells = {"regions": mesh.regions.astype(np.int64)}
    cells.update(cell_data or {})
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title[:255]}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        fh.writelines(f"{float(x)!r} {float(y)!r} 0.0\n" for x, y in mesh.vertices)
        m = mesh.n_triangles
        fh.write(f"CELLS {m} {4 * m}\n")
        fh.writelines(f"3 {a} {b} {c}\n" for a, b, c in mesh.triangles)
        fh.write(f"CELL_TYPES {m}\n")
        fh.write(f"{VTK_TRIANGLE}\n" * m)
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_vertices}\n")
            _block(fh, point_data, mesh.n_vertices)
        fh.write(f"CELL_DATA {m}\n")
        _block(fh, cells, m)
    return path
