"""Tracking cost for the radial air-gap flux density and its adjoint."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .material import ReluctivityCurve
from .mesh import Gamma0Trace, Mesh, gamma0_trace
from .state import Factorization, SparseSystem, apply_dirichlet, assemble_jacobian

_GAUSS = np.array([-1.0, 1.0]) / math.sqrt(3.0)


@dataclass(frozen=True)
class TargetProfile:
    amplitude: float = 0.5
    harmonic: int = 4

    def __post_init__(self) -> None:
        if self.harmonic < 0 or int(self.harmonic) != self.harmonic:
            raise ValueError("harmonic must be a non-negative integer so the period divides 2*pi")

    def __call__(self, theta) -> np.ndarray:
        return self.amplitude * np.sin(self.harmonic * np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class Gamma0Profile:
    trace: Gamma0Trace
    br: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        return self.trace.theta

    @property
    def length(self) -> np.ndarray:
        return self.trace.length


_TRACES: dict[int, tuple[Mesh, Gamma0Trace]] = {}


def _trace(mesh: Mesh) -> Gamma0Trace:
    # the trace only depends on Gamma0 vertices, which never move
    key = id(mesh.gamma0_edges)
    hit = _TRACES.get(key)
    if hit is not None and hit[0].gamma0_edges is mesh.gamma0_edges:
        return hit[1]
    tr = gamma0_trace(mesh)
    if len(_TRACES) > 16:
        _TRACES.clear()
    _TRACES[key] = (mesh, tr)
    return tr


def eval_Br(mesh: Mesh, u: np.ndarray) -> Gamma0Profile:
    """Tangential derivative of the P1 trace on every Gamma0 edge."""
    tr = _trace(mesh)
    u = np.asarray(u, dtype=float)
    return Gamma0Profile(tr, (u[tr.j] - u[tr.i]) / tr.length)


def _quadrature(tr: Gamma0Trace) -> tuple[np.ndarray, np.ndarray]:
    """Gauss angles (E, 2) and weights (E, 2) on every edge, parametrized by angle."""
    mid = 0.5 * (tr.theta_i + tr.theta_j)
    half = 0.5 * (tr.theta_j - tr.theta_i)
    theta = mid[:, None] + half[:, None] * _GAUSS[None, :]
    weights = np.repeat(0.5 * tr.length[:, None], 2, axis=1)
    return theta, weights


def eval_cost(mesh: Mesh, u: np.ndarray, target: TargetProfile) -> float:
    prof = eval_Br(mesh, u)
    theta, w = _quadrature(prof.trace)
    return float(np.sum(w * (prof.br[:, None] - target(theta)) ** 2))


def assemble_adjoint_rhs(mesh: Mesh, u: np.ndarray, target: TargetProfile) -> np.ndarray:
    """Right side -dJ/du, supported on Gamma0 vertices only."""
    prof = eval_Br(mesh, u)
    tr = prof.trace
    theta, w = _quadrature(tr)
    mismatch = np.sum(w * (prof.br[:, None] - target(theta)), axis=1)
    c = -2.0 * mismatch / tr.length
    rhs = np.zeros(mesh.n_vertices)
    np.add.at(rhs, tr.j, c)
    np.add.at(rhs, tr.i, -c)
    rhs[mesh.dirichlet_mask] = 0.0
    return rhs


def adjoint_system(mesh: Mesh, curve: ReluctivityCurve, u: np.ndarray, target: TargetProfile) -> SparseSystem:
    return apply_dirichlet(assemble_jacobian(mesh, curve, u), assemble_adjoint_rhs(mesh, u, target), mesh.dirichlet_mask)


def solve_adjoint(
    mesh: Mesh,
    curve: ReluctivityCurve,
    u: np.ndarray,
    target: TargetProfile,
    factorization: Factorization | None = None,
) -> np.ndarray:
    """Solve A(grad u) p = -dJ/du with p = 0 on the outer boundary."""
    system = adjoint_system(mesh, curve, u, target)
    fac = factorization or Factorization(system.matrix)
    p = fac.solve(system.rhs)
    p[mesh.dirichlet_mask] = 0.0
    return p


# --------------------------------------------------------------------------- diagnostics


def fourier_coefficients(profile: Gamma0Profile, n_max: int) -> np.ndarray:
    """Exact sine/cosine amplitudes of the piecewise-constant B_r(theta), harmonics 0..n_max."""
    tr = profile.trace
    t0, t1 = tr.theta_i, tr.theta_j
    out = np.zeros(n_max + 1)
    for n in range(1, n_max + 1):
        a = np.sum(profile.br * (np.sin(n * t1) - np.sin(n * t0))) / (n * math.pi)
        b = np.sum(profile.br * (np.cos(n * t0) - np.cos(n * t1))) / (n * math.pi)
        out[n] = math.hypot(a, b)
    out[0] = abs(np.sum(profile.br * (t1 - t0))) / (2 * math.pi)
    return out


def harmonic_fraction(profile: Gamma0Profile, harmonic: int) -> float:
    """Share of the mean-square B_r carried by one harmonic (exact Parseval total)."""
    tr = profile.trace
    total = float(np.sum(profile.br**2 * (tr.theta_j - tr.theta_i))) / (2 * math.pi)
    if total == 0:
        return 0.0
    amp = fourier_coefficients(profile, harmonic)[harmonic]
    return float(0.5 * amp**2 / total)


def total_harmonic_distortion(profile: Gamma0Profile, fundamental: int = 4, n_harmonics: int = 25) -> float:
    """sqrt(sum of squared amplitudes at 2f, 3f, ...) over the amplitude at f."""
    c = fourier_coefficients(profile, fundamental * n_harmonics)
    fund = c[fundamental]
    if fund == 0:
        return float("inf")
    higher = c[2 * fundamental :: fundamental]
    return float(math.sqrt(np.sum(higher**2)) / fund)


def write_br_csv(path: str | Path, profile: Gamma0Profile, target: TargetProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "Br", "Bd"])
        for th, br in zip(profile.theta, profile.br):
            w.writerow([repr(float(th)), repr(float(br)), repr(float(target(th)))])
