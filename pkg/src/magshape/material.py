"""Reluctivity of iron and air, and numeric certification of the monotonicity assumptions.

The iron curve nu(s), s = |B|, is a C^1 cubic Hermite spline on the
measured range [0, s_max] with nu'(0) = 0.  Beyond s_max the magnetic field
H(s) = nu(s) s is continued with a differential reluctivity that saturates
exponentially towards the vacuum value, which keeps every certified property.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

NU0 = 1e7 / (4 * math.pi)

IRON = "iron"
NONFERROMAGNETIC = "nonferromagnetic"
_KINDS = (IRON, NONFERROMAGNETIC)


class MaterialError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReluctivityCurve:
    knots: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    nu0: float = NU0
    m: float = 0.0
    saturation_rate: float = 1.0

    def __post_init__(self) -> None:
        for name in ("knots", "values", "slopes"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.knots[0] != 0.0:
            raise MaterialError("the first knot must be s = 0")
        if np.any(np.diff(self.knots) <= 0):
            raise MaterialError("knots must be strictly increasing")

    @property
    def s_max(self) -> float:
        return float(self.knots[-1])

    @property
    def is_constant(self) -> bool:
        return len(self.knots) == 1

    # ------------------------------------------------------------------ spline pieces

    def _coeffs(self, idx: np.ndarray):
        x0 = self.knots[idx]
        hh = self.knots[idx + 1] - x0
        y0, y1 = self.values[idx], self.values[idx + 1]
        d0, d1 = self.slopes[idx], self.slopes[idx + 1]
        delta = (y1 - y0) / hh
        c2 = (3 * delta - 2 * d0 - d1) / hh
        c3 = (d0 + d1 - 2 * delta) / hh**2
        return x0, y0, d0, c2, c3

    @property
    def _tail(self) -> tuple[float, float, float]:
        """H(s_max), H'(s_max) and rate k of the saturating continuation."""
        sm = self.s_max
        h_m = float(self.values[-1]) * sm
        dh_m = float(self.values[-1] + self.slopes[-1] * sm)
        k = self.saturation_rate / sm
        return h_m, dh_m, k

    def _eval(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return nu(s), nu'(s) and nu'(s)/s (finite limit at s = 0)."""
        s = np.asarray(s, dtype=float)
        if self.is_constant:
            nu = np.full(s.shape, float(self.values[0]))
            z = np.zeros(s.shape)
            return nu, z, z.copy()
        nu = np.empty(s.shape)
        dnu = np.empty(s.shape)
        dnu_s = np.empty(s.shape)
        inside = s <= self.s_max
        si = s[inside]
        idx = np.clip(np.searchsorted(self.knots, si, side="right") - 1, 0, len(self.knots) - 2)
        x0, y0, d0, c2, c3 = self._coeffs(idx)
        t = si - x0
        nu[inside] = y0 + t * (d0 + t * (c2 + t * c3))
        dn = d0 + t * (2 * c2 + 3 * c3 * t)
        dnu[inside] = dn
        first = idx == 0
        # on the first piece x0 = 0 and d0 = 0, so nu'/s = 2 c2 + 3 c3 s exactly
        q = np.empty(si.shape)
        q[first] = 2 * c2[first] + 3 * c3[first] * si[first]
        q[~first] = dn[~first] / si[~first]
        dnu_s[inside] = q

        so = s[~inside]
        if so.size:
            h_m, dh_m, k = self._tail
            sig = so - self.s_max
            e = np.exp(-k * sig)
            hval = h_m + self.nu0 * sig - (self.nu0 - dh_m) * (1 - e) / k
            dh = self.nu0 - (self.nu0 - dh_m) * e
            n_out = hval / so
            nu[~inside] = n_out
            dnu[~inside] = (dh - n_out) / so
            dnu_s[~inside] = (dh - n_out) / so**2
        return nu, dnu, dnu_s

    def nu(self, s) -> np.ndarray:
        return self._eval(s)[0]

    def dnu(self, s) -> np.ndarray:
        return self._eval(s)[1]

    def field_strength(self, s) -> np.ndarray:
        """H(s) = nu(s) s."""
        s = np.asarray(s, dtype=float)
        return self.nu(s) * s

    def differential(self, s) -> np.ndarray:
        """dH/ds = nu(s) + nu'(s) s."""
        nu, dnu, _ = self._eval(s)
        return nu + dnu * np.asarray(s, dtype=float)

    def beta_iron(self, zeta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """beta_1(zeta) = nu(sqrt(zeta)) and its zeta-derivative nu'(s)/(2 s)."""
        s = np.sqrt(zeta)
        nu, _, dnu_s = self._eval(s)
        return nu, 0.5 * dnu_s


def constant_curve(nu0: float = NU0) -> ReluctivityCurve:
    return ReluctivityCurve(np.array([0.0]), np.array([nu0]), np.array([0.0]), nu0=nu0, m=nu0)


def analytic_reluctivity(s, eps: float = 1.6e-4, c: float = 3.8e3, nu0: float = NU0) -> np.ndarray:
    """Smooth saturating test model nu(s) = nu0 (eps + (1 - eps) s^8 / (s^8 + c))."""
    s = np.asarray(s, dtype=float)
    s8 = s**8
    return nu0 * (eps + (1 - eps) * s8 / (s8 + c))


def analytic_samples(n: int = 50, s_max: float = 2.0, **kw) -> np.ndarray:
    s = np.linspace(0.0, s_max, n)
    return np.stack([s, analytic_reluctivity(s, **kw)], axis=1)


def _knot_slopes(s: np.ndarray, nu: np.ndarray) -> np.ndarray:
    d = PchipInterpolator(s, nu).derivative()(s)
    d[0] = 0.0
    return d


def _check_grid(s_max: float, n: int = 4001) -> np.ndarray:
    return np.linspace(0.0, s_max, n)


def _violations(curve: ReluctivityCurve, floor: float) -> np.ndarray:
    s = _check_grid(curve.s_max)
    nu = curve.nu(s)
    dh = curve.differential(s)
    tol = 1e-12 * curve.nu0
    bad = (nu < floor) | (nu > curve.nu0 + tol) | (dh < floor) | (dh > curve.nu0 + tol)
    return s[bad]


def build_curve(
    samples: Sequence[tuple[float, float]] | np.ndarray,
    nu0: float = NU0,
    relax: bool = True,
    max_relax: int = 20,
) -> ReluctivityCurve:
    """Fit a C^1 reluctivity spline through (s, nu) samples.

    A shape-preserving Hermite interpolant is tried first.  If the field
    strength s*nu(s) fails to be strongly monotone or nu0-Lipschitz on the
    check grid, the knot values are relaxed (the spline then approximates
    instead of interpolating) until it complies.  ``relax=False`` returns the
    raw interpolant unchecked, which lets a certifier inspect bad data.
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 2:
        raise MaterialError("need at least two (s, nu) samples")
    s, nu = data[:, 0].copy(), data[:, 1].copy()
    if np.any(np.diff(s) <= 0):
        raise MaterialError("sample abscissae must be strictly increasing")
    if s[0] < 0:
        raise MaterialError("negative flux density in samples")
    offending = [(float(a), float(b)) for a, b in zip(s, nu) if not 0 < b <= nu0]
    if offending:
        raise MaterialError(f"samples outside (0, nu0={nu0:.6g}]: {offending}")
    if s[0] > 0:
        s = np.concatenate([[0.0], s])
        nu = np.concatenate([[nu[0]], nu])

    if np.all(nu == nu[0]):
        return ReluctivityCurve(np.zeros(1), nu[:1], np.zeros(1), nu0=nu0, m=float(nu[0]))

    d = _knot_slopes(s, nu)
    if not relax:
        return ReluctivityCurve(s, nu, d, nu0=nu0, m=float(nu.min()))

    floor = 0.5 * float(nu.min())
    for it in range(max_relax):
        # keep H' within [floor, nu0] at the knots
        lo = np.full_like(d, -np.inf)
        hi = np.full_like(d, np.inf)
        lo[1:] = (floor - nu[1:]) / s[1:]
        hi[1:] = (nu0 - nu[1:]) / s[1:]
        d = np.clip(d, lo, hi)
        d[0] = 0.0
        curve = ReluctivityCurve(s, nu, d, nu0=nu0)
        bad = _violations(curve, floor)
        if bad.size == 0:
            grid = _check_grid(curve.s_max)
            m = float(min(curve.nu(grid).min(), curve.differential(grid).min()))
            return ReluctivityCurve(s, nu, d, nu0=nu0, m=m)
        # project secant slopes of H onto [lower, nu0] and move the knot values;
        # on offending intervals the lower bound grows each round because the
        # cubic in nu can still dip between knots
        lower = np.full(len(s), floor)
        hit = np.clip(np.searchsorted(s, bad, side="right"), 1, len(s) - 1)
        for off in (-1, 0, 1):
            lower[np.clip(hit + off, 1, len(s) - 1)] = min(floor * 2.0 ** (it + 1), 0.5 * nu0)
        hval = nu * s
        for i in range(1, len(s)):
            ds = s[i] - s[i - 1]
            hval[i] = hval[i - 1] + np.clip(hval[i] - hval[i - 1], lower[i] * ds, nu0 * ds)
        nu[1:] = np.minimum(hval[1:] / s[1:], nu0)
        d = _knot_slopes(s, nu)
    raise MaterialError("could not relax the samples into an admissible reluctivity curve")


def read_samples(stream: IO[str] | str | Path) -> np.ndarray:
    """Read ``s nu`` lines; ``#`` starts a comment."""
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="ascii") as fh:
            return read_samples(fh)
    rows = []
    for lineno, line in enumerate(stream, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != 2:
            raise MaterialError(f"line {lineno}: expected 's nu'")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise MaterialError(f"line {lineno}: non-numeric value") from None
    return np.array(rows, dtype=float).reshape(-1, 2)


# --------------------------------------------------------------------------- beta, A


def _kind(region_kind: str) -> str:
    if region_kind not in _KINDS:
        raise MaterialError(f"unknown region kind {region_kind!r}")
    return region_kind


def beta(curve: ReluctivityCurve, region_kind: str, zeta):
    z = np.asarray(zeta, dtype=float)
    if np.any(z < 0):
        raise MaterialError("beta is defined for zeta >= 0 only")
    if _kind(region_kind) == NONFERROMAGNETIC:
        out = np.full(z.shape, curve.nu0)
    else:
        out = curve.beta_iron(z)[0]
    return out if out.ndim else float(out)


def dbeta_dzeta(curve: ReluctivityCurve, region_kind: str, zeta):
    z = np.asarray(zeta, dtype=float)
    if np.any(z < 0):
        raise MaterialError("beta is defined for zeta >= 0 only")
    if _kind(region_kind) == NONFERROMAGNETIC:
        out = np.zeros(z.shape)
    else:
        out = curve.beta_iron(z)[1]
    return out if out.ndim else float(out)


def a_matrix(curve: ReluctivityCurve, region_kind: str, g) -> np.ndarray:
    """Linearized reluctivity beta I + 2 beta' g g^T for gradient(s) g of shape (..., 2)."""
    g = np.asarray(g, dtype=float)
    zeta = np.einsum("...i,...i->...", g, g)
    b = np.asarray(beta(curve, region_kind, zeta))
    db = np.asarray(dbeta_dzeta(curve, region_kind, zeta))
    eye = np.eye(2)
    return b[..., None, None] * eye + 2 * db[..., None, None] * (g[..., :, None] * g[..., None, :])


def region_beta(curve: ReluctivityCurve, iron: np.ndarray, zeta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise beta and d beta / d zeta for an iron mask."""
    b = np.full(zeta.shape, curve.nu0)
    db = np.zeros(zeta.shape)
    if np.any(iron):
        bi, dbi = curve.beta_iron(zeta[iron])
        b[iron] = bi
        db[iron] = dbi
    return b, db


# --------------------------------------------------------------------------- certification


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    detail: str = ""


@dataclass
class CertificateReport:
    checks: list[Check] = field(default_factory=list)
    m: float = float("nan")
    lam: float = float("nan")
    Lam: float = float("nan")
    nu0: float = NU0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [
            f"passed = {str(self.passed).lower()}",
            f"m = {self.m!r}",
            f"lambda = {self.lam!r}",
            f"Lambda = {self.Lam!r}",
            f"nu0 = {self.nu0!r}",
        ]
        for c in self.checks:
            lines.append(f"{c.name}.passed = {str(c.passed).lower()}")
            lines.append(f"{c.name}.value = {c.value!r}")
            if c.detail:
                lines.append(f"{c.name}.detail = {c.detail}")
        return "\n".join(lines) + "\n"


def certify_assumptions(
    curve: ReluctivityCurve,
    n_grid: int = 10_000,
    n_pairs: int = 10_000,
    seed: int = 0,
    extend: float = 1.5,
) -> CertificateReport:
    """Check bounds, monotonicity, Lipschitz, C^1 and eigenvalue conditions numerically.

    The scalar checks run on ``n_grid`` points of [0, extend * s_max] (the
    measured range plus part of the saturation tail); the vector monotonicity
    check draws ``n_pairs`` random gradient pairs.
    """
    nu0 = curve.nu0
    rel = 1e-10
    s_top = extend * max(curve.s_max, 1.0)
    s = np.linspace(0.0, s_top, n_grid)
    nu = curve.nu(s)
    dnu = curve.dnu(s)
    hval = nu * s
    dh = nu + dnu * s
    rep = CertificateReport(nu0=nu0)

    lo, hi = float(nu.min()), float(nu.max())
    rep.checks.append(
        Check("bounds", lo > 0 and hi <= nu0 * (1 + rel), lo, f"min nu = {lo:.6g}, max nu = {hi:.6g}, nu0 = {nu0:.6g}")
    )

    secant = np.diff(hval) / np.diff(s)
    # secants only guard against features the derivative grid could miss
    m_est = float(min(lo, dh.min()))
    worst = float(s[np.argmin(dh)])
    if secant.min() < m_est * (1 - 1e-9):
        m_est = float(secant.min())
        worst = float(s[np.argmin(secant)])
    rep.checks.append(
        Check("strong_monotonicity", m_est > 0, m_est, f"smallest slope of s*nu(s) at s = {worst:.6g}")
    )

    lip = float(max(secant.max(), dh.max()))
    where = float(s[np.argmax(dh)])
    rep.checks.append(
        Check("lipschitz_nu0", lip <= nu0 * (1 + rel), lip / nu0, f"max slope / nu0 at s = {where:.6g}")
    )

    # C^1 probe: one-sided limits at every knot and at the saturation joint
    jumps_v, jumps_d = [], []
    delta = 1e-9 * max(curve.s_max, 1.0)
    for k in curve.knots[1:]:
        left, right = np.array([k - delta]), np.array([k + delta])
        jumps_v.append(abs(curve.nu(right) - curve.nu(left))[0])
        jumps_d.append(abs(curve.dnu(right) - curve.dnu(left))[0])
    dscale = max(float(np.abs(dnu).max()), 1.0)
    jv = max(jumps_v, default=0.0) / nu0
    jd = max(jumps_d, default=0.0) / dscale
    d0 = float(abs(curve.dnu(np.array([0.0]))[0]))
    c1_ok = jv < 1e-6 and jd < 1e-4 and d0 == 0.0
    rep.checks.append(
        Check("c1_continuity", bool(c1_ok), float(max(jv, jd)), f"value jump {jv:.3g}, slope jump {jd:.3g}, nu'(0) = {d0:.3g}")
    )

    lam = float(min(nu.min(), dh.min()))
    Lam = float(max(nu.max(), dh.max()))
    rng = np.random.default_rng(seed)
    rho = rng.uniform(-s_top, s_top, size=(n_pairs, 2)) / math.sqrt(2)
    eig = np.linalg.eigvalsh(a_matrix(curve, IRON, rho))
    eig_ok = lam > 0 and eig.min() >= lam * (1 - 1e-8) and eig.max() <= Lam * (1 + 1e-8)
    rep.checks.append(
        Check("eigenvalue_bounds", bool(eig_ok), float(eig.min()), f"lambda = {lam:.6g}, Lambda = {Lam:.6g}")
    )

    p = rng.uniform(-s_top, s_top, size=(n_pairs, 2)) / math.sqrt(2)
    q = rng.uniform(-s_top, s_top, size=(n_pairs, 2)) / math.sqrt(2)
    bp = beta(curve, IRON, np.einsum("ij,ij->i", p, p))
    bq = beta(curve, IRON, np.einsum("ij,ij->i", q, q))
    lhs = np.einsum("ij,ij->i", bp[:, None] * p - bq[:, None] * q, p - q)
    rhs = np.einsum("ij,ij->i", p - q, p - q)
    ratio = lhs / rhs
    m_ref = m_est if m_est > 0 else lo
    vec_ok = bool(np.all(lhs >= m_ref * rhs * (1 - 1e-9)))
    rep.checks.append(
        Check("vector_monotonicity", vec_ok and m_est > 0, float(ratio.min()), f"min ratio over {n_pairs} pairs vs m = {m_ref:.6g}")
    )

    rep.m, rep.lam, rep.Lam = m_est, lam, Lam
    return rep
