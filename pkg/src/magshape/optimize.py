"""Outer shape-optimization loop with backtracking on the polygon step size."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .descent import AlphaSpec, DescentResult, solve_descent
from .design import DesignPolygons, PolygonError, classify_elements, init_polygons, move_polygons, sample_velocity
from .material import ReluctivityCurve, analytic_samples, build_curve, constant_curve, read_samples
from .mesh import Mesh, generate_motor_mesh
from .objective import TargetProfile, eval_cost, solve_adjoint
from .shapegrad import ShapeGradient, assemble_shape_gradient, eval_dJ
from .state import Factorization, SolverError, SourceSpec, StateSolution, solve_state

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "J", "grad_norm", "bVV", "switches", "tau", "newton_iters")


@dataclass
class Problem:
    mesh: Mesh
    curve: ReluctivityCurve
    src: SourceSpec
    target: TargetProfile
    alpha: AlphaSpec
    newton_tol: float = 1e-10
    max_newton: int = 50
    linear_tol: float = 1e-12


def curve_from_config(cfg: RunConfig) -> ReluctivityCurve:
    m = cfg.material
    if m.curve == "analytic":
        return build_curve(analytic_samples(m.n_samples, m.s_max, eps=m.eps, c=m.c))
    if m.curve == "vacuum":
        return constant_curve()
    return build_curve(read_samples(m.curve))


def build_problem(cfg: RunConfig, mesh: Mesh | None = None) -> Problem:
    a = cfg.alpha
    return Problem(
        mesh=mesh if mesh is not None else generate_motor_mesh(cfg.geometry),
        curve=curve_from_config(cfg),
        src=SourceSpec(cfg.current_density, cfg.source.remanence),
        target=TargetProfile(cfg.target.amplitude, cfg.target.harmonic),
        alpha=AlphaSpec(a.inside, a.near, a.far, a.epsilon or None),
        newton_tol=cfg.solver.newton_tol,
        max_newton=cfg.solver.max_newton,
        linear_tol=cfg.solver.linear_tol,
    )


@dataclass
class IterationRecord:
    iter: int
    J: float
    grad_norm: float
    bVV: float
    dJ: float
    switches: int
    tau: float
    newton_iters: int
    trials: int = 0
    state_solves: int = 0

    def row(self) -> list[str]:
        return [str(self.iter), repr(self.J), repr(self.grad_norm), repr(self.bVV), str(self.switches), repr(self.tau), str(self.newton_iters)]


@dataclass
class OptState:
    iteration: int
    polygons: DesignPolygons
    mesh: Mesh
    state: StateSolution
    J: float
    cost_history: list[float] = field(default_factory=list)
    records: list[IterationRecord] = field(default_factory=list)
    tau_init: float = 0.0
    tau_min: float = 0.0


@dataclass
class LineSearchResult:
    accepted: bool
    tau: float
    polygons: DesignPolygons | None = None
    mesh: Mesh | None = None
    state: StateSolution | None = None
    J: float = float("nan")
    switches: int = 0
    trials: int = 0
    state_solves: int = 0
    reason: str = ""


@dataclass
class OptResult:
    polygons: DesignPolygons
    mesh: Mesh
    state: StateSolution
    cost_history: list[float]
    records: list[IterationRecord]
    converged: bool
    reason: str
    initial_mesh: Mesh
    initial_state: StateSolution
    elapsed: float = 0.0


def _solve(problem: Problem, mesh: Mesh, u0: np.ndarray | None) -> StateSolution:
    """Warm-started Newton; retries from zero when the warm start fails."""
    kw = dict(tol=problem.newton_tol, max_newton=problem.max_newton, linear_tol=problem.linear_tol)
    if u0 is not None:
        try:
            return solve_state(mesh, problem.curve, problem.src, u0=u0, **kw)
        except SolverError:
            log.info("warm start failed; restarting Newton from zero")
    return solve_state(mesh, problem.curve, problem.src, **kw)


def line_search(
    problem: Problem,
    state: OptState,
    V: np.ndarray,
    tau_init: float,
    tau_min: float | None = None,
) -> LineSearchResult:
    """Backtracking: halve tau until J decreases; stop when a trial switches no element."""
    if tau_min is None:
        tau_min = 2.0**-20 * tau_init
    if tau_init <= 0:
        return LineSearchResult(False, 0.0, reason="tau_init is zero")
    vel = sample_velocity(state.mesh, state.polygons, V)
    tau = tau_init
    trials = solves = 0
    while tau >= tau_min:
        trials += 1
        try:
            polys = move_polygons(state.polygons, vel, tau)
        except PolygonError as exc:
            log.debug("tau=%g rejected: %s", tau, exc)
            tau *= 0.5
            continue
        mesh, switches = classify_elements(state.mesh, polys)
        if switches == 0:
            return LineSearchResult(False, tau, trials=trials, state_solves=solves, reason="no element switches")
        solves += 1
        try:
            st = _solve(problem, mesh, state.state.u)
        except SolverError as exc:
            log.info("tau=%g: state solve failed (%s); halving", tau, exc)
            tau *= 0.5
            continue
        J = eval_cost(mesh, st.u, problem.target)
        log.debug("tau=%g switches=%d J=%.6e (current %.6e)", tau, switches, J, state.J)
        if J < state.J:
            return LineSearchResult(True, tau, polys, mesh, st, J, switches, trials, solves)
        tau *= 0.5
    return LineSearchResult(False, tau, trials=trials, state_solves=solves, reason="tau below tau_min")


@dataclass
class GradientStep:
    p: np.ndarray
    g: ShapeGradient
    descent: DescentResult
    dJ: float


def gradient_step(problem: Problem, mesh: Mesh, st: StateSolution, polygons: DesignPolygons | None) -> GradientStep:
    fac = Factorization(st.jacobian.matrix) if st.jacobian is not None else None
    p = solve_adjoint(mesh, problem.curve, st.u, problem.target, factorization=fac)
    g = assemble_shape_gradient(mesh, problem.curve, st.u, p, problem.src)
    d = solve_descent(mesh, g, problem.alpha, polygons)
    return GradientStep(p, g, d, eval_dJ(g, d.V))


def _polygon_speed(mesh: Mesh, polygons: DesignPolygons, V: np.ndarray) -> float:
    """Largest |V| over the movable polygon points (what the step actually moves)."""
    vel = sample_velocity(mesh, polygons, V)
    return max(float(np.hypot(*v[polygons.movable(k)].T).max(initial=0.0)) for k, v in enumerate(vel))


def run_optimization(
    problem: Problem,
    polygons: DesignPolygons | None = None,
    max_iter: int = 60,
    tau_init_factor: float = 0.5,
    tau_min_factor: float = 2.0**-20,
    callback: Callable[[OptState, GradientStep], None] | None = None,
) -> OptResult:
    t0 = time.perf_counter()
    polys = polygons if polygons is not None else init_polygons(problem.mesh)
    mesh, _ = classify_elements(problem.mesh, polys)
    st = _solve(problem, mesh, None)
    J = eval_cost(mesh, st.u, problem.target)
    opt = OptState(0, polys, mesh, st, J, [J])
    initial_mesh, initial_state = mesh, st
    width = max(pk.b_max - pk.b_min for pk in polys.pockets)
    converged, reason = False, "max_iter reached"
    while opt.iteration < max_iter:
        step = gradient_step(problem, opt.mesh, opt.state, opt.polygons)
        vmax = _polygon_speed(opt.mesh, opt.polygons, step.descent.V)
        opt.tau_init = tau_init_factor * width / vmax if vmax > 0 else 0.0
        opt.tau_min = tau_min_factor * opt.tau_init
        if callback is not None:
            callback(opt, step)
        ls = line_search(problem, opt, step.descent.V, opt.tau_init, opt.tau_min)
        gnorm = float(np.linalg.norm(step.g.values))
        if not ls.accepted:
            converged, reason = True, ls.reason
            log.info("iteration %d: line search exhausted (%s)", opt.iteration + 1, ls.reason)
            break
        opt.iteration += 1
        opt.polygons, opt.mesh, opt.state, opt.J = ls.polygons, ls.mesh, ls.state, ls.J
        opt.cost_history.append(ls.J)
        opt.records.append(
            IterationRecord(
                opt.iteration, ls.J, gnorm, step.descent.bVV, step.dJ, ls.switches, ls.tau,
                ls.state.iterations, ls.trials, ls.state_solves,
            )
        )
        log.info("iteration %d: J = %.6e, switches = %d, tau = %.3e", opt.iteration, ls.J, ls.switches, ls.tau)
    return OptResult(
        opt.polygons, opt.mesh, opt.state, opt.cost_history, opt.records, converged, reason,
        initial_mesh, initial_state, time.perf_counter() - t0,
    )


def optimize(config: RunConfig, callback=None) -> OptResult:
    problem = build_problem(config)
    o = config.optimizer
    polys = init_polygons(problem.mesh, o.n_side_points, o.n_top_points)
    return run_optimization(problem, polys, o.max_iter, o.tau_init_factor, o.tau_min_factor, callback)


def write_history(path: str | Path, result: OptResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        w.writerow(["0", repr(result.cost_history[0]), "", "", "0", "", str(result.initial_state.iterations)])
        for rec in result.records:
            w.writerow(rec.row())
