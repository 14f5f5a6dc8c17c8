"""Shared fixtures: the default synthetic motor, its initial design and a tightly solved state."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from magshape.cli import main as cli_main
from magshape.config import RunConfig
from magshape.design import DesignPolygons, classify_elements, init_polygons
from magshape.mesh import Mesh
from magshape.objective import eval_cost, solve_adjoint
from magshape.optimize import Problem, build_problem, optimize
from magshape.shapegrad import ShapeGradient, assemble_shape_gradient
from magshape.state import StateSolution, solve_state
from magshape.verify import VerifyInputs, run_verification

FD_STATE_TOL = 1e-13


@dataclass
class Solved:
    problem: Problem
    polygons: DesignPolygons
    mesh: Mesh
    state: StateSolution
    J: float
    p: np.ndarray
    g: ShapeGradient


@pytest.fixture(scope="session")
def problem() -> Problem:
    return build_problem(RunConfig())


@pytest.fixture(scope="session")
def initial_design(problem):
    polys = init_polygons(problem.mesh)
    mesh, _ = classify_elements(problem.mesh, polys)
    return polys, mesh


@pytest.fixture(scope="session")
def solved(problem, initial_design) -> Solved:
    polys, mesh = initial_design
    st = solve_state(mesh, problem.curve, problem.src, tol=FD_STATE_TOL)
    p = solve_adjoint(mesh, problem.curve, st.u, problem.target)
    g = assemble_shape_gradient(mesh, problem.curve, st.u, p, problem.src)
    return Solved(problem, polys, mesh, st, eval_cost(mesh, st.u, problem.target), p, g)



@dataclass
class OptimizationRun:
    result: object
    steps: list
    elapsed: float


@pytest.fixture(scope="session")
def optimization_run() -> OptimizationRun:
    """The default optimization, with the descent data of every gradient step recorded."""
    steps = []

    def record(opt, step):
        steps.append((opt.iteration, opt.J, step.dJ, step.descent.bVV, opt.tau_init))

    t0 = time.perf_counter()
    res = optimize(RunConfig(), callback=record)
    return OptimizationRun(res, steps, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def verification(problem, initial_design):
    """Full verification report on the initial design and its runtime."""
    _, mesh = initial_design
    t0 = time.perf_counter()
    rep = run_verification(VerifyInputs(mesh, problem.curve, problem.src, problem.target))
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def default_config():
    return Path(__file__).resolve().parents[1] / "configs" / "default.cfg"


@pytest.fixture(scope="session")
def cli_optimize_runs(tmp_path_factory, default_config):
    """Two identical `optimize` CLI runs in separate directories."""
    outs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"optimize{k}")
        assert cli_main(["optimize", "--config", str(default_config), "--out", str(out), "--quiet"]) == 0
        outs.append(out)
    return outs


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line; returns the outcome for the caller to assert."""

    def record(n: int, text: str, ok: bool) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
