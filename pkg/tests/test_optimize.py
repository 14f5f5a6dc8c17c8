import csv
import dataclasses

import numpy as np

from magshape.config import RunConfig
from magshape.design import init_polygons
from magshape.mesh import gamma0_trace
from magshape.objective import eval_Br, eval_cost
from magshape.optimize import (
    HISTORY_COLUMNS,
    OptState,
    gradient_step,
    line_search,
    run_optimization,
    write_history,
)


class ProfileTarget:
    """B_d equal to a given piecewise-constant B_r profile."""

    def __init__(self, mesh, br):
        tr = gamma0_trace(mesh)
        self.lo, self.br = tr.theta_i, np.asarray(br)

    def __call__(self, theta):
        idx = np.searchsorted(self.lo, np.asarray(theta) % (2 * np.pi), side="right") - 1
        return self.br[idx % len(self.br)]


def initial_state(problem, solved):
    st = solved.state
    return OptState(0, solved.polygons, solved.mesh, st, eval_cost(solved.mesh, st.u, problem.target), [solved.J])


def test_self_target_converges_immediately(problem, solved):
    target = ProfileTarget(solved.mesh, eval_Br(solved.mesh, solved.state.u).br)
    self_problem = dataclasses.replace(problem, target=target)
    assert eval_cost(solved.mesh, solved.state.u, target) == 0.0
    res = run_optimization(self_problem, init_polygons(problem.mesh), max_iter=5)
    assert res.cost_history[0] < 1e-20
    assert res.converged and len(res.records) == 0


def test_zero_initial_step_stops(problem):
    res = run_optimization(problem, init_polygons(problem.mesh), max_iter=5, tau_init_factor=0.0)
    assert res.converged and res.records == [] and len(res.cost_history) == 1


def test_first_trial_acceptance_costs_one_solve(problem, solved, optimization_run):
    first = optimization_run.result.records[0]
    step = gradient_step(problem, solved.mesh, solved.state, solved.polygons)
    ls = line_search(problem, initial_state(problem, solved), step.descent.V, first.tau)
    assert ls.accepted and ls.tau == first.tau
    assert ls.trials == 1 and ls.state_solves == 1
    assert ls.J == first.J


def test_uphill_direction_is_exhausted(problem, solved):
    step = gradient_step(problem, solved.mesh, solved.state, solved.polygons)
    state = initial_state(problem, solved)
    vmax = np.abs(step.descent.V).max()
    w = max(pk.b_max - pk.b_min for pk in solved.polygons.pockets)
    ls = line_search(problem, state, -step.descent.V, 0.5 * w / vmax)
    assert not ls.accepted
    assert ls.polygons is None and state.polygons is solved.polygons


def test_no_switch_trial_skips_state_solve(problem, solved):
    step = gradient_step(problem, solved.mesh, solved.state, solved.polygons)
    ls = line_search(problem, initial_state(problem, solved), step.descent.V, 1e-15)
    assert not ls.accepted
    assert ls.reason == "no element switches" and ls.state_solves == 0 and ls.trials == 1


def test_default_run_decreases_monotonically(optimization_run):
    res = optimization_run.result
    j = res.cost_history
    assert len(res.records) >= 1
    assert all(b < a for a, b in zip(j, j[1:]))
    assert all(r.switches > 0 and r.tau > 0 for r in res.records)
    assert res.converged


def test_history_file(tmp_path, optimization_run):
    res = optimization_run.result
    path = tmp_path / "cost_history.csv"
    write_history(path, res)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == len(res.cost_history) + 1
    assert [float(r[1]) for r in rows[1:]] == res.cost_history


def test_config_controls_iteration_budget(problem):
    cfg = RunConfig()
    cfg = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, max_iter=1))
    res = run_optimization(problem, init_polygons(problem.mesh), cfg.optimizer.max_iter)
    assert len(res.records) == 1 and res.reason == "max_iter reached" and not res.converged
