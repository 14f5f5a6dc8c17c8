"""Command-line front end: ``magshape <subcommand> --config FILE [options]``."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import platform
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .design import PolygonError, classify_elements, init_polygons, load_polygons, save_polygons
from .material import MaterialError, certify_assumptions
from .mesh import MeshError, generate_motor_mesh, save_mesh, validate
from .objective import (
    eval_Br,
    eval_cost,
    harmonic_fraction,
    solve_adjoint,
    total_harmonic_distortion,
    write_br_csv,
)
from .optimize import build_problem, curve_from_config, gradient_step, run_optimization, write_history
from .shapegrad import PerturbationError, assemble_shape_gradient, eval_dJ, finite_difference_dJ, random_admissible_field
from .state import SolverError, flux_density, solve_state
from .verify import VerifyInputs, run_verification
from .vtkio import write_vtk

log = logging.getLogger("magshape")

GRAD_CHECK_TOL = 1e-5
FD_STATE_TOL = 1e-13
COMMANDS = {
    "generate-mesh": "build and validate the motor mesh and the initial design polygons",
    "certify-material": "check the reluctivity curve against the material assumptions",
    "solve": "solve the nonlinear state problem for the initial design",
    "adjoint": "solve state and adjoint and assemble the shape gradient",
    "grad-check": "compare the shape gradient with central finite differences",
    "optimize": "run the shape optimization",
    "verify": "run the transported-Lagrangian and averaged-adjoint checks",
    "report": "re-evaluate the initial and final designs of an optimize run",
}


class Run:
    """Output directory plus the artifact list recorded in manifest.json."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, argv: list[str]):
        self.command, self.cfg, self.out, self.argv = command, cfg, out, argv
        self.artifacts: list[str] = []
        self.t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    def finish(self, status: int) -> None:
        versions = {"magshape": __version__, "python": platform.python_version()}
        for pkg in ("numpy", "scipy", "triangle"):
            try:
                versions[pkg] = version(pkg)
            except PackageNotFoundError:
                versions[pkg] = "unknown"
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "versions": versions,
            "artifacts": sorted(set(self.artifacts)),
            "exit_status": status,
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "elapsed_s": round(time.perf_counter() - self.t0, 3),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _write_vector(path: Path, values: np.ndarray) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(f"{float(v)!r}\n" for v in values)


def _initial_design(cfg: RunConfig):
    problem = build_problem(cfg)
    o = cfg.optimizer
    polys = init_polygons(problem.mesh, o.n_side_points, o.n_top_points)
    mesh, _ = classify_elements(problem.mesh, polys)
    return problem, polys, mesh


def _solve(problem, mesh, tol=None):
    return solve_state(
        mesh, problem.curve, problem.src, tol=tol or problem.newton_tol,
        max_newton=problem.max_newton, linear_tol=problem.linear_tol,
    )


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# --------------------------------------------------------------------------- subcommands


def cmd_generate_mesh(args, run: Run) -> int:
    cfg = run.cfg
    mesh = generate_motor_mesh(cfg.geometry)
    diag = validate(mesh)
    if not diag.ok:
        raise MeshError(f"generated mesh is invalid:\n{diag}")
    o = cfg.optimizer
    polys = init_polygons(mesh, o.n_side_points, o.n_top_points)
    save_mesh(mesh, run.path("mesh.txt"))
    save_polygons(polys, run.path("polygons_initial.txt"))
    write_vtk(run.path("mesh.vtk"), mesh)
    _say(args, f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, {len(polys)} design pockets")
    return 0


def cmd_certify_material(args, run: Run) -> int:
    curve = curve_from_config(run.cfg)
    report = certify_assumptions(curve, seed=run.cfg.seed)
    run.write_text("certificate.txt", report.to_text())
    _say(args, report.to_text().rstrip())
    return 0 if report.passed else 1


def cmd_solve(args, run: Run) -> int:
    problem, _, mesh = _initial_design(run.cfg)
    st = _solve(problem, mesh)
    _write_vector(run.path("u.txt"), st.u)
    write_br_csv(run.path("br_profile.csv"), eval_Br(mesh, st.u), problem.target)
    with open(run.path("newton_history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "residual"])
        w.writerows([k, repr(r)] for k, r in enumerate(st.history))
    b = flux_density(mesh, st.u)
    write_vtk(run.path("state.vtk"), mesh, {"u": st.u}, {"B": b})
    J = eval_cost(mesh, st.u, problem.target)
    _say(args, f"state: {st.iterations} Newton iterations, |r| = {st.history[-1]:.3e}, J = {J:.6e}")
    return 0


def cmd_adjoint(args, run: Run) -> int:
    problem, _, mesh = _initial_design(run.cfg)
    st = _solve(problem, mesh)
    p = solve_adjoint(mesh, problem.curve, st.u, problem.target)
    g = assemble_shape_gradient(mesh, problem.curve, st.u, p, problem.src)
    _write_vector(run.path("p.txt"), p)
    write_vtk(run.path("adjoint.vtk"), mesh, {"u": st.u, "p": p, "shape_gradient": g.values})
    _say(args, f"adjoint: |p|_max = {np.abs(p).max():.3e}, |g| = {np.linalg.norm(g.values):.3e}")
    return 0


def cmd_grad_check(args, run: Run) -> int:
    problem, _, mesh = _initial_design(run.cfg)
    st = _solve(problem, mesh, tol=FD_STATE_TOL)
    p = solve_adjoint(mesh, problem.curve, st.u, problem.target)
    g = assemble_shape_gradient(mesh, problem.curve, st.u, p, problem.src)
    rng = np.random.default_rng(run.cfg.seed)
    rows = []
    for k in range(args.num_dirs):
        V = random_admissible_field(mesh, rng)
        dj = eval_dJ(g, V)
        fd = finite_difference_dJ(mesh, problem.curve, problem.src, problem.target, V, args.t, tol=FD_STATE_TOL)
        err = abs(dj - fd) / abs(fd) if fd != 0 else float("inf")
        rows.append((k, dj, fd, err))
        log.info("direction %d: dJ = %.10e, FD = %.10e, rel. err = %.3e", k, dj, fd, err)
    with open(run.path("grad_check.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["direction", "dJ", "fd", "rel_err"])
        w.writerows([k, repr(a), repr(b), repr(c)] for k, a, b, c in rows)
    worst = max(r[3] for r in rows) if rows else 0.0
    ok = worst <= GRAD_CHECK_TOL
    _say(args, f"grad-check: {len(rows)} directions, t = {args.t:g}, max rel. err = {worst:.3e} "
               f"({'PASS' if ok else 'FAIL'}, threshold {GRAD_CHECK_TOL:g})")
    return 0 if ok else 1


def cmd_optimize(args, run: Run) -> int:
    cfg = run.cfg
    problem = build_problem(cfg)
    o = cfg.optimizer
    polys = init_polygons(problem.mesh, o.n_side_points, o.n_top_points)
    save_polygons(polys, run.path("polygons_initial.txt"))

    def snapshot(opt, step):
        if opt.iteration > 0:
            save_polygons(opt.polygons, run.path(f"polygons_iter{opt.iteration:03d}.txt"))

    res = run_optimization(problem, polys, o.max_iter, o.tau_init_factor, o.tau_min_factor, callback=snapshot)
    write_history(run.path("cost_history.csv"), res)
    save_polygons(res.polygons, run.path("polygons_final.txt"))
    save_mesh(res.mesh, run.path("mesh_final.txt"))
    prof0, prof1 = eval_Br(res.initial_mesh, res.initial_state.u), eval_Br(res.mesh, res.state.u)
    write_br_csv(run.path("br_profile_initial.csv"), prof0, problem.target)
    write_br_csv(run.path("br_profile_final.csv"), prof1, problem.target)
    for tag, mesh, st, pol in (
        ("initial", res.initial_mesh, res.initial_state, polys),
        ("final", res.mesh, res.state, res.polygons),
    ):
        step = gradient_step(problem, mesh, st, pol)
        write_vtk(
            run.path(f"design_{tag}.vtk"),
            mesh,
            {"u": st.u, "shape_gradient": step.g.values, "descent_field": step.descent.V},
            {"B": flux_density(mesh, st.u), "alpha": step.descent.alpha},
        )
    J0, J1 = res.cost_history[0], res.cost_history[-1]
    h = problem.target.harmonic
    summary = (
        f"iterations = {len(res.records)}\nstop_reason = {res.reason}\n"
        f"J_initial = {J0!r}\nJ_final = {J1!r}\nreduction = {1 - J1 / J0!r}\n"
        f"harmonic_fraction_initial = {harmonic_fraction(prof0, h)!r}\n"
        f"harmonic_fraction_final = {harmonic_fraction(prof1, h)!r}\n"
    )
    run.write_text("summary.txt", summary)
    _say(args, f"optimize: {len(res.records)} iterations, J {J0:.6e} -> {J1:.6e} "
               f"({100 * (1 - J1 / J0):.1f}% reduction), stop: {res.reason}")
    return 0


def cmd_verify(args, run: Run) -> int:
    problem, _, mesh = _initial_design(run.cfg)
    rep = run_verification(VerifyInputs(mesh, problem.curve, problem.src, problem.target, problem.newton_tol), seed=run.cfg.seed)
    run.artifacts += ["verify_report.txt", "verify_report.csv"]
    rep.write(run.out)
    _say(args, rep.to_text().rstrip())
    return 0 if rep.passed else 1


def cmd_report(args, run: Run) -> int:
    problem = build_problem(run.cfg)
    lines = ["design  J  harmonic_fraction  thd"]
    values = {}
    for tag in ("initial", "final"):
        src = run.out / f"polygons_{tag}.txt"
        if not src.exists():
            raise FileNotFoundError(f"{src} not found; run `optimize` with the same --out first")
        mesh, _ = classify_elements(problem.mesh, load_polygons(src, problem.mesh))
        st = _solve(problem, mesh)
        prof = eval_Br(mesh, st.u)
        J = eval_cost(mesh, st.u, problem.target)
        values[tag] = J
        hf = harmonic_fraction(prof, problem.target.harmonic)
        thd = total_harmonic_distortion(prof, problem.target.harmonic)
        lines.append(f"{tag}  {J!r}  {hf!r}  {thd!r}")
    lines.append(f"reduction = {1 - values['final'] / values['initial']!r}")
    text = "\n".join(lines) + "\n"
    run.write_text("report.txt", text)
    _say(args, text.rstrip())
    return 0


HANDLERS = {
    "generate-mesh": cmd_generate_mesh,
    "certify-material": cmd_certify_material,
    "solve": cmd_solve,
    "adjoint": cmd_adjoint,
    "grad-check": cmd_grad_check,
    "optimize": cmd_optimize,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment configuration file")
    common.add_argument("--out", help="output directory (default: [output] directory plus a timestamp)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--t", type=float, default=1e-6, help="finite-difference step for grad-check")
    common.add_argument("--num-dirs", type=int, default=10, help="random directions for grad-check")
    common.add_argument("--quiet", action="store_true", help="only errors on stderr")
    parser = argparse.ArgumentParser(prog="magshape", description=__doc__)
    parser.add_argument("--version", action="version", version=f"magshape {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _output_dir(cfg: RunConfig, args) -> Path:
    if args.out:
        return Path(args.out)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(f"{cfg.output.directory}-{stamp}")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.num_dirs < 1 or args.t <= 0:
            raise ConfigError("--num-dirs must be >= 1 and --t positive")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = _output_dir(cfg, args)
        run = Run(args.command, cfg, out, argv)
        run.write_text("config.cfg", dump_config(cfg))
        status = HANDLERS[args.command](args, run)
        run.finish(status)
        return status
    except (ConfigError, MeshError, MaterialError, SolverError, PolygonError, PerturbationError, OSError, ValueError) as exc:
        print(f"magshape {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
