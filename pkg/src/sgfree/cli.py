"""Command line entry point: ``sgfree {solve,run,verify} CONFIG``."""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import laguerre
from .config import ConfigError, RunConfig, dumps, emit_config, ensure_dir, parse_config, write_json
from .dynamics import (
    HamiltonianConstants, HorizonWarning, hamiltonian_checks, run, solve_state, write_particles_csv,
)
from .geometry import check_c_concavity
from .laguerre import (
    CapTooLowError, ConsistencyError, SolverError, dual_functional, height_gradient_residual,
    height_lipschitz, surface_height_crosscheck, write_cells_csv, write_heights_csv,
)
from .measures import validate_cloud
from .oracle import DiscreteMeasurePair, finite_difference_gradient, lp_transport, voxelize

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _tag(step: int) -> str:
    return f"{step:06d}"


def _error_record(out: Path, kind: str, message: str, **extra):
    ensure_dir(out)
    write_json(out / "error.json", {"schema": "sgfree.error/1", "kind": kind, "message": message, **extra})
    print(f"error ({kind}): {message}", file=sys.stderr)


def _prepare(cfg: RunConfig, out: Path):
    ensure_dir(out)
    with open(out / "effective_config.json", "w", newline="") as fh:
        fh.write(emit_config(cfg))


def _write_snapshot(out: Path, state, with_cells=True):
    tag = _tag(state.step_index)
    write_heights_csv(out / f"heights_{tag}.csv", state.tess)
    write_particles_csv(out / f"particles_{tag}.csv", state)
    if with_cells:
        write_cells_csv(out / f"cells_{tag}.csv", state.tess, state.weights)


def cmd_solve(cfg: RunConfig, out: Path, base_dir=None) -> int:
    _prepare(cfg, out)
    cloud = cfg.cloud(base_dir)
    domain, cost, solver = cfg.domain(), cfg.cost_model(), cfg.solver()
    try:
        state = solve_state(cloud, domain, cost, solver)
    except SolverError as exc:
        kind = "cap_too_low" if isinstance(exc, CapTooLowError) else "solver"
        _error_record(out, kind, str(exc), residual=exc.residual, iterations=exc.iterations)
        return EXIT_SOLVER
    summary = {
        "schema": "sgfree.solve/1",
        "energy": state.tess.transport_cost,
        "mass_residual": state.residual,
        "iterations": state.iterations,
        "fluid_volume": state.tess.fluid_volume,
        "fluid_mean_height": float(np.sum(state.tess.volumes * state.tess.barycenters[:, 2])),
        "height_lipschitz": height_lipschitz(state.tess),
    }
    if domain.free_surface:
        try:
            _, h_res, p_res = surface_height_crosscheck(state.weights, domain, state.tess)
        except ConsistencyError as exc:
            _error_record(out, "crosscheck", str(exc))
            return EXIT_SOLVER
        summary["crosscheck_height_residual"] = h_res
        summary["crosscheck_pressure_residual"] = p_res
        summary["surface_gradient_residual"] = height_gradient_residual(state.weights, state.tess)
    _write_snapshot(out, state)
    write_json(out / "summary.json", summary)
    print(f"energy {summary['energy']:.17g}  residual {state.residual:.3e}")
    return EXIT_OK


def cmd_run(cfg: RunConfig, out: Path, base_dir=None) -> int:
    _prepare(cfg, out)
    cloud = cfg.cloud(base_dir)
    domain, cost, solver = cfg.domain(), cfg.cost_model(), cfg.solver()
    diag = open(out / "diagnostics.jsonl", "w", newline="")
    diag.write(dumps({"schema": "sgfree.diagnostics/1"}) + "\n")

    def on_step(state, rec):
        diag.write(dumps(rec.as_dict()) + "\n")
        if state.step_index % solver.output_cadence == 0:
            _write_snapshot(out, state, with_cells=False)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HorizonWarning)
            records, final, reports = run(cloud, domain, cost, solver, on_step=on_step)
    except SolverError as exc:
        diag.close()
        _error_record(out, "solver", str(exc), residual=exc.residual, iterations=exc.iterations)
        return EXIT_SOLVER
    diag.close()
    drift = records[-1].drift
    summary = {
        "schema": "sgfree.run/1",
        "steps": len(records) - 1,
        "final_time": final.time,
        "final_energy": records[-1].energy,
        "energy_drift": drift,
        "max_abs_drift": max(abs(r.drift) for r in records),
        "hamiltonian_checks_passed": all(r["passed"] for r in reports),
        "horizon_bound": reports[0]["horizon_bound"] if reports else None,
    }
    write_json(out / "summary.json", summary)
    print(f"steps {summary['steps']}  final energy drift {drift:.3e}")
    return EXIT_OK


class _Table:
    def __init__(self):
        self.rows = []

    def add(self, name, passed, value=None, tolerance=None):
        self.rows.append({"name": name, "passed": bool(passed), "value": value, "tolerance": tolerance})

    @property
    def passed(self):
        return all(r["passed"] for r in self.rows)


def _verify_battery(cfg: RunConfig, base_dir, table: _Table):
    cloud = cfg.cloud(base_dir)
    domain, cost, solver = cfg.domain(), cfg.cost_model(), cfg.solver()
    rep = validate_cloud(cloud, cost)
    for name, (ok, _) in rep.checks.items():
        table.add(f"cloud.{name}", ok)
    if not rep.passed:
        return

    reparsed = parse_config(emit_config(cfg), base_dir)
    table.add("config.round_trip", reparsed == cfg)

    try:
        state = solve_state(cloud, domain, cost, solver)
    except SolverError as exc:
        table.add("solve.converged", False, exc.residual, solver.mass_tolerance)
        return
    tol = solver.mass_tolerance * float(np.max(cloud.masses))
    table.add("solve.converged", state.residual <= tol, state.residual, tol)
    table.add("surface.single_valued", state.tess.surface_violations() == 0,
              state.tess.surface_violations(), 0)
    if domain.free_surface:
        try:
            _, h_res, p_res = surface_height_crosscheck(state.weights, domain, state.tess)
            worst = max(h_res, p_res)
        except ConsistencyError:
            worst = float("inf")
        table.add("surface.crosscheck", worst <= 1e-10, worst, 1e-10)

    rng = np.random.default_rng(cfg.seed)
    top = state.tess.top
    bounds = ((0.0, 0.0, cost.base), (domain.footprint[0], domain.footprint[1], top))
    cc = check_c_concavity(state.weights, samples=1000, bounds=bounds, seed=cfg.seed)
    table.add("geopotential.convexity", cc["max_violation"] <= 1e-9, cc["max_violation"], 1e-9)

    R_star = np.array(state.weights.weights)
    F = lambda R: dual_functional(cloud, domain, cost, R)  # noqa: E731
    worst = 0.0
    for _ in range(cfg.verify_samples):
        Ra = R_star + rng.normal(0.0, 0.05, cloud.n)
        Rb = R_star + rng.normal(0.0, 0.05, cloud.n)
        worst = max(worst, 0.5 * (F(Ra) + F(Rb)) - F(0.5 * (Ra + Rb)))
    table.add("dual.concavity", worst <= 1e-9, worst, 1e-9)

    worst = 0.0
    for _ in range(min(cfg.verify_samples, 10)):
        R = R_star + rng.normal(0.0, 0.02, cloud.n)
        t = laguerre.tessellate(cloud, domain, cost, R)
        g = t.volumes - cloud.masses
        fd = finite_difference_gradient(F, R, 1e-6)
        scale = max(float(np.max(np.abs(g))), float(np.max(cloud.masses)))
        worst = max(worst, float(np.max(np.abs(fd - g))) / scale)
    table.add("dual.gradient", worst <= 1e-6, worst, 1e-6)

    n = cfg.verify_oracle_grid
    if cloud.n <= 64 and n**3 * cloud.n <= 32**3 * 8:
        odom = replace(domain, grid=(n, n))
        try:
            ost = solve_state(cloud, odom, cost, solver)
            heights = ost.tess.column_heights if odom.free_surface else None
            pts, m = voxelize(odom, cost, n, heights)
            lp = lp_transport(DiscreteMeasurePair.from_cloud(pts, m, cloud), cost)
            rel = abs(ost.tess.transport_cost - lp.cost) / abs(lp.cost)
        except SolverError:
            rel = float("inf")
        table.add("oracle.transport_cost", rel <= 0.02, rel, 0.02)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HorizonWarning)
        consts = HamiltonianConstants.from_initial(state, domain, cost, solver)
        hc = hamiltonian_checks(state, consts, solver)
    table.add("hamiltonian.velocity_bound", hc["velocity_violations"] == 0, hc["max_speed_ratio"], 1.0)
    table.add("hamiltonian.support_bound", hc["support_ok"], hc["support_radius"], hc["support_limit"])


def cmd_verify(cfg: RunConfig, out: Path, base_dir=None) -> int:
    _prepare(cfg, out)
    table = _Table()
    _verify_battery(cfg, base_dir, table)
    write_json(out / "verify.json", {"schema": "sgfree.verify/1", "passed": table.passed,
                                     "checks": table.rows})
    for r in table.rows:
        value = "" if r["value"] is None else f"  {r['value']:.3e}"
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}{value}")
    failed = [r["name"] for r in table.rows if not r["passed"]]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "run": cmd_run, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgfree", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="JSON config file")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for column chunks")
    ap.add_argument("--output", help="output directory (overrides output_dir)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, base_dir=path.parent)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    laguerre.set_num_threads(args.threads)
    out = Path(args.output) if args.output else path.parent / cfg.output_dir
    return COMMANDS[args.command](cfg, out, base_dir=path.parent)


if __name__ == "__main__":
    sys.exit(main())
