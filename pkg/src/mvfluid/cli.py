"""Command-line entry points.

Subcommands: simulate, gradient-check, optimize-field, optimize-coils,
stability-probe, energy-report.  Every run reads one TOML configuration
(plus MVF_* environment overrides), writes its delimited reports and
companion figures into the output directory, and finishes with a
manifest listing the artifacts it produced.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 verification check failed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__, figures, snapshots
from .adjoint import CostSpec, costate_energy
from .config import ConfigError, RunConfig, fmt_float, load_config, write_manifest
from .control import (
    CoilBasis,
    CoilControl,
    FieldControl,
    LineSearchError,
    OptimizerOptions,
    coil_taylor_test,
    optimize_coils,
    optimize_field,
    reduced_gradient,
    stability_probe,
    taylor_test,
    time_weights,
)
from .grid import (
    CompatibilityError,
    ConvergenceError,
    Field,
    Grid,
    MvfError,
    PoissonSolver,
    StructuralError,
    UsageError,
)
from .presets import (
    coil_basis_fields,
    constant_m,
    initial_state,
    make_rng,
    smooth_random_control,
)
from .state import (
    PhysParams,
    State,
    StepError,
    Trajectory,
    energy_report,
    load_trajectory,
    save_trajectory,
    solve_state,
    strong_norm_monitor,
)


class CheckFailure(MvfError):
    """A verification command ran to completion but its criterion failed."""


# ---------------------------------------------------------------------------
# config -> problem objects
# ---------------------------------------------------------------------------


def build_grid(cfg: RunConfig) -> Grid:
    g = cfg["grid"]
    return Grid(g["nx"], g["ny"], g["lx"], g["ly"])


def build_params(cfg: RunConfig) -> PhysParams:
    p = cfg["params"]
    return PhysParams(nu=p["nu"], kappa=p["kappa"], alpha=p["alpha"])


def build_solver(cfg: RunConfig, grid: Grid) -> PoissonSolver:
    s = cfg["solver"]
    return PoissonSolver(grid, tol=s["poisson_tol"], max_iters=s["max_cg_iters"])


def build_initial(cfg: RunConfig, grid: Grid) -> State:
    ini = cfg["initial"]
    if ini["snapshot"]:
        fields, t = snapshots.load_fields(cfg.resolve_path(ini["snapshot"]))
        if len(fields) < 4:
            raise ConfigError("initial.snapshot must hold v, p, F, M records",
                              key="initial.snapshot")
        v, p, F, M = fields[:4]
        if v.grid != grid:
            raise ConfigError("initial.snapshot grid does not match [grid]",
                              key="initial.snapshot")
        return State(v=v, p=p, F=F, M=M, t=0.0)
    return initial_state(grid, ini["preset"], ini["amplitude"], tuple(ini["m_direction"]))


def build_field_control(cfg: RunConfig, grid: Grid, nsamples: int,
                        seed: int) -> FieldControl:
    ctl = cfg["control"]
    if ctl["samples"]:
        fields, _ = snapshots.load_fields(cfg.resolve_path(ctl["samples"]))
        if len(fields) != nsamples:
            raise ConfigError(
                f"control.samples holds {len(fields)} records, need {nsamples}",
                key="control.samples")
        return FieldControl(fields)
    preset = ctl["preset"]
    if preset == "zero":
        return FieldControl.zeros(grid, nsamples)
    if preset == "constant":
        return FieldControl.constant(grid, ctl["constant"], nsamples)
    if preset == "smooth_random":
        return smooth_random_control(grid, make_rng(seed), nsamples,
                                     amplitude=ctl["amplitude"])
    raise ConfigError(f"unknown control.preset {preset!r}", key="control.preset")


def build_coils(cfg: RunConfig, grid: Grid, nsamples: int) -> tuple[CoilBasis, CoilControl]:
    ctl = cfg["control"]
    basis = CoilBasis(coil_basis_fields(grid, ctl["coil_basis"], ctl["coil_count"]))
    shape = (basis.n, nsamples)
    u = CoilControl(np.full(shape, float(ctl["coil_u0"])),
                    np.full(shape, float(ctl["coil_lower"])),
                    np.full(shape, float(ctl["coil_upper"])))
    return basis, u


def build_cost(cfg: RunConfig, grid: Grid, init: State) -> CostSpec:
    c = cfg["cost"]
    preset = c["target_preset"]
    v_d = F_d = M_d = None
    if c["target_snapshot"]:
        fields, _ = snapshots.load_fields(cfg.resolve_path(c["target_snapshot"]))
        by_ncomp = {f.ncomp: f for f in fields}
        v_d, F_d, M_d = by_ncomp.get(2), by_ncomp.get(4), by_ncomp.get(3)
    elif preset == "constant_m":
        M_d = constant_m(grid, tuple(c["m_target"]), normalize=False)
    elif preset == "initial":
        v_d, F_d, M_d = init.v, init.F, init.M
    elif preset != "zero":
        raise ConfigError(f"unknown cost.target_preset {preset!r}", key="cost.target_preset")
    return CostSpec(a1=c["a1"], a2=c["a2"], a3=c["a3"], lam=c["lambda"],
                    v_d=v_d, F_d=F_d, M_d=M_d)


def build_optimizer_options(cfg: RunConfig) -> OptimizerOptions:
    o = cfg["optimizer"]
    return OptimizerOptions(max_iter=o["max_iter"], grad_tol=o["grad_tol"],
                            armijo_c=o["armijo_c"], armijo_shrink=o["armijo_shrink"],
                            step_init=o["step_init"], step_max=o["step_max"])


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def write_csv(path: str, header: list[str], rows: list[list[float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt_float(x) if isinstance(x, float) else str(x)
                              for x in row) + "\n")


def _emit_energy_reports(outdir: str, traj: Trajectory, solver: PoissonSolver,
                         want_figures: bool) -> list[str]:
    rep = energy_report(traj)
    rows = [
        [float(t), b.kinetic, b.exchange, b.penalty, b.zeeman, b.elastic, b.total]
        for t, b in zip(rep["t"], rep["breakdowns"])
    ]
    write_csv(os.path.join(outdir, "energy.csv"),
              ["t", "kinetic", "exchange", "penalty", "zeeman", "elastic", "total"], rows)
    mon = strong_norm_monitor(traj, solver)
    write_csv(os.path.join(outdir, "norms.csv"), ["t", "A", "B"],
              [[float(t), float(a), float(b)] for t, a, b in zip(mon["t"], mon["A"], mon["B"])])
    artifacts = ["energy.csv", "norms.csv"]
    if want_figures:
        artifacts.append(figures.energy_figure(outdir, rep["t"], rep["breakdowns"]))
        artifacts.append(figures.norms_figure(outdir, mon["t"], mon["A"], mon["B"]))
    return artifacts


def _say(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, outdir: str, seed: int, quiet: bool) -> int:
    started = time.time()
    grid = build_grid(cfg)
    params = build_params(cfg)
    solver = build_solver(cfg, grid)
    init = build_initial(cfg, grid)
    t = cfg["time"]
    n = cfg.nsteps
    if cfg["control"]["kind"] == "coils":
        basis, u = build_coils(cfg, grid, n + 1)
        from .control import coil_field
        H = coil_field(u, basis)
    else:
        H = build_field_control(cfg, grid, n + 1, seed)
    traj = solve_state(init, H.samples, t["T"], t["dt"], params, solver)
    traj_dir = os.path.join(outdir, "trajectory")
    save_trajectory(traj_dir, traj, save_stride=t["save_stride"], h_source=cfg["control"]["kind"])
    artifacts = _emit_energy_reports(outdir, traj, solver, cfg["output"]["figures"])
    artifacts.append("trajectory/meta.json")
    write_manifest(outdir, cfg, artifacts, "success", started, __version__)
    _say(quiet, f"simulate: {n} steps on {grid.nx}x{grid.ny}, reports in {outdir}")
    return 0


def cmd_gradient_check(cfg: RunConfig, outdir: str, seed: int, quiet: bool) -> int:
    started = time.time()
    grid = build_grid(cfg)
    params = build_params(cfg)
    solver = build_solver(cfg, grid)
    init = build_initial(cfg, grid)
    cost = build_cost(cfg, grid, init)
    t = cfg["time"]
    n = cfg.nsteps
    chk = cfg["check"]
    rng = make_rng(seed)
    eps = [float(e) for e in chk["eps"]]

    if cfg["control"]["kind"] == "coils":
        basis, u = build_coils(cfg, grid, n + 1)
        dirs = [rng.uniform(-1.0, 1.0, u.u.shape) * chk["amplitude"]
                for _ in range(chk["directions"])]
        rows = coil_taylor_test(u, basis, dirs, eps, init, t["T"], t["dt"], params,
                                cost, solver)
    else:
        H = build_field_control(cfg, grid, n + 1, seed)
        dirs = [smooth_random_control(grid, rng, n + 1, amplitude=chk["amplitude"])
                for _ in range(chk["directions"])]
        rows = taylor_test(H, dirs, eps, init, t["T"], t["dt"], params, cost, solver,
                           corrupt_costate=chk["corrupt_adjoint"])

    csv_rows = []
    for r in rows:
        for j, e in enumerate(r["eps"]):
            dq = r.get("dq_err", [float("nan")] * len(eps))[j]
            csv_rows.append([r["direction"], float(e), float(dq), float(r["remainder"][j])])
    write_csv(os.path.join(outdir, "gradient_check.csv"),
              ["direction", "eps", "dq_error", "taylor_remainder"], csv_rows)
    artifacts = ["gradient_check.csv"]
    if cfg["output"]["figures"]:
        artifacts.append(figures.gradient_check_figure(outdir, rows))

    scale = max(abs(rows[0]["J"]), 1.0)
    passed = True
    for r in rows:
        if max(r["remainder"]) <= 1e-12 * scale:
            _say(quiet, f"direction {r['direction']}: remainder at noise level (quadratic cost), pass")
            continue
        ok = chk["slope_min"] <= r["remainder_slope"] <= chk["slope_max"]
        passed &= ok
        _say(quiet, f"direction {r['direction']}: remainder slope {r['remainder_slope']:.3f} "
                    f"{'ok' if ok else 'OUT OF RANGE'}")
    write_manifest(outdir, cfg, artifacts, "success" if passed else "check_failed",
                   started, __version__)
    if not passed:
        raise CheckFailure(
            f"gradient check failed: remainder slopes outside "
            f"[{chk['slope_min']}, {chk['slope_max']}] (see {outdir}/gradient_check.csv)")
    return 0


def _write_costate_reports(outdir: str, rep, dt: float) -> list[str]:
    ya = costate_energy(rep.costates)
    ts = [y.t for y in rep.costates]
    write_csv(os.path.join(outdir, "adjoint_norms.csv"), ["t", "Y_a"],
              [[float(t), float(v)] for t, v in zip(ts, ya)])
    y0 = rep.costates[0]
    snapshots.save_fields(os.path.join(outdir, "costate_000000.snap"),
                          [y0.w, y0.q, y0.G, y0.N], time=y0.t)
    return ["adjoint_norms.csv", "costate_000000.snap"]


def cmd_optimize_field(cfg: RunConfig, outdir: str, seed: int, quiet: bool) -> int:
    started = time.time()
    grid = build_grid(cfg)
    params = build_params(cfg)
    solver = build_solver(cfg, grid)
    init = build_initial(cfg, grid)
    cost = build_cost(cfg, grid, init)
    t = cfg["time"]
    n = cfg.nsteps
    H0 = build_field_control(cfg, grid, n + 1, seed)
    opts = build_optimizer_options(cfg)
    Hstar, history = optimize_field(H0, init, t["T"], t["dt"], params, cost, opts, solver)

    write_csv(os.path.join(outdir, "optimize.csv"), ["iter", "J", "grad_norm", "step"],
              [[h["iter"], h["J"], h["grad_norm"], h["step"]] for h in history])
    with open(os.path.join(outdir, "control_optimal.snap"), "wb") as fh:
        for k, f in enumerate(Hstar.samples):
            snapshots.write_record(fh, f, time=k * t["dt"])
    rep = reduced_gradient(Hstar, init, t["T"], t["dt"], params, cost, solver)
    artifacts = ["optimize.csv", "control_optimal.snap"]
    artifacts += _write_costate_reports(outdir, rep, t["dt"])
    if cfg["output"]["figures"]:
        artifacts.append(figures.optimize_figure(outdir, history))
        artifacts.append(figures.field_figure(outdir, "control_final.png",
                                              Hstar.samples[-1], "optimal field, final time"))
    write_manifest(outdir, cfg, artifacts, "success", started, __version__)
    _say(quiet, f"optimize-field: J {history[0]['J']:.6e} -> {history[-1]['J']:.6e}, "
                f"|grad| {history[-1]['grad_norm']:.3e} in {len(history) - 1} iterations")
    return 0


def cmd_optimize_coils(cfg: RunConfig, outdir: str, seed: int, quiet: bool) -> int:
    started = time.time()
    grid = build_grid(cfg)
    params = build_params(cfg)
    solver = build_solver(cfg, grid)
    init = build_initial(cfg, grid)
    cost = build_cost(cfg, grid, init)
    t = cfg["time"]
    n = cfg.nsteps
    basis, u0 = build_coils(cfg, grid, n + 1)
    opts = build_optimizer_options(cfg)
    ustar, history, vi = optimize_coils(u0, basis, init, t["T"], t["dt"], params, cost,
                                        opts, solver, rng=make_rng(seed))

    write_csv(os.path.join(outdir, "optimize.csv"),
              ["iter", "J", "grad_norm", "step", "fixedpoint_residual"],
              [[h["iter"], h["J"], h["grad_norm"], h["step"], h["fixedpoint_residual"]]
               for h in history])
    times = [k * t["dt"] for k in range(n + 1)]
    write_csv(os.path.join(outdir, "coil_intensities.csv"),
              ["t"] + [f"u{i + 1}" for i in range(basis.n)],
              [[times[k]] + [float(ustar.u[i, k]) for i in range(basis.n)]
               for k in range(n + 1)])
    write_csv(os.path.join(outdir, "vi_residual.csv"), ["vi_residual"], [[float(vi)]])
    snapshots.save_fields(os.path.join(outdir, "coil_basis.snap"), basis.h)
    artifacts = ["optimize.csv", "coil_intensities.csv", "vi_residual.csv", "coil_basis.snap"]
    if cfg["output"]["figures"]:
        artifacts.append(figures.optimize_figure(outdir, history))
        artifacts.append(figures.coil_intensity_figure(outdir, times, ustar.u))
    write_manifest(outdir, cfg, artifacts, "success", started, __version__)
    _say(quiet, f"optimize-coils: J {history[0]['J']:.6e} -> {history[-1]['J']:.6e}, "
                f"fixed-point residual {history[-1]['fixedpoint_residual']:.3e}, "
                f"VI residual {vi:.3e}")
    return 0


def cmd_stability_probe(cfg: RunConfig, outdir: str, seed: int, quiet: bool) -> int:
    started = time.time()
    grid = build_grid(cfg)
    params = build_params(cfg)
    solver = build_solver(cfg, grid)
    init = build_initial(cfg, grid)
    t = cfg["time"]
    n = cfg.nsteps
    H1 = build_field_control(cfg, grid, n + 1, seed)
    stab = cfg["stability"]
    direction = smooth_random_control(grid, make_rng(seed + 1), n + 1,
                                      amplitude=stab["amplitude"])
    rows = []
    probe0 = stability_probe(H1, H1, init, t["T"], t["dt"], params, solver)
    rows.append([0.0, probe0["weak_lhs"], probe0["strong_lhs"], probe0["rhs"],
                 probe0["weak_ratio"], probe0["strong_ratio"]])
    eps_list = [float(e) for e in stab["eps"]]
    for eps in eps_list:
        H2 = H1.axpy(eps, direction)
        probe = stability_probe(H1, H2, init, t["T"], t["dt"], params, solver)
        rows.append([eps, probe["weak_lhs"], probe["strong_lhs"], probe["rhs"],
                     probe["weak_ratio"], probe["strong_ratio"]])
    write_csv(os.path.join(outdir, "stability.csv"),
              ["eps", "weak_lhs", "strong_lhs", "rhs", "weak_ratio", "strong_ratio"], rows)
    artifacts = ["stability.csv"]
    if cfg["output"]["figures"]:
        artifacts.append(figures.stability_figure(
            outdir, eps_list, [r[4] for r in rows[1:]], [r[5] for r in rows[1:]]))
    write_manifest(outdir, cfg, artifacts, "success", started, __version__)
    _say(quiet, f"stability-probe: ratios weak {[f'{r[4]:.3g}' for r in rows[1:]]} "
                f"strong {[f'{r[5]:.3g}' for r in rows[1:]]}")
    return 0


def cmd_energy_report(cfg: RunConfig, outdir: str, seed: int, quiet: bool,
                      trajectory: str | None = None) -> int:
    started = time.time()
    traj_dir = trajectory or cfg["report"]["trajectory_dir"]
    if not traj_dir:
        raise ConfigError("energy-report needs report.trajectory_dir or --trajectory",
                          key="report.trajectory_dir")
    traj_dir = cfg.resolve_path(traj_dir) if not os.path.isabs(traj_dir) else traj_dir
    if not os.path.isdir(traj_dir):
        raise ConfigError(f"trajectory directory {traj_dir!r} does not exist",
                          key="report.trajectory_dir")
    traj = load_trajectory(traj_dir)
    solver = PoissonSolver(traj.grid, tol=cfg["solver"]["poisson_tol"],
                           max_iters=cfg["solver"]["max_cg_iters"])
    artifacts = _emit_energy_reports(outdir, traj, solver, cfg["output"]["figures"])
    write_manifest(outdir, cfg, artifacts, "success", started, __version__)
    _say(quiet, f"energy-report: recomputed reports for {traj_dir} in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "simulate": cmd_simulate,
    "gradient-check": cmd_gradient_check,
    "optimize-field": cmd_optimize_field,
    "optimize-coils": cmd_optimize_coils,
    "stability-probe": cmd_stability_probe,
    "energy-report": cmd_energy_report,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvfluid",
        description="Magneto-viscoelastic flow simulation and optimal control.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML configuration file")
        p.add_argument("--output", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed for sampled directions")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        if name == "energy-report":
            p.add_argument("--trajectory", default=None,
                           help="trajectory checkpoint directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        outdir = args.output or cfg["output"]["directory"]
        if args.config and not os.path.isabs(outdir) and args.output is None:
            outdir = os.path.join(os.path.dirname(os.path.abspath(args.config)), outdir)
        os.makedirs(outdir, exist_ok=True)
        seed = args.seed if args.seed is not None else cfg.seed
        kwargs = {}
        if args.command == "energy-report":
            kwargs["trajectory"] = args.trajectory
        return _COMMANDS[args.command](cfg, outdir, seed, args.quiet, **kwargs)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (StructuralError, UsageError, CompatibilityError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (ConvergenceError, StepError, LineSearchError) as err:
        print(f"solver error: {err}", file=sys.stderr)
        return 3
    except CheckFailure as err:
        print(f"check failed: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
