"""Cost functionals, reduced gradients and the two optimizers.

The control is either a time-sampled magnetic field (unconstrained,
measured in the spatial H1 metric) or a vector of per-coil intensities
constrained to a box.  Gradients are assembled from one forward solve
and one backward costate solve; the field-control gradient is returned
both as an L2 dual density and as its H1 Riesz representative, which is
the descent direction actually used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint import AdjointState, CostSpec, solve_adjoint, tracking_dual
from .grid import (
    BC_NEUMANN,
    Field,
    Grid,
    MvfError,
    PoissonSolver,
    StructuralError,
    _lap,
    inner_l2,
    norm_l2,
    zero_field,
)
from .state import PhysParams, State, Trajectory, solve_state


class LineSearchError(MvfError):
    """Backtracking failed to produce sufficient decrease."""


# ---------------------------------------------------------------------------
# control containers and inner products
# ---------------------------------------------------------------------------


@dataclass
class FieldControl:
    """Magnetic-field control sampled at every time node."""

    samples: list[Field]

    def __post_init__(self):
        if not self.samples:
            raise StructuralError("control needs at least one sample")
        g = self.samples[0].grid
        for s in self.samples:
            if s.grid != g or s.ncomp != 3:
                raise StructuralError("control samples must be 3-vector fields on one grid")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def grid(self) -> Grid:
        return self.samples[0].grid

    def axpy(self, a: float, other: "FieldControl") -> "FieldControl":
        return FieldControl([Field(s.grid, s.values + a * o.values, s.bc)
                             for s, o in zip(self.samples, other.samples)])

    def scaled(self, a: float) -> "FieldControl":
        return FieldControl([Field(s.grid, a * s.values, s.bc) for s in self.samples])

    @staticmethod
    def zeros(grid: Grid, nsamples: int) -> "FieldControl":
        return FieldControl([zero_field(grid, 3, BC_NEUMANN) for _ in range(nsamples)])

    @staticmethod
    def constant(grid: Grid, vec, nsamples: int) -> "FieldControl":
        vals = np.zeros((3,) + grid.shape)
        for c in range(3):
            vals[c] = vec[c]
        return FieldControl([Field(grid, vals.copy(), BC_NEUMANN) for _ in range(nsamples)])


def time_weights(n: int) -> np.ndarray:
    """Trapezoid weights over n+1 time nodes."""
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w


def h1_inner(a: Field, b: Field) -> float:
    """Spatial H1 inner product <(I - lap_N) a, b> used as the control metric."""
    return inner_l2(a, b) + inner_l2(
        Field(a.grid, -_lap(a.values, a.grid, BC_NEUMANN), a.bc), b
    )


def control_inner(A: FieldControl, B: FieldControl, dt: float) -> float:
    w = time_weights(len(A) - 1)
    return sum(wk * dt * h1_inner(a, b) for wk, a, b in zip(w, A.samples, B.samples))


def control_norm(A: FieldControl, dt: float) -> float:
    return math.sqrt(max(control_inner(A, A, dt), 0.0))


def control_l2_inner(A: FieldControl, B: FieldControl, dt: float) -> float:
    w = time_weights(len(A) - 1)
    return sum(wk * dt * inner_l2(a, b) for wk, a, b in zip(w, A.samples, B.samples))


# ---------------------------------------------------------------------------
# reduced cost and gradient (field control)
# ---------------------------------------------------------------------------


def tracking_cost(traj: Trajectory, cost: CostSpec) -> float:
    w = time_weights(traj.nsteps)
    total = 0.0
    for k, s in enumerate(traj.states):
        rv, rF, rM = cost.residuals(s, k)
        wgt = traj.grid.quad_weights()
        for weight, r in ((cost.a1, rv), (cost.a2, rF), (cost.a3, rM)):
            if weight > 0.0:
                total += w[k] * traj.dt * 0.5 / weight * float(np.einsum("cyx,yx->", r * r, wgt))
    return total


def reduced_cost(H: FieldControl, init: State, T: float, dt: float,
                 params: PhysParams, cost: CostSpec,
                 solver: PoissonSolver | None = None) -> tuple[float, Trajectory]:
    """Cost of a field control: tracking terms plus H1-in-space regularization."""
    traj = solve_state(init, H.samples, T, dt, params, solver)
    J = tracking_cost(traj, cost) + 0.5 * cost.lam * control_inner(H, H, dt)
    return J, traj


@dataclass
class GradientReport:
    dual: FieldControl
    riesz: FieldControl
    norm_dual: float
    norm_riesz: float
    J: float
    traj: Trajectory
    costates: list[AdjointState]
    tracking: FieldControl

    def pair(self, dH: FieldControl, dt: float) -> float:
        """Directional derivative J'(H)[dH] via the dual density."""
        w = time_weights(len(self.dual) - 1)
        return sum(wk * dt * inner_l2(d, h) for wk, d, h in zip(w, self.dual.samples, dH.samples))


def _costate_pipeline(H: FieldControl, init: State, T: float, dt: float,
                      params: PhysParams, cost: CostSpec, solver: PoissonSolver,
                      corrupt_costate: bool = False):
    """Forward solve, backward costate solve and the pairing density."""
    traj = solve_state(init, H.samples, T, dt, params, solver)
    costates = solve_adjoint(traj, cost, solver)
    density = tracking_dual(traj, costates)
    if corrupt_costate:
        density = [Field(d.grid, 1.25 * d.values, d.bc) for d in density]
    return traj, costates, density


def reduced_gradient(H: FieldControl, init: State, T: float, dt: float,
                     params: PhysParams, cost: CostSpec,
                     solver: PoissonSolver | None = None,
                     corrupt_costate: bool = False) -> GradientReport:
    """Assemble the cost gradient from one forward and one backward solve.

    ``corrupt_costate`` is a test hook that deliberately mis-scales the
    costate pairing term so that verification tooling can demonstrate a
    failing consistency check.
    """
    grid = H.grid
    if solver is None:
        solver = PoissonSolver(grid)
    traj, costates, density = _costate_pipeline(H, init, T, dt, params, cost, solver,
                                                corrupt_costate)
    J = tracking_cost(traj, cost) + 0.5 * cost.lam * control_inner(H, H, dt)

    w = time_weights(traj.nsteps)
    dual, riesz, tracking = [], [], []
    norm_dual_sq = 0.0
    for k, (h, d) in enumerate(zip(H.samples, density)):
        dk = Field(grid, d.values / w[k], d.bc)
        dual_k = Field(grid, cost.lam * (h.values - _lap(h.values, grid, BC_NEUMANN)) + dk.values, BC_NEUMANN)
        lift = solver.helmholtz(dk, 1.0, BC_NEUMANN, f"riesz.{k % 2}")
        riesz_k = Field(grid, cost.lam * h.values + lift.values, BC_NEUMANN)
        dual.append(dual_k)
        riesz.append(riesz_k)
        tracking.append(dk)
        norm_dual_sq += w[k] * dt * inner_l2(dual_k, dual_k)

    riesz_fc = FieldControl(riesz)
    return GradientReport(
        dual=FieldControl(dual),
        riesz=riesz_fc,
        norm_dual=math.sqrt(max(norm_dual_sq, 0.0)),
        norm_riesz=control_norm(riesz_fc, dt),
        J=J,
        traj=traj,
        costates=costates,
        tracking=FieldControl(tracking),
    )


def kkt_residual(H: FieldControl, init: State, T: float, dt: float,
                 params: PhysParams, cost: CostSpec,
                 solver: PoissonSolver | None = None,
                 report: GradientReport | None = None) -> float:
    """First-order optimality residual of the field problem.

    Measures how far H is from solving the stationarity equation
    (I - lap_N) H = (pairing density)/lambda; equals the dual-density
    norm divided by lambda.
    """
    if report is None:
        report = reduced_gradient(H, init, T, dt, params, cost, solver)
    return report.norm_dual / cost.lam


@dataclass
class OptimizerOptions:
    max_iter: int = 100
    grad_tol: float = 1e-6
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    step_init: float = 1.0
    step_max: float = 100.0
    max_halvings: int = 40


def optimize_field(H0: FieldControl, init: State, T: float, dt: float,
                   params: PhysParams, cost: CostSpec,
                   opts: OptimizerOptions | None = None,
                   solver: PoissonSolver | None = None) -> tuple[FieldControl, list[dict]]:
    """Steepest descent in the H1 control metric with Armijo backtracking."""
    if opts is None:
        opts = OptimizerOptions()
    if solver is None:
        solver = PoissonSolver(H0.grid)
    H = H0
    history: list[dict] = []
    step = opts.step_init
    prev: tuple[FieldControl, FieldControl] | None = None

    for it in range(opts.max_iter + 1):
        rep = reduced_gradient(H, init, T, dt, params, cost, solver)
        gnorm = rep.norm_riesz
        history.append({"iter": it, "J": rep.J, "grad_norm": gnorm, "step": step})
        if gnorm <= opts.grad_tol or it == opts.max_iter:
            return H, history

        if prev is not None:
            sH = H.axpy(-1.0, prev[0])
            sg = rep.riesz.axpy(-1.0, prev[1])
            num = control_inner(sH, sH, dt)
            den = control_inner(sH, sg, dt)
            if den > 0 and num > 0:
                step = min(max(num / den, 1e-6), opts.step_max)
        prev = (H, rep.riesz)

        decrement = control_inner(rep.riesz, rep.riesz, dt)
        accepted = False
        s = step
        for _ in range(opts.max_halvings):
            H_try = H.axpy(-s, rep.riesz)
            J_try, _ = reduced_cost(H_try, init, T, dt, params, cost, solver)
            if J_try <= rep.J - opts.armijo_c * s * decrement:
                H, step, accepted = H_try, s, True
                break
            s *= opts.armijo_shrink
        if not accepted:
            raise LineSearchError(
                f"field line search stagnated at iter {it}: J={rep.J:.6e}, "
                f"|grad|={gnorm:.3e}, last step {s:.3e}"
            )
    return H, history


# ---------------------------------------------------------------------------
# coil control
# ---------------------------------------------------------------------------


@dataclass
class CoilBasis:
    """Fixed spatial coil fields; only their intensities are optimized."""

    h: list[Field]

    def __post_init__(self):
        if not self.h:
            raise StructuralError("coil basis needs at least one coil")
        g = self.h[0].grid
        for f in self.h:
            if f.grid != g or f.ncomp != 3:
                raise StructuralError("coil fields must be 3-vector fields on one grid")

    @property
    def n(self) -> int:
        return len(self.h)

    @property
    def grid(self) -> Grid:
        return self.h[0].grid


@dataclass
class CoilControl:
    """Intensity matrix u[i, k] with componentwise box bounds a <= u <= b."""

    u: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.a = np.broadcast_to(np.asarray(self.a, dtype=float), self.u.shape).copy()
        self.b = np.broadcast_to(np.asarray(self.b, dtype=float), self.u.shape).copy()
        if np.any(self.a > self.b):
            raise StructuralError("coil bounds must satisfy a <= b componentwise")
        if not np.isfinite(self.u).all():
            raise StructuralError("coil intensities must be finite")

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.u >= self.a) and np.all(self.u <= self.b))


def project_box(u: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Componentwise clamp of intensities into [a, b]."""
    return np.minimum(np.maximum(u, a), b)


def coil_field(u: CoilControl | np.ndarray, basis: CoilBasis) -> FieldControl:
    """Superposition H(., t_k) = sum_i u_i(t_k) h_i."""
    mat = u.u if isinstance(u, CoilControl) else np.atleast_2d(np.asarray(u, dtype=float))
    if mat.shape[0] != basis.n:
        raise StructuralError(f"{mat.shape[0]} intensity rows for {basis.n} coils")
    grid = basis.grid
    samples = []
    for k in range(mat.shape[1]):
        vals = np.zeros((3,) + grid.shape)
        for i, h in enumerate(basis.h):
            vals += mat[i, k] * h.values
        samples.append(Field(grid, vals, BC_NEUMANN))
    return FieldControl(samples)


def coil_cost(u: CoilControl, basis: CoilBasis, init: State, T: float, dt: float,
              params: PhysParams, cost: CostSpec,
              solver: PoissonSolver | None = None) -> tuple[float, Trajectory]:
    """Tracking cost plus (lam/2) ||u||^2 in L2(0,T;R^n)."""
    traj = solve_state(init, coil_field(u, basis).samples, T, dt, params, solver)
    w = time_weights(u.u.shape[1] - 1)
    reg = 0.5 * cost.lam * float(np.sum(w * dt * np.sum(u.u * u.u, axis=0)))
    return tracking_cost(traj, cost) + reg, traj


def coil_gradient(u: CoilControl, basis: CoilBasis, init: State, T: float, dt: float,
                  params: PhysParams, cost: CostSpec,
                  solver: PoissonSolver | None = None) -> tuple[np.ndarray, float, Trajectory]:
    """Gradient matrix lam*u + D(u) with D_i(t_k) = <pairing density, h_i>."""
    grid = basis.grid
    if solver is None:
        solver = PoissonSolver(grid)
    H = coil_field(u, basis)
    traj, _, density = _costate_pipeline(H, init, T, dt, params, cost, solver)
    w = time_weights(traj.nsteps)
    D = np.zeros_like(u.u)
    for k, d in enumerate(density):
        for i, h in enumerate(basis.h):
            D[i, k] = inner_l2(d, h) / w[k]
    reg = 0.5 * cost.lam * float(np.sum(w * dt * np.sum(u.u * u.u, axis=0)))
    return cost.lam * u.u + D, tracking_cost(traj, cost) + reg, traj


def coil_fixed_point_residual(u: CoilControl, D: np.ndarray, lam: float, dt: float) -> float:
    """L2(0,T) distance between u and the clamped stationarity candidate."""
    target = project_box(-D / lam, u.a, u.b)
    w = time_weights(u.u.shape[1] - 1)
    return math.sqrt(float(np.sum(w * dt * np.sum((u.u - target) ** 2, axis=0))))


def optimize_coils(u0: CoilControl, basis: CoilBasis, init: State, T: float, dt: float,
                   params: PhysParams, cost: CostSpec,
                   opts: OptimizerOptions | None = None,
                   solver: PoissonSolver | None = None,
                   vi_samples: int = 100, rng: np.random.Generator | None = None,
                   ) -> tuple[CoilControl, list[dict], float]:
    """Projected gradient over the box with Armijo backtracking.

    Convergence is declared on the projection-formula residual
    ||u - clamp(-D(u)/lam)||; the returned VI residual is the smallest
    directional derivative toward randomly sampled feasible points
    (nonnegative at a box-constrained stationary point).
    """
    if opts is None:
        opts = OptimizerOptions()
    if solver is None:
        solver = PoissonSolver(basis.grid)
    u = CoilControl(project_box(u0.u, u0.a, u0.b), u0.a, u0.b)
    tw = time_weights(u.u.shape[1] - 1)

    def l2t(xu, yu):
        return float(np.sum(tw * dt * np.sum(xu * yu, axis=0)))

    history: list[dict] = []
    step = opts.step_init
    prev: tuple[np.ndarray, np.ndarray] | None = None
    g = J = None
    for it in range(opts.max_iter + 1):
        g, J, _ = coil_gradient(u, basis, init, T, dt, params, cost, solver)
        D = g - cost.lam * u.u
        fp_res = coil_fixed_point_residual(u, D, cost.lam, dt)
        history.append({"iter": it, "J": J, "grad_norm": math.sqrt(l2t(g, g)),
                        "step": step, "fixedpoint_residual": fp_res})
        if fp_res <= opts.grad_tol or it == opts.max_iter:
            break

        if prev is not None:
            su = u.u - prev[0]
            sg = g - prev[1]
            num, den = l2t(su, su), l2t(su, sg)
            if den > 0 and num > 0:
                step = min(max(num / den, 1e-6), opts.step_max)
        prev = (u.u.copy(), g.copy())

        accepted = False
        s = step
        for _ in range(opts.max_halvings):
            u_try = project_box(u.u - s * g, u.a, u.b)
            J_try, _ = coil_cost(CoilControl(u_try, u.a, u.b), basis, init, T, dt,
                                 params, cost, solver)
            if J_try <= J + opts.armijo_c * l2t(g, u_try - u.u):
                u = CoilControl(u_try, u.a, u.b)
                step, accepted = s, True
                break
            s *= opts.armijo_shrink
        if not accepted:
            raise LineSearchError(
                f"coil line search stagnated at iter {it}: J={J:.6e}, "
                f"fixed-point residual {history[-1]['fixedpoint_residual']:.3e}"
            )

    vi_res = math.inf
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=42))
    for _ in range(vi_samples):
        cand = u.a + (u.b - u.a) * rng.random(u.u.shape)
        vi_res = min(vi_res, l2t(g, cand - u.u))
    return u, history, vi_res


# ---------------------------------------------------------------------------
# stability probe
# ---------------------------------------------------------------------------


def _h2_sq(f: Field) -> float:
    from .grid import norm_h2

    return norm_h2(f) ** 2


def stability_probe(H1: FieldControl, H2: FieldControl, init: State, T: float,
                    dt: float, params: PhysParams,
                    solver: PoissonSolver | None = None) -> dict:
    """Empirical Lipschitz moduli of the control-to-state map.

    Runs both controls from the same initial data and reports the
    weak-norm and strong-norm aggregates of the state difference divided
    by the control-difference norm.  The aggregates are square roots of
    the summed squared norms, so equal controls give exactly zero.
    """
    from .grid import norm_h1

    # fresh solver per run: identical warm-start state makes equal
    # controls reproduce bitwise-equal trajectories
    tol = solver.tol if solver is not None else 1e-10
    iters = solver.max_iters if solver is not None else 20000
    traj1 = solve_state(init, H1.samples, T, dt, params,
                        PoissonSolver(init.grid, tol, iters))
    traj2 = solve_state(init, H2.samples, T, dt, params,
                        PoissonSolver(init.grid, tol, iters))
    n = traj1.nsteps
    w = time_weights(n)
    grid = traj1.grid

    sup_v = sup_F = sup_M = sup_strong = 0.0
    int_v = int_F = int_lapM = int_strong = 0.0
    for k in range(n + 1):
        dv = traj1.states[k].v - traj2.states[k].v
        dF = traj1.states[k].F - traj2.states[k].F
        dM = traj1.states[k].M - traj2.states[k].M
        sup_v = max(sup_v, inner_l2(dv, dv))
        sup_F = max(sup_F, inner_l2(dF, dF))
        sup_M = max(sup_M, norm_h1(dM) ** 2)
        lap_dM = Field(grid, _lap(dM.values, grid, BC_NEUMANN), dM.bc)
        int_v += w[k] * dt * norm_h1(dv) ** 2
        int_F += w[k] * dt * norm_h1(dF) ** 2
        int_lapM += w[k] * dt * inner_l2(lap_dM, lap_dM)
        sup_strong = max(sup_strong, norm_h1(dv) ** 2 + norm_h1(dF) ** 2 + _h2_sq(dM))
        int_strong += w[k] * dt * (_h2_sq(dv) + _h2_sq(dF) + _h2_sq(dM) + _grad_lap_sq(lap_dM))

    weak_lhs = math.sqrt(sup_v + sup_F + sup_M + int_v + int_F + int_lapM)
    strong_lhs = math.sqrt(sup_strong + int_strong)
    dH = FieldControl([a - b for a, b in zip(H1.samples, H2.samples)])
    rhs = control_norm(dH, dt)
    return {
        "weak_lhs": weak_lhs,
        "strong_lhs": strong_lhs,
        "rhs": rhs,
        "weak_ratio": weak_lhs / rhs if rhs > 0 else 0.0,
        "strong_ratio": strong_lhs / rhs if rhs > 0 else 0.0,
    }


def _grad_pair(f: Field):
    from .grid import _ddx, _ddy

    yield _ddx(f.values, f.grid.hx, "none")
    yield _ddy(f.values, f.grid.hy, "none")


def _grad_lap_sq(lap_f: Field) -> float:
    """Quadrature of |grad lap f|^2, the third-order part of the strong norm."""
    w = lap_f.grid.quad_weights()
    total = 0.0
    for g in _grad_pair(lap_f):
        total += float(np.einsum("cyx,yx->", g * g, w))
    return total


# ---------------------------------------------------------------------------
# derivative verification harness
# ---------------------------------------------------------------------------


def loglog_slope(eps: list[float], vals: list[float]) -> float:
    e = np.log(np.asarray(eps, dtype=float))
    v = np.log(np.maximum(np.asarray(vals, dtype=float), 1e-300))
    return float(np.polyfit(e, v, 1)[0])


def taylor_test(H: FieldControl, dirs: list[FieldControl], eps_list: list[float],
                init: State, T: float, dt: float, params: PhysParams, cost: CostSpec,
                solver: PoissonSolver | None = None,
                corrupt_costate: bool = False) -> list[dict]:
    """First- and second-order consistency of the adjoint gradient.

    For each direction returns the difference-quotient errors and Taylor
    remainders over eps_list together with their log-log slopes; a
    correct gradient gives slopes near 1 and 2 respectively.
    """
    if solver is None:
        solver = PoissonSolver(H.grid)
    rep = reduced_gradient(H, init, T, dt, params, cost, solver, corrupt_costate=corrupt_costate)
    rows = []
    for d_idx, dH in enumerate(dirs):
        gp = rep.pair(dH, dt)
        dq_err, rem = [], []
        for eps in eps_list:
            J_eps, _ = reduced_cost(H.axpy(eps, dH), init, T, dt, params, cost, solver)
            dq_err.append(abs((J_eps - rep.J) / eps - gp))
            rem.append(abs(J_eps - rep.J - eps * gp))
        rows.append({
            "direction": d_idx,
            "eps": list(eps_list),
            "dq_err": dq_err,
            "remainder": rem,
            "dq_slope": loglog_slope(eps_list, dq_err),
            "remainder_slope": loglog_slope(eps_list, rem),
            "gradient_pairing": gp,
            "J": rep.J,
        })
    return rows


def coil_taylor_test(u: CoilControl, basis: CoilBasis, dirs: list[np.ndarray],
                     eps_list: list[float], init: State, T: float, dt: float,
                     params: PhysParams, cost: CostSpec,
                     solver: PoissonSolver | None = None) -> list[dict]:
    if solver is None:
        solver = PoissonSolver(basis.grid)
    g, J0, _ = coil_gradient(u, basis, init, T, dt, params, cost, solver)
    tw = time_weights(u.u.shape[1] - 1)
    rows = []
    for d_idx, du in enumerate(dirs):
        gp = float(np.sum(tw * dt * np.sum(g * du, axis=0)))
        rem = []
        for eps in eps_list:
            J_eps, _ = coil_cost(CoilControl(u.u + eps * du, u.a, u.b), basis, init,
                                 T, dt, params, cost, solver)
            rem.append(abs(J_eps - J0 - eps * gp))
        rows.append({
            "direction": d_idx,
            "eps": list(eps_list),
            "remainder": rem,
            "remainder_slope": loglog_slope(eps_list, rem),
            "gradient_pairing": gp,
            "J": J0,
        })
    return rows
