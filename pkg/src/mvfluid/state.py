"""Forward solver for the coupled flow / deformation / magnetization system.

The unknowns are the velocity v (no-slip), pressure p (zero mean), the
2x2 deformation tensor F (zero on the boundary) and the magnetization
vector M (zero normal derivative), driven by an external magnetic field
H.  One time step is a semi-implicit Euler update: advection, elastic
stress, the saturation penalty and the magnetic forcing are explicit;
the three diffusion operators are implicit; a Leray projection restores
the divergence constraint and produces the pressure.

Advective terms use the skew-symmetric average of convective and flux
form.  For a discretely divergence-free velocity the two forms agree up
to the projection tolerance, and the average is exactly energy-neutral,
which keeps the discrete energy decay clean.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import snapshots
from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    BC_NONE,
    Field,
    Grid,
    MvfError,
    PoissonSolver,
    StructuralError,
    _ddx,
    _ddy,
    _lap,
    grad_neumann,
    inner_l2,
    jacobian,
    norm_l2,
    zero_field,
)


class StepError(MvfError):
    """A time step could not be taken (e.g. advective CFL violation)."""


CFL_LIMIT = 0.5


@dataclass(frozen=True)
class PhysParams:
    """Model constants: viscosity, deformation regularization, penalty scale."""

    nu: float = 1.0
    kappa: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.kappa > 0 and self.alpha > 0):
            raise StructuralError("physical parameters must be strictly positive")


@dataclass
class State:
    """Solution quadruplet (v, p, F, M) at one time instant."""

    v: Field
    p: Field
    F: Field
    M: Field
    t: float = 0.0

    def __post_init__(self):
        if not (self.v.ncomp == 2 and self.p.ncomp == 1 and self.F.ncomp == 4 and self.M.ncomp == 3):
            raise StructuralError("state needs (vector2, scalar, tensor22, vector3) fields")

    @property
    def grid(self) -> Grid:
        return self.v.grid


def zero_state(grid: Grid, t: float = 0.0) -> State:
    return State(
        v=zero_field(grid, 2, BC_DIRICHLET),
        p=zero_field(grid, 1, BC_NEUMANN),
        F=zero_field(grid, 4, BC_DIRICHLET),
        M=zero_field(grid, 3, BC_NEUMANN),
        t=t,
    )


@dataclass
class Trajectory:
    """Time-indexed states plus the control samples that produced them."""

    params: PhysParams
    dt: float
    states: list[State]
    h_samples: list[Field]

    def __post_init__(self):
        if len(self.states) != len(self.h_samples):
            raise StructuralError("need one control sample per stored state")
        for k, s in enumerate(self.states):
            if abs(s.t - k * self.dt) > 1e-12 * max(1.0, abs(s.t)) + 1e-12:
                raise StructuralError(f"state {k} has time {s.t}, expected {k * self.dt}")

    @property
    def grid(self) -> Grid:
        return self.states[0].grid

    @property
    def nsteps(self) -> int:
        return len(self.states) - 1

    @property
    def T(self) -> float:
        return self.nsteps * self.dt


# ---------------------------------------------------------------------------
# pointwise and stencil building blocks
# ---------------------------------------------------------------------------


def penalty_force(M: Field, alpha: float) -> Field:
    """Saturation penalty force (|M|^2 - 1) M / alpha^2."""
    m2 = np.sum(M.values * M.values, axis=0)
    return Field(M.grid, (m2 - 1.0) / (alpha * alpha) * M.values, M.bc)


def _penalty_arr(Mv: np.ndarray, alpha: float) -> np.ndarray:
    m2 = np.sum(Mv * Mv, axis=0)
    return (m2 - 1.0) / (alpha * alpha) * Mv


def skew_advect(v: np.ndarray, a: np.ndarray, grid: Grid, bc: str) -> np.ndarray:
    """Skew-symmetric advection of components ``a`` by the velocity ``v``.

    Average of the convective form (v . grad a, derivative by the field's
    own tag) and the flux form div(v a) (Dirichlet-tagged, the product
    vanishes on the boundary because v does).
    """
    conv = v[0] * _ddx(a, grid.hx, bc) + v[1] * _ddy(a, grid.hy, bc)
    flux = _ddx(v[0] * a, grid.hx, BC_DIRICHLET) + _ddy(v[1] * a, grid.hy, BC_DIRICHLET)
    return 0.5 * (conv + flux)


def _tensor_div(T: np.ndarray, grid: Grid) -> np.ndarray:
    """Row-wise divergence of a (r, 2, ny+1, nx+1) tensor vanishing on the boundary."""
    return _ddx(T[:, 0], grid.hx, BC_DIRICHLET) + _ddy(T[:, 1], grid.hy, BC_DIRICHLET)


def _ff_t(Fv: np.ndarray) -> np.ndarray:
    """F F^T as a (2, 2, ny+1, nx+1) array from packed (4, ...) components."""
    F = Fv.reshape(2, 2, *Fv.shape[1:])
    return np.einsum("ik...,jk...->ij...", F, F)


def elastic_stress_div(M: Field, F: Field) -> Field:
    """Elastic forcing (grad M)^T lap M - div(F F^T) on the momentum balance.

    The remaining gradient part of the magnetization stress is absorbed
    into the redefined pressure, so it is omitted here and recovered by
    the projection step.
    """
    grid = M.grid
    Jm = jacobian(M)  # (3, 2, ...)
    lapM = _lap(M.values, grid, M.bc)
    conv = np.einsum("cd...,c...->d...", Jm, lapM)
    return Field(grid, conv - _tensor_div(_ff_t(F.values), grid), BC_NONE)


def _grad_h_t_m(H: Field, Mv: np.ndarray) -> np.ndarray:
    """Kelvin-type magnetic force (grad H)^T M, a 2-vector array."""
    Jh = jacobian(H)  # (3, 2, ...)
    return np.einsum("cd...,c...->d...", Jh, Mv)


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------


def check_cfl(v: Field, dt: float) -> float:
    """Return the advective CFL number, raising StepError above the limit."""
    vmax = float(np.max(np.abs(v.values)))
    cfl = dt * vmax / min(v.grid.hx, v.grid.hy)
    if cfl > CFL_LIMIT:
        raise StepError(
            f"advective CFL {cfl:.3f} exceeds {CFL_LIMIT} (dt={dt:g}, max|v|={vmax:.3g}); reduce dt"
        )
    return cfl


def step_state(s: State, H_now: Field, dt: float, params: PhysParams,
               solver: PoissonSolver | None = None) -> State:
    """Advance the state by one semi-implicit Euler step."""
    grid = s.grid
    if H_now.grid != grid or H_now.ncomp != 3:
        raise StructuralError("control sample must be a 3-vector field on the state grid")
    if solver is None:
        solver = PoissonSolver(grid)
    check_cfl(s.v, dt)

    v, F, M = s.v.values, s.F.values, s.M.values

    # incremental pressure correction: the previous pressure gradient
    # enters the momentum balance and the projection solves only for the
    # increment, which keeps the velocity first-order accurate in time
    rhs_v = (
        v
        - dt * skew_advect(v, v, grid, BC_DIRICHLET)
        - dt * elastic_stress_div(s.M, s.F).values
        + dt * _grad_h_t_m(H_now, M)
        - dt * grad_neumann(s.p.values[0], grid)
    )
    F22 = F.reshape(2, 2, *F.shape[1:])
    Jv = jacobian(s.v)  # (2, 2, ...) Jv[i, k] = d_k v_i
    stretch = np.einsum("ik...,kj...->ij...", Jv, F22).reshape(F.shape)
    rhs_F = F - dt * skew_advect(v, F, grid, BC_DIRICHLET) + dt * stretch
    rhs_M = (
        M
        - dt * skew_advect(v, M, grid, BC_NEUMANN)
        - dt * _penalty_arr(M, params.alpha)
        + dt * H_now.values
    )

    v_star = solver.helmholtz(Field(grid, rhs_v, BC_DIRICHLET), params.nu * dt, BC_DIRICHLET, "state.v")
    F_new = solver.helmholtz(Field(grid, rhs_F, BC_DIRICHLET), params.kappa * dt, BC_DIRICHLET, "state.F")
    M_new = solver.helmholtz(Field(grid, rhs_M, BC_NEUMANN), dt, BC_NEUMANN, "state.M")

    v_new, phi = solver.leray(v_star, "state.p")
    p_new = Field(grid, s.p.values + phi.values / dt, BC_NEUMANN)
    return State(v=v_new, p=p_new, F=F_new, M=M_new, t=s.t + dt)


def solve_state(init: State, h_samples: list[Field], T: float, dt: float,
                params: PhysParams, solver: PoissonSolver | None = None) -> Trajectory:
    """Integrate the state system on [0, T] with uniform step dt.

    ``h_samples`` holds the control field at every time node t_k = k dt,
    so it must contain round(T/dt) + 1 entries.
    """
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise StructuralError(f"T={T} is not an integer multiple of dt={dt}")
    if len(h_samples) != n + 1:
        raise StructuralError(f"need {n + 1} control samples, got {len(h_samples)}")
    if solver is None:
        solver = PoissonSolver(init.grid)
    states = [State(init.v, init.p, init.F, init.M, 0.0)]
    for k in range(n):
        try:
            states.append(step_state(states[-1], h_samples[k], dt, params, solver))
        except MvfError as err:
            raise type(err)(f"step {k + 1}/{n} failed: {err}", *getattr(err, "args", [])[1:]) from err
    return Trajectory(params=params, dt=dt, states=states, h_samples=list(h_samples))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    exchange: float
    penalty: float
    zeeman: float
    elastic: float

    @property
    def total(self) -> float:
        return self.kinetic + self.exchange + self.penalty + self.zeeman + self.elastic

    @property
    def free(self) -> float:
        """Field-independent part used in the dissipation check."""
        return self.kinetic + self.exchange + self.penalty + self.elastic


def total_energy(s: State, H_now: Field, alpha: float) -> EnergyBreakdown:
    grid = s.grid
    w = grid.quad_weights()
    Jm = jacobian(s.M)
    m2 = np.sum(s.M.values * s.M.values, axis=0)
    return EnergyBreakdown(
        kinetic=0.5 * inner_l2(s.v, s.v),
        exchange=0.5 * float(np.einsum("cdyx,yx->", Jm * Jm, w)),
        penalty=float(np.einsum("yx,yx->", (m2 - 1.0) ** 2, w)) / (4.0 * alpha * alpha),
        zeeman=-inner_l2(s.M, Field(grid, H_now.values, s.M.bc)),
        elastic=0.5 * inner_l2(s.F, s.F),
    )


def energy_report(traj: Trajectory) -> dict:
    """Per-step energy breakdown, dissipation increments and Zeeman work proxy."""
    alpha = traj.params.alpha
    breakdowns = [total_energy(s, h, alpha) for s, h in zip(traj.states, traj.h_samples)]
    free = np.array([b.free for b in breakdowns])
    deltas = np.diff(free)
    w = traj.grid.quad_weights()
    zwork = np.zeros(len(traj.states))
    for k in range(traj.nsteps):
        dH = (traj.h_samples[k + 1].values - traj.h_samples[k].values) / traj.dt
        zwork[k] = float(np.einsum("cyx,cyx,yx->", traj.states[k].M.values, dH, w))
    return {
        "t": np.array([s.t for s in traj.states]),
        "breakdowns": breakdowns,
        "free": free,
        "deltas": deltas,
        "zeeman_work": zwork,
    }


def strong_norm_monitor(traj: Trajectory, solver: PoissonSolver | None = None) -> dict:
    """First-order and second-order norm aggregates along the trajectory.

    A collects the gradient norms of v and F plus the chemical-force norm
    ||lap M - f(M)||; B collects the projected Stokes term, ||lap F|| and
    the gradient of the chemical force.
    """
    grid = traj.grid
    if solver is None:
        solver = PoissonSolver(grid)
    w = grid.quad_weights()
    A = np.zeros(len(traj.states))
    B = np.zeros(len(traj.states))
    for k, s in enumerate(traj.states):
        Jv = jacobian(s.v)
        Jf = jacobian(s.F)
        chem = _lap(s.M.values, grid, BC_NEUMANN) - _penalty_arr(s.M.values, traj.params.alpha)
        A[k] = (
            float(np.einsum("cdyx,yx->", Jv * Jv, w))
            + float(np.einsum("cdyx,yx->", Jf * Jf, w))
            + float(np.einsum("cyx,yx->", chem * chem, w))
        )
        lap_v = Field(grid, _lap(s.v.values, grid, BC_DIRICHLET), BC_DIRICHLET)
        stokes, _ = solver.leray(lap_v, "monitor.p")
        lap_F = _lap(s.F.values, grid, BC_DIRICHLET)
        Jchem = np.stack([_ddx(chem, grid.hx, BC_NONE), _ddy(chem, grid.hy, BC_NONE)], axis=1)
        B[k] = (
            inner_l2(stokes, stokes)
            + float(np.einsum("cyx,yx->", lap_F * lap_F, w))
            + float(np.einsum("cdyx,yx->", Jchem * Jchem, w))
        )
    return {"t": np.array([s.t for s in traj.states]), "A": A, "B": B}


def divergence_norms(traj: Trajectory) -> np.ndarray:
    """L2 norm of div v at every stored step (projection-quality check)."""
    from .grid import divergence

    return np.array([norm_l2(divergence(s.v)) for s in traj.states])


# ---------------------------------------------------------------------------
# checkpoint directories
# ---------------------------------------------------------------------------

_FIELD_ORDER = ("v", "p", "F", "M", "H")


def save_trajectory(dirpath: str | os.PathLike, traj: Trajectory,
                    save_stride: int = 1, h_source: str = "samples") -> None:
    os.makedirs(dirpath, exist_ok=True)
    saved = []
    for k, (s, h) in enumerate(zip(traj.states, traj.h_samples)):
        if k % save_stride and k != traj.nsteps:
            continue
        name = f"step_{k:06d}.snap"
        snapshots.save_fields(os.path.join(dirpath, name), [s.v, s.p, s.F, s.M, h], time=s.t)
        saved.append(k)
    meta = {
        "dt": traj.dt,
        "T": traj.T,
        "params": {"nu": traj.params.nu, "kappa": traj.params.kappa, "alpha": traj.params.alpha},
        "save_stride": save_stride,
        "h_source": h_source,
        "field_order": list(_FIELD_ORDER),
        "steps": saved,
    }
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_trajectory(dirpath: str | os.PathLike) -> Trajectory:
    with open(os.path.join(dirpath, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["save_stride"] != 1:
        raise StructuralError("trajectory was saved with a stride; full checkpoints required")
    states, hs = [], []
    for k in meta["steps"]:
        fields, t = snapshots.load_fields(os.path.join(dirpath, f"step_{k:06d}.snap"))
        v, p, F, M, h = fields
        states.append(State(v=v, p=p, F=F, M=M, t=t))
        hs.append(h)
    params = PhysParams(**meta["params"])
    return Trajectory(params=params, dt=meta["dt"], states=states, h_samples=hs)
