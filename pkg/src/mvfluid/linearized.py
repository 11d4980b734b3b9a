"""Linearization of the forward solver around a stored trajectory.

The step below is the exact derivative of the discrete forward step with
respect to its state input, with general additive sources in the three
evolution equations.  Directional derivatives of the control-to-state
map are obtained by feeding the sources that correspond to a control
perturbation: the Kelvin force term in the momentum equation and the
perturbation itself in the magnetization equation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    BC_NONE,
    Field,
    Grid,
    PoissonSolver,
    StructuralError,
    _lap,
    grad_neumann,
    inner_l2,
    jacobian,
    zero_field,
)
from .state import (
    PhysParams,
    State,
    Trajectory,
    _ff_t,
    _grad_h_t_m,
    _tensor_div,
    skew_advect,
)


@dataclass
class LinearizedState:
    dv: Field
    dp: Field
    dF: Field
    dM: Field
    t: float = 0.0


@dataclass
class SourceTriple:
    """Source sequences (momentum, deformation, magnetization) on the time grid.

    Each entry may be None, meaning zero.  Lengths must match the number
    of stored trajectory states; the final sample is never consumed by
    the forward-in-time recursion.
    """

    S1: list[Field | None]
    S2: list[Field | None]
    S3: list[Field | None]

    def __len__(self) -> int:
        return len(self.S1)

    @staticmethod
    def zeros(n: int) -> "SourceTriple":
        return SourceTriple([None] * n, [None] * n, [None] * n)


def zero_linearized(grid: Grid, t: float = 0.0) -> LinearizedState:
    return LinearizedState(
        dv=zero_field(grid, 2, BC_DIRICHLET),
        dp=zero_field(grid, 1, BC_NEUMANN),
        dF=zero_field(grid, 4, BC_DIRICHLET),
        dM=zero_field(grid, 3, BC_NEUMANN),
        t=t,
    )


def _frozen_couplings(ls: LinearizedState, base: State, base_H: Field,
                      params: PhysParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Explicit frozen-coefficient terms of the linearized equations."""
    grid = base.grid
    v, F, M = base.v.values, base.F.values, base.M.values
    dv, dF, dM = ls.dv.values, ls.dF.values, ls.dM.values

    Jm = jacobian(base.M)
    Jdm = jacobian(ls.dM)
    lapM = _lap(M, grid, BC_NEUMANN)
    lapdM = _lap(dM, grid, BC_NEUMANN)
    F22 = F.reshape(2, 2, *F.shape[1:])
    dF22 = dF.reshape(2, 2, *dF.shape[1:])

    # momentum: transported/transporting advection, exchange stress,
    # elastic stress and the magnetic force, each linearized exactly
    elastic = np.einsum("ik...,jk...->ij...", dF22, F22)
    elastic += np.einsum("ik...,jk...->ij...", F22, dF22)
    cv = (
        -skew_advect(dv, v, grid, BC_DIRICHLET)
        - skew_advect(v, dv, grid, BC_DIRICHLET)
        - np.einsum("cd...,c...->d...", Jdm, lapM)
        - np.einsum("cd...,c...->d...", Jm, lapdM)
        + _tensor_div(elastic, grid)
        + _grad_h_t_m(base_H, dM)
    )

    Jv = jacobian(base.v)
    Jdv = jacobian(ls.dv)
    cF = (
        -skew_advect(dv, F, grid, BC_DIRICHLET)
        - skew_advect(v, dF, grid, BC_DIRICHLET)
        + np.einsum("ik...,kj...->ij...", Jdv, F22).reshape(F.shape)
        + np.einsum("ik...,kj...->ij...", Jv, dF22).reshape(F.shape)
    )

    a2 = params.alpha * params.alpha
    m2 = np.sum(M * M, axis=0)
    mdm = np.sum(M * dM, axis=0)
    cM = (
        -skew_advect(dv, M, grid, BC_NEUMANN)
        - skew_advect(v, dM, grid, BC_NEUMANN)
        - (m2 - 1.0) / a2 * dM
        - 2.0 / a2 * mdm * M
    )
    return cv, cF, cM


def step_linearized(ls: LinearizedState, base: State, base_H: Field,
                    sources: tuple[Field | None, Field | None, Field | None],
                    dt: float, params: PhysParams,
                    solver: PoissonSolver | None = None) -> LinearizedState:
    """One linearized step; mirrors the forward splitting exactly."""
    grid = base.grid
    if abs(ls.t - base.t) > 1e-9:
        raise StructuralError(f"linearized state at t={ls.t} but base state at t={base.t}")
    if solver is None:
        solver = PoissonSolver(grid)
    cv, cF, cM = _frozen_couplings(ls, base, base_H, params)
    S1, S2, S3 = sources
    rhs_v = (ls.dv.values + dt * (cv + (S1.values if S1 is not None else 0.0))
             - dt * grad_neumann(ls.dp.values[0], grid))
    rhs_F = ls.dF.values + dt * (cF + (S2.values if S2 is not None else 0.0))
    rhs_M = ls.dM.values + dt * (cM + (S3.values if S3 is not None else 0.0))

    v_star = solver.helmholtz(Field(grid, rhs_v, BC_DIRICHLET), params.nu * dt, BC_DIRICHLET, "lin.v")
    dF_new = solver.helmholtz(Field(grid, rhs_F, BC_DIRICHLET), params.kappa * dt, BC_DIRICHLET, "lin.F")
    dM_new = solver.helmholtz(Field(grid, rhs_M, BC_NEUMANN), dt, BC_NEUMANN, "lin.M")
    dv_new, phi = solver.leray(v_star, "lin.p")
    dp_new = Field(grid, ls.dp.values + phi.values / dt, BC_NEUMANN)
    return LinearizedState(dv=dv_new, dp=dp_new, dF=dF_new, dM=dM_new, t=ls.t + dt)


def s_norm(seq: list[LinearizedState], dt: float) -> float:
    """Space-time L2 norm aggregate of the four linearized components."""
    n = len(seq) - 1
    total = 0.0
    for k, ls in enumerate(seq):
        wk = 0.5 if k in (0, n) else 1.0
        total += wk * dt * (
            inner_l2(ls.dv, ls.dv) + inner_l2(ls.dp, ls.dp)
            + inner_l2(ls.dF, ls.dF) + inner_l2(ls.dM, ls.dM)
        )
    return math.sqrt(max(total, 0.0))


def source_norm(sources: SourceTriple, dt: float) -> float:
    n = len(sources) - 1
    total = 0.0
    for slot in (sources.S1, sources.S2, sources.S3):
        for k, f in enumerate(slot):
            if f is None:
                continue
            wk = 0.5 if k in (0, n) else 1.0
            total += wk * dt * inner_l2(f, f)
    return math.sqrt(max(total, 0.0))


def solve_linearized(traj: Trajectory, sources: SourceTriple,
                     solver: PoissonSolver | None = None) -> list[LinearizedState]:
    """Propagate the linearized system with zero initial data along a trajectory."""
    if len(sources) != len(traj.states):
        raise StructuralError(
            f"need {len(traj.states)} source samples, got {len(sources)}"
        )
    grid = traj.grid
    if solver is None:
        solver = PoissonSolver(grid)
    seq = [zero_linearized(grid)]
    for k in range(traj.nsteps):
        seq.append(
            step_linearized(
                seq[-1], traj.states[k], traj.h_samples[k],
                (sources.S1[k], sources.S2[k], sources.S3[k]),
                traj.dt, traj.params, solver,
            )
        )
    return seq


def stability_ratio(traj: Trajectory, sources: SourceTriple,
                    solver: PoissonSolver | None = None) -> float:
    """Output-to-source norm ratio, a discrete well-posedness diagnostic."""
    out = solve_linearized(traj, sources, solver)
    denom = source_norm(sources, traj.dt)
    return s_norm(out, traj.dt) / denom if denom > 0 else 0.0


def control_sources(traj: Trajectory, dH: list[Field]) -> SourceTriple:
    """Sources representing a control perturbation: Kelvin force and direct forcing."""
    if len(dH) != len(traj.states):
        raise StructuralError("control perturbation must be sampled at every time node")
    S1 = []
    for s, dh in zip(traj.states, dH):
        S1.append(Field(s.grid, _grad_h_t_m(dh, s.M.values), BC_NONE))
    return SourceTriple(S1=S1, S2=[None] * len(dH), S3=list(dH))


def directional_state_derivative(traj: Trajectory, dH: list[Field],
                                 solver: PoissonSolver | None = None) -> list[LinearizedState]:
    """Derivative of the control-to-state map along the perturbation dH."""
    return solve_linearized(traj, control_sources(traj, dH), solver)
