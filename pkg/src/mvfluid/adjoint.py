"""Backward-in-time costate solver for tracking-type cost functionals.

The costate (w, q, G, N) is integrated from zero terminal data down to
t = 0 with the same semi-implicit splitting as the forward solver, run
in reverse: at each step the frozen-coefficient coupling terms and the
tracking residuals are added explicitly at the upper time level, then
the (self-adjoint) implicit diffusion solves and the Leray projection
are applied.  With this ordering every projection, diffusion and
advection pairing between the linearized and the costate sweeps is an
exact discrete transpose, so duality identities hold to solver
tolerance plus O(h^2) from the remaining coupling terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    Field,
    Grid,
    PoissonSolver,
    StructuralError,
    _ddx,
    _ddy,
    _lap,
    inner_l2,
    jacobian,
    zero_field,
)
from .state import State, Trajectory


@dataclass
class AdjointState:
    w: Field
    q: Field
    G: Field
    N: Field
    t: float = 0.0


@dataclass
class CostSpec:
    """Weights, regularization and targets of the tracking functional.

    Each target may be None (zero target), a single Field (constant in
    time) or a list of Fields sampled at the trajectory time nodes.
    """

    a1: float = 0.0
    a2: float = 0.0
    a3: float = 0.0
    lam: float = 1.0
    v_d: Field | list[Field] | None = None
    F_d: Field | list[Field] | None = None
    M_d: Field | list[Field] | None = None

    def __post_init__(self):
        if self.a1 < 0 or self.a2 < 0 or self.a3 < 0:
            raise StructuralError("tracking weights must be nonnegative")
        if not self.lam > 0:
            raise StructuralError("regularization weight must be positive")

    @staticmethod
    def _at(target, k: int) -> Field | None:
        if target is None or isinstance(target, Field):
            return target
        return target[k]

    def residuals(self, s: State, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Weighted tracking residuals (a_i (state - target)) at step k."""

        def res(weight, field, target):
            if weight == 0.0:
                return np.zeros_like(field.values)
            t = self._at(target, k)
            d = field.values if t is None else field.values - t.values
            return weight * d

        return (
            res(self.a1, s.v, self.v_d),
            res(self.a2, s.F, self.F_d),
            res(self.a3, s.M, self.M_d),
        )


def zero_adjoint(grid: Grid, t: float = 0.0) -> AdjointState:
    return AdjointState(
        w=zero_field(grid, 2, BC_DIRICHLET),
        q=zero_field(grid, 1, BC_NEUMANN),
        G=zero_field(grid, 4, BC_DIRICHLET),
        N=zero_field(grid, 3, BC_NEUMANN),
        t=t,
    )


def _sym_grad(w: Field) -> np.ndarray:
    """Symmetrized velocity gradient, shape (2, 2, ny+1, nx+1)."""
    J = jacobian(w)  # J[i, k] = d_k w_i
    return 0.5 * (J + J.transpose(1, 0, 2, 3))


def _costate_couplings(adj: AdjointState, base: State, base_H: Field,
                       params) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen-coefficient coupling terms of the time-reversed costate system."""
    from .state import skew_advect

    grid = base.grid
    v, F, M = base.v.values, base.F.values, base.M.values
    w, G, N = adj.w.values, adj.G.values, adj.N.values
    F22 = F.reshape(2, 2, *F.shape[1:])
    G22 = G.reshape(2, 2, *G.shape[1:])
    Jv = jacobian(base.v)   # (2, 2, ...)
    Jf = jacobian(base.F)   # (4, 2, ...)
    Jm = jacobian(base.M)   # (3, 2, ...)
    Jh = jacobian(base_H)   # (3, 2, ...)
    Dw = _sym_grad(adj.w)

    # momentum costate: reversed advection, stretching transpose, and the
    # pullbacks of the deformation and magnetization couplings
    GFt = np.einsum("ik...,jk...->ij...", G22, F22)
    cw = (
        skew_advect(v, w, grid, BC_DIRICHLET)
        - np.einsum("ij...,i...->j...", Jv, w)
        - np.einsum("cj...,c...->j...", Jf, G)
        - (_ddx(GFt[:, 0], grid.hx, BC_DIRICHLET) + _ddy(GFt[:, 1], grid.hy, BC_DIRICHLET))
        - np.einsum("cj...,c...->j...", Jm, N)
    )

    # deformation costate: reversed advection, stretching transpose and
    # the symmetrized-gradient source from the elastic stress
    DwF = np.einsum("ik...,kj...->ij...", Dw, F22).reshape(F.shape)
    JvTG = np.einsum("ik...,ij...->kj...", Jv, G22).reshape(F.shape)
    cG = skew_advect(v, G, grid, BC_DIRICHLET) + JvTG - 2.0 * DwF

    # magnetization costate: reversed advection, penalty linearization,
    # exchange-stress pullback and the magnetic-force pullback.  The
    # exchange pullback is assembled as div(lap M x w) - lap((grad M) w),
    # which for a divergence-free w equals the symmetrized-gradient form
    # -2 div(grad M  sym grad w) of the continuous costate equation and is
    # the exact discrete transpose of the linearized exchange stress, so
    # duality identities tighten under refinement instead of saturating.
    a2 = params.alpha * params.alpha
    m2 = np.sum(M * M, axis=0)
    mN = np.sum(M * N, axis=0)
    phi = np.einsum("cj...,j...->c...", Jm, w)  # (grad M) w, 3-vector
    lapM = _lap(M, grid, BC_NEUMANN)
    dMw = np.einsum("c...,j...->cj...", lapM, w)  # (3, 2, ...)
    exchange_pullback = (
        _ddx(dMw[:, 0], grid.hx, BC_DIRICHLET)
        + _ddy(dMw[:, 1], grid.hy, BC_DIRICHLET)
        - _lap(phi, grid, BC_NEUMANN)
    )
    cN = (
        skew_advect(v, N, grid, BC_NEUMANN)
        - (m2 - 1.0) / a2 * N
        - 2.0 / a2 * mN * M
        + exchange_pullback
        + np.einsum("cj...,j...->c...", Jh, w)
    )
    return cw, cG, cN


def step_adjoint_backward(adj: AdjointState, base: State, base_H: Field,
                          cost: CostSpec, k: int, nsteps: int, dt: float, params,
                          solver: PoissonSolver | None = None) -> AdjointState:
    """One backward step: couplings and tracking at level k, then diffuse/project."""
    grid = base.grid
    if abs(adj.t - base.t) > 1e-9:
        raise StructuralError(f"costate at t={adj.t} but base state at t={base.t}")
    if solver is None:
        solver = PoissonSolver(grid)
    wk = 0.5 if k in (0, nsteps) else 1.0
    rv, rF, rM = cost.residuals(base, k)
    cw, cG, cN = _costate_couplings(adj, base, base_H, params)

    acc_w = adj.w.values + dt * (cw + wk * rv)
    acc_G = adj.G.values + dt * (cG + wk * rF)
    acc_N = adj.N.values + dt * (cN + wk * rM)

    w_proj, _ = solver.leray(Field(grid, acc_w, BC_DIRICHLET), "adj.pre")
    w_diff = solver.helmholtz(w_proj, params.nu * dt, BC_DIRICHLET, "adj.w")
    G_new = solver.helmholtz(Field(grid, acc_G, BC_DIRICHLET), params.kappa * dt, BC_DIRICHLET, "adj.G")
    N_new = solver.helmholtz(Field(grid, acc_N, BC_NEUMANN), dt, BC_NEUMANN, "adj.N")
    w_new, phi = solver.leray(w_diff, "adj.post")
    q_new = Field(grid, phi.values / dt, BC_NEUMANN)
    return AdjointState(w=w_new, q=q_new, G=G_new, N=N_new, t=base.t - dt)


def solve_adjoint(traj: Trajectory, cost: CostSpec,
                  solver: PoissonSolver | None = None) -> list[AdjointState]:
    """Costate at every time node, integrated backward from zero terminal data."""
    grid = traj.grid
    if solver is None:
        solver = PoissonSolver(grid)
    n = traj.nsteps
    out: list[AdjointState] = [zero_adjoint(grid, t=traj.T)]
    for k in range(n, 0, -1):
        out.append(
            step_adjoint_backward(
                out[-1], traj.states[k], traj.h_samples[k], cost, k, n,
                traj.dt, traj.params, solver,
            )
        )
    out.reverse()
    return out


def tracking_dual(traj: Trajectory, costates: list[AdjointState]) -> list[Field]:
    """Costate pairing density for control perturbations, assembled weakly.

    Per time node this is N - div(M x w), the discrete transpose of the
    sources that inject a control perturbation into the linearized
    system; for a divergence-free w it coincides with N - (grad M) w.
    The final node carries no density (the terminal costate vanishes).
    """
    grid = traj.grid
    out = []
    for k, (s, y) in enumerate(zip(traj.states, costates)):
        if k == traj.nsteps:
            out.append(zero_field(grid, 3, BC_NEUMANN))
            continue
        Mw = np.einsum("c...,j...->cj...", s.M.values, y.w.values)  # (3, 2, ...)
        div_Mw = _ddx(Mw[:, 0], grid.hx, BC_DIRICHLET) + _ddy(Mw[:, 1], grid.hy, BC_DIRICHLET)
        out.append(Field(grid, y.N.values - div_Mw, BC_NEUMANN))
    return out


def costate_energy(costates: list[AdjointState]) -> np.ndarray:
    """Backward stability monitor: |grad w|^2 + |grad G|^2 + |N|^2 integrated."""
    vals = []
    for y in costates:
        Jw = jacobian(y.w)
        Jg = jacobian(y.G)
        w2 = y.w.grid.quad_weights()
        vals.append(
            float(np.einsum("cdyx,yx->", Jw * Jw, w2))
            + float(np.einsum("cdyx,yx->", Jg * Jg, w2))
            + inner_l2(y.N, y.N)
        )
    return np.array(vals)
