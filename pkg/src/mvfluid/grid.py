"""Rectangular-grid field containers and boundary-aware difference operators.

All fields live on the nodes of a uniform tensor-product mesh of the
rectangle [0, lx] x [0, ly].  Arrays are stored with shape
``(ncomp, ny + 1, nx + 1)``: component index first, then the y index
(outer/slow), then the x index (inner/fast).  The number of components
determines the field kind:

    1 -> scalar, 2 -> planar vector, 3 -> magnetization-type vector,
    4 -> 2x2 tensor with components ordered (T11, T12, T21, T22).

Every field carries a boundary tag that selects the ghost-value rule used
by difference stencils:

    "dirichlet_zero"  odd extension, field vanishes on the boundary
    "neumann_zero"    even extension (mirror), zero normal derivative
    "none"            no rule; one-sided second-order stencils are used

Integration uses trapezoid weights (half on edges, quarter at corners),
which makes the discrete integration-by-parts identities underlying the
Leray projection exact for fields that vanish on the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

BC_DIRICHLET = "dirichlet_zero"
BC_NEUMANN = "neumann_zero"
BC_NONE = "none"
_BCS = (BC_DIRICHLET, BC_NEUMANN, BC_NONE)

KIND_NAMES = {1: "scalar", 2: "vector2", 3: "vector3", 4: "tensor22"}


class MvfError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(MvfError):
    """Mismatched grids, shapes, kinds or time alignment."""


class UsageError(MvfError):
    """Operation called with arguments it cannot meaningfully accept."""


class CompatibilityError(MvfError):
    """Right-hand side violates a solvability condition."""


class ConvergenceError(MvfError):
    """An iterative solver ran out of budget.

    Attributes
    ----------
    residual : float
        Relative residual reached when the budget was exhausted.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Uniform node-centered mesh of [0, lx] x [0, ly] with nx x ny cells."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise StructuralError(f"grid must be at least 8x8 cells, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise StructuralError("domain lengths must be positive")

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        """Node-array shape (ny+1, nx+1)."""
        return (self.ny + 1, self.nx + 1)

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinate arrays X, Y of shape (ny+1, nx+1)."""
        x = np.linspace(0.0, self.lx, self.nx + 1)
        y = np.linspace(0.0, self.ly, self.ny + 1)
        return np.meshgrid(x, y)

    def quad_weights(self) -> np.ndarray:
        """Trapezoid quadrature weights, shape (ny+1, nx+1)."""
        wx = np.full(self.nx + 1, self.hx)
        wx[0] = wx[-1] = 0.5 * self.hx
        wy = np.full(self.ny + 1, self.hy)
        wy[0] = wy[-1] = 0.5 * self.hy
        return np.outer(wy, wx)


@dataclass
class Field:
    """Grid function with one to four components and a boundary tag."""

    grid: Grid
    values: np.ndarray
    bc: str = BC_NONE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3 or self.values.shape[1:] != self.grid.shape:
            raise StructuralError(
                f"field values must have shape (ncomp, {self.grid.ny + 1}, {self.grid.nx + 1}), "
                f"got {self.values.shape}"
            )
        if self.values.shape[0] not in KIND_NAMES:
            raise StructuralError(f"unsupported component count {self.values.shape[0]}")
        if self.bc not in _BCS:
            raise StructuralError(f"unknown bc tag {self.bc!r}")
        if not np.isfinite(self.values).all():
            raise StructuralError("field contains non-finite entries")

    @property
    def ncomp(self) -> int:
        return self.values.shape[0]

    @property
    def kind(self) -> str:
        return KIND_NAMES[self.ncomp]

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy(), self.bc)

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values, self.bc)

    def __add__(self, other: "Field") -> "Field":
        _check_same(self, other)
        return Field(self.grid, self.values + other.values, self.bc)

    def __sub__(self, other: "Field") -> "Field":
        _check_same(self, other)
        return Field(self.grid, self.values - other.values, self.bc)

    def __mul__(self, a: float) -> "Field":
        return Field(self.grid, self.values * a, self.bc)

    __rmul__ = __mul__


def zero_field(grid: Grid, ncomp: int, bc: str = BC_NONE) -> Field:
    return Field(grid, np.zeros((ncomp,) + grid.shape), bc)


def scalar_field(grid: Grid, values: np.ndarray, bc: str = BC_NONE) -> Field:
    return Field(grid, np.asarray(values)[None] if np.asarray(values).ndim == 2 else values, bc)


def from_function(grid: Grid, funcs, bc: str = BC_NONE) -> Field:
    """Sample callables f(x, y) (one per component) onto the grid nodes."""
    X, Y = grid.xy()
    if callable(funcs):
        funcs = [funcs]
    vals = np.stack([np.broadcast_to(np.asarray(f(X, Y), dtype=float), grid.shape) for f in funcs])
    return Field(grid, vals, bc)


def _check_same(a: Field, b: Field, same_kind: bool = True):
    if a.grid != b.grid:
        raise StructuralError("fields live on different grids")
    if same_kind and a.ncomp != b.ncomp:
        raise StructuralError(f"field kinds differ: {a.kind} vs {b.kind}")


# ---------------------------------------------------------------------------
# stencils
#
# The 1D first-derivative rows at the boundary depend on the tag:
# odd/even ghost extension for tagged fields, one-sided second order for
# untagged ones.  Interior rows are plain central differences, so the
# divergence is the exact negative adjoint of the gradient (with respect
# to the trapezoid inner product) whenever the paired fields vanish on
# the boundary.
# ---------------------------------------------------------------------------


def _ddx(vals: np.ndarray, h: float, bc: str) -> np.ndarray:
    """d/dx along the last axis of (..., ny+1, nx+1) arrays."""
    out = np.empty_like(vals)
    out[..., 1:-1] = (vals[..., 2:] - vals[..., :-2]) / (2.0 * h)
    if bc == BC_DIRICHLET:
        out[..., 0] = vals[..., 1] / h
        out[..., -1] = -vals[..., -2] / h
    elif bc == BC_NEUMANN:
        out[..., 0] = 0.0
        out[..., -1] = 0.0
    else:
        out[..., 0] = (-3.0 * vals[..., 0] + 4.0 * vals[..., 1] - vals[..., 2]) / (2.0 * h)
        out[..., -1] = (3.0 * vals[..., -1] - 4.0 * vals[..., -2] + vals[..., -3]) / (2.0 * h)
    return out


def _ddy(vals: np.ndarray, h: float, bc: str) -> np.ndarray:
    """d/dy along the second-to-last axis."""
    out = np.empty_like(vals)
    out[..., 1:-1, :] = (vals[..., 2:, :] - vals[..., :-2, :]) / (2.0 * h)
    if bc == BC_DIRICHLET:
        out[..., 0, :] = vals[..., 1, :] / h
        out[..., -1, :] = -vals[..., -2, :] / h
    elif bc == BC_NEUMANN:
        out[..., 0, :] = 0.0
        out[..., -1, :] = 0.0
    else:
        out[..., 0, :] = (-3.0 * vals[..., 0, :] + 4.0 * vals[..., 1, :] - vals[..., 2, :]) / (2.0 * h)
        out[..., -1, :] = (3.0 * vals[..., -1, :] - 4.0 * vals[..., -2, :] + vals[..., -3, :]) / (2.0 * h)
    return out


def _d2x(vals: np.ndarray, h: float, bc: str) -> np.ndarray:
    out = np.empty_like(vals)
    h2 = h * h
    out[..., 1:-1] = (vals[..., 2:] - 2.0 * vals[..., 1:-1] + vals[..., :-2]) / h2
    if bc == BC_DIRICHLET:
        out[..., 0] = -2.0 * vals[..., 0] / h2
        out[..., -1] = -2.0 * vals[..., -1] / h2
    else:  # BC_NEUMANN
        out[..., 0] = 2.0 * (vals[..., 1] - vals[..., 0]) / h2
        out[..., -1] = 2.0 * (vals[..., -2] - vals[..., -1]) / h2
    return out


def _d2y(vals: np.ndarray, h: float, bc: str) -> np.ndarray:
    out = np.empty_like(vals)
    h2 = h * h
    out[..., 1:-1, :] = (vals[..., 2:, :] - 2.0 * vals[..., 1:-1, :] + vals[..., :-2, :]) / h2
    if bc == BC_DIRICHLET:
        out[..., 0, :] = -2.0 * vals[..., 0, :] / h2
        out[..., -1, :] = -2.0 * vals[..., -1, :] / h2
    else:
        out[..., 0, :] = 2.0 * (vals[..., 1, :] - vals[..., 0, :]) / h2
        out[..., -1, :] = 2.0 * (vals[..., -2, :] - vals[..., -1, :]) / h2
    return out


def _lap(vals: np.ndarray, grid: Grid, bc: str) -> np.ndarray:
    return _d2x(vals, grid.hx, bc) + _d2y(vals, grid.hy, bc)


def gradient_scalar(f: Field) -> Field:
    """Componentwise spatial gradient of a scalar field, as a 2-vector field."""
    if f.ncomp != 1:
        raise StructuralError("gradient_scalar expects a scalar field")
    gx = _ddx(f.values[0], f.grid.hx, f.bc)
    gy = _ddy(f.values[0], f.grid.hy, f.bc)
    return Field(f.grid, np.stack([gx, gy]), BC_NONE)


def grad_neumann(p: np.ndarray, grid: Grid) -> np.ndarray:
    """Pressure-type gradient (mirror ghosts, zero normal boundary parts)."""
    return np.stack([_ddx(p, grid.hx, BC_NEUMANN), _ddy(p, grid.hy, BC_NEUMANN)])


def jacobian(f: Field) -> np.ndarray:
    """All partial derivatives of a field: array (ncomp, 2, ny+1, nx+1)."""
    gx = _ddx(f.values, f.grid.hx, f.bc)
    gy = _ddy(f.values, f.grid.hy, f.bc)
    return np.stack([gx, gy], axis=1)


def divergence(u: Field) -> Field:
    """Discrete divergence d_x u1 + d_y u2 of a 2-vector field."""
    if u.ncomp != 2:
        raise StructuralError("divergence expects a 2-vector field")
    d = _ddx(u.values[0], u.grid.hx, u.bc) + _ddy(u.values[1], u.grid.hy, u.bc)
    return Field(u.grid, d[None], BC_NONE)


def laplacian(f: Field) -> Field:
    """Five-point Laplacian with ghost values given by the field's bc tag."""
    if f.bc == BC_NONE:
        raise UsageError("laplacian requires a boundary rule (dirichlet_zero or neumann_zero)")
    return Field(f.grid, _lap(f.values, f.grid, f.bc), f.bc)


# ---------------------------------------------------------------------------
# inner products and norms
# ---------------------------------------------------------------------------


def inner_l2(a: Field, b: Field) -> float:
    """Trapezoid quadrature of the pointwise product, summed over components."""
    _check_same(a, b)
    w = a.grid.quad_weights()
    return float(np.einsum("cyx,cyx,yx->", a.values, b.values, w))


def norm_l2(a: Field) -> float:
    return math.sqrt(max(inner_l2(a, a), 0.0))


def mean(f: Field) -> float:
    """Quadrature average over the domain (scalar fields)."""
    w = f.grid.quad_weights()
    return float(np.einsum("yx,yx->", f.values[0], w)) / f.grid.area


def norm_h1(a: Field) -> float:
    J = jacobian(a)
    w = a.grid.quad_weights()
    g2 = float(np.einsum("cdyx,yx->", J * J, w))
    return math.sqrt(max(inner_l2(a, a) + g2, 0.0))


def norm_h2(a: Field) -> float:
    """H2-type norm: L2 + gradient + second-difference terms."""
    bc = a.bc if a.bc != BC_NONE else BC_NEUMANN
    d2 = _lap(a.values, a.grid, bc)
    dxy = _ddy(_ddx(a.values, a.grid.hx, a.bc), a.grid.hy, BC_NONE)
    w = a.grid.quad_weights()
    extra = float(np.einsum("cyx,yx->", d2 * d2 + 2.0 * dxy * dxy, w))
    return math.sqrt(max(norm_h1(a) ** 2 + extra, 0.0))


# ---------------------------------------------------------------------------
# conjugate-gradient kernels (weighted inner product)
# ---------------------------------------------------------------------------

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 20000


def _wdot(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(w * a * b))


def _cg(apply_op, rhs, w, tol, max_iters, x0=None, project=None, scale=None):
    """CG on an SPD operator in the inner product <a,b> = sum(w*a*b).

    ``project`` (optional) is applied to iterates and residuals each
    iteration to pin down null-space components (e.g. the mean).
    ``scale`` (optional) is a problem-size reference: right-hand sides
    at roundoff level relative to it are treated as zero.
    Returns (x, relative_residual, iterations).
    """
    if project is None:
        project = lambda z: z
    rhs = project(rhs)
    rhs_norm = math.sqrt(max(_wdot(w, rhs, rhs), 0.0))
    floor = tol * scale if scale is not None else 0.0
    if rhs_norm <= floor or rhs_norm == 0.0:
        return np.zeros_like(rhs), 0.0, 0
    x = np.zeros_like(rhs) if x0 is None else project(x0.copy())
    r = rhs - apply_op(x) if x0 is not None else rhs.copy()
    r = project(r)
    res = math.sqrt(max(_wdot(w, r, r), 0.0))
    if res <= tol * rhs_norm:
        return x, res / rhs_norm, 0
    p = r.copy()
    rr = _wdot(w, r, r)
    for it in range(1, max_iters + 1):
        ap = apply_op(p)
        pap = _wdot(w, p, ap)
        if pap <= 0.0:
            # numerically exhausted the range of the (semi)definite operator
            return project(x), res / rhs_norm, it
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        r = project(r)
        rr_new = _wdot(w, r, r)
        res = math.sqrt(max(rr_new, 0.0))
        if res <= tol * rhs_norm:
            return project(x), res / rhs_norm, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise ConvergenceError(
        f"CG did not reach tolerance {tol:g} in {max_iters} iterations "
        f"(relative residual {res / rhs_norm:.3e})",
        residual=res / rhs_norm,
    )


class PoissonSolver:
    """Shared CG machinery for the Neumann--Poisson and Helmholtz solves.

    Holds per-grid scratch data (quadrature weights, warm starts) so that
    repeated solves inside time loops start from the previous solution.
    """

    def __init__(self, grid: Grid, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS):
        self.grid = grid
        self.tol = tol
        self.max_iters = max_iters
        self._w = grid.quad_weights()
        self._warm: dict[str, np.ndarray] = {}
        self.last_iterations = 0
        self.last_residual = 0.0
        # W-orthonormal basis of the projection operator's null space:
        # the constant plus the three checkerboard pressure modes, which
        # the mean-zero gauge alone would leave floating
        sx = (-1.0) ** np.arange(grid.nx + 1)
        sy = (-1.0) ** np.arange(grid.ny + 1)
        raw = [
            np.ones(grid.shape),
            np.broadcast_to(sx, grid.shape).copy(),
            np.broadcast_to(sy[:, None], grid.shape).copy(),
            np.outer(sy, sx),
        ]
        basis: list[np.ndarray] = []
        for z in raw:
            for b in basis:
                z = z - np.sum(self._w * z * b) * b
            z_norm = math.sqrt(max(float(np.sum(self._w * z * z)), 0.0))
            if z_norm > 1e-12:
                basis.append(z / z_norm)
        self._leray_null = basis

    # -- compact five-point operators ------------------------------------

    def _apply_neumann_lap(self, p: np.ndarray) -> np.ndarray:
        return -_lap(p, self.grid, BC_NEUMANN)

    def _project_mean(self, p: np.ndarray) -> np.ndarray:
        return p - np.sum(self._w * p) / self.grid.area

    def poisson_neumann(self, rhs: Field, warm_key: str | None = None) -> Field:
        """Solve -lap_N p = rhs with zero-mean gauge.

        The right-hand side must have (discrete) zero mean; otherwise the
        problem is unsolvable and a CompatibilityError is raised.
        """
        if rhs.ncomp != 1:
            raise StructuralError("poisson solve expects a scalar right-hand side")
        b = rhs.values[0]
        bnorm = math.sqrt(max(_wdot(self._w, b, b), 0.0))
        m = abs(np.sum(self._w * b)) / self.grid.area
        if bnorm > 0 and m > self.tol * max(bnorm, 1.0) * 1e3:
            raise CompatibilityError(
                f"right-hand side mean {m:.3e} is incompatible with a pure Neumann problem"
            )
        x0 = self._warm.get(warm_key) if warm_key else None
        p, res, its = _cg(
            self._apply_neumann_lap, self._project_mean(b), self._w,
            self.tol, self.max_iters, x0=x0, project=self._project_mean,
        )
        self.last_iterations, self.last_residual = its, res
        if warm_key:
            self._warm[warm_key] = p.copy()
        return Field(self.grid, p[None], BC_NEUMANN)

    def helmholtz(self, rhs: Field, coeff: float, bc: str, warm_key: str | None = None) -> Field:
        """Solve (I - coeff*lap_bc) x = rhs componentwise.

        Dirichlet components are solved with the boundary ring pinned to
        zero, which keeps the operator symmetric on the interior.
        """
        if coeff < 0:
            raise UsageError("helmholtz coefficient must be nonnegative")
        if bc == BC_NONE:
            raise UsageError("helmholtz solve requires a boundary rule")
        g = self.grid
        out = np.empty_like(rhs.values)
        total_its = 0

        if bc == BC_DIRICHLET:

            def apply_op(x):
                y = x - coeff * _lap(x, g, BC_DIRICHLET)
                y[0, :] = x[0, :]
                y[-1, :] = x[-1, :]
                y[:, 0] = x[:, 0]
                y[:, -1] = x[:, -1]
                return y

            def prep(b):
                b = b.copy()
                b[0, :] = 0.0
                b[-1, :] = 0.0
                b[:, 0] = 0.0
                b[:, -1] = 0.0
                return b

        else:

            def apply_op(x):
                return x - coeff * _lap(x, g, BC_NEUMANN)

            def prep(b):
                return b

        for c in range(rhs.ncomp):
            b = prep(rhs.values[c])
            key = f"{warm_key}:{c}" if warm_key else None
            x0 = self._warm.get(key) if key else b
            x, res, its = _cg(apply_op, b, self._w, self.tol, self.max_iters, x0=x0)
            total_its += its
            if key:
                self._warm[key] = x.copy()
            out[c] = x
        self.last_iterations = total_its
        return Field(self.grid, out, bc)

    # -- Leray projection --------------------------------------------------

    def _grad_neumann(self, p: np.ndarray) -> np.ndarray:
        return grad_neumann(p, self.grid)

    def _div_adj(self, u: np.ndarray) -> np.ndarray:
        """Exact negative weighted adjoint of the Neumann-tagged gradient.

        Equals the Dirichlet-tagged stencil divergence after zeroing the
        normal boundary components, which the stencil never reads off
        velocity-like inputs anyway.
        """
        ux = u[0].copy()
        uy = u[1].copy()
        ux[:, 0] = 0.0
        ux[:, -1] = 0.0
        uy[0, :] = 0.0
        uy[-1, :] = 0.0
        return _ddx(ux, self.grid.hx, BC_DIRICHLET) + _ddy(uy, self.grid.hy, BC_DIRICHLET)

    def _apply_leray_op(self, p: np.ndarray) -> np.ndarray:
        return -self._div_adj(self._grad_neumann(p))

    def _project_leray_null(self, p: np.ndarray) -> np.ndarray:
        for z in self._leray_null:
            p = p - np.sum(self._w * p * z) * z
        return p

    def leray(self, f: Field, warm_key: str | None = None) -> tuple[Field, Field]:
        """Project a 2-vector field onto the discretely divergence-free part.

        Returns (u, p) with u = f - grad p, where p solves the weak Neumann
        problem assembled with the same discrete gradient.  The map f -> u
        is an orthogonal projection in the trapezoid inner product, so it
        is idempotent, symmetric and norm-nonincreasing up to the solver
        tolerance, and it annihilates discrete gradients exactly.
        """
        if f.ncomp != 2:
            raise StructuralError("leray projection expects a 2-vector field")
        rhs = -self._div_adj(f.values)
        fnorm = math.sqrt(max(float(np.sum(self._w * f.values * f.values)), 0.0))
        x0 = self._warm.get(warm_key) if warm_key else None
        p, res, its = _cg(
            self._apply_leray_op, rhs, self._w,
            self.tol, self.max_iters, x0=x0, project=self._project_leray_null,
            scale=fnorm / max(self.grid.hx, self.grid.hy),
        )
        self.last_iterations, self.last_residual = its, res
        if warm_key:
            self._warm[warm_key] = p.copy()
        u = f.values - self._grad_neumann(p)
        return Field(f.grid, u, f.bc), Field(f.grid, p[None], BC_NEUMANN)


def poisson_neumann_solve(rhs: Field, tol: float = DEFAULT_TOL,
                          max_iters: int = DEFAULT_MAX_ITERS) -> Field:
    """One-shot zero-mean solve of -lap_N p = rhs (see PoissonSolver)."""
    return PoissonSolver(rhs.grid, tol, max_iters).poisson_neumann(rhs)


def leray_project(f: Field, tol: float = DEFAULT_TOL,
                  max_iters: int = DEFAULT_MAX_ITERS) -> tuple[Field, Field]:
    """One-shot Leray projection (see PoissonSolver.leray)."""
    return PoissonSolver(f.grid, tol, max_iters).leray(f)
