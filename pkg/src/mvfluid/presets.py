"""Analytic initial data, target and coil-basis presets, and the
counter-based random field generator used by verification tooling.

Randomness everywhere in the package flows through a Philox4x64
counter-based generator keyed by a single seed, so any sequence can be
reproduced from the seed alone.
"""

from __future__ import annotations

import math

import numpy as np

from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    Field,
    Grid,
    StructuralError,
    _ddx,
    _ddy,
    zero_field,
)
from .state import State, zero_state


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64 counter-based generator keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(key=seed))


def stream_vortex(grid: Grid, amplitude: float = 1.0) -> Field:
    """Divergence-free swirl: the matched-stencil curl of a smooth bump.

    The stream function A sin^2(pi x/lx) sin^2(pi y/ly) vanishes to
    second order on the boundary, so the resulting velocity is zero on
    the boundary and exactly divergence-free for the discrete stencils.
    """
    X, Y = grid.xy()
    psi = amplitude * np.sin(math.pi * X / grid.lx) ** 2 * np.sin(math.pi * Y / grid.ly) ** 2
    vx = _ddy(psi, grid.hy, BC_DIRICHLET)
    vy = -_ddx(psi, grid.hx, BC_DIRICHLET)
    return Field(grid, np.stack([vx, vy]), BC_DIRICHLET)


def magnetization_twist(grid: Grid, amplitude: float = 1.0) -> Field:
    """Unit-length magnetization with a smooth in-plane/out-of-plane twist.

    The tilt angle is built from Neumann-compatible cosine modes, so the
    normal derivative vanishes on the boundary and the saturation
    constraint |M| = 1 holds at every node.
    """
    X, Y = grid.xy()
    theta = amplitude * np.cos(math.pi * X / grid.lx) * np.cos(math.pi * Y / grid.ly)
    return Field(grid, np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)]), BC_NEUMANN)


def deformation_bump(grid: Grid, amplitude: float = 0.1) -> Field:
    """Smooth deformation perturbation vanishing on the boundary."""
    X, Y = grid.xy()
    s = np.sin(math.pi * X / grid.lx) * np.sin(math.pi * Y / grid.ly)
    s2 = np.sin(2 * math.pi * X / grid.lx) * np.sin(math.pi * Y / grid.ly)
    vals = np.stack([amplitude * s, 0.5 * amplitude * s2, -0.5 * amplitude * s2, -amplitude * s])
    return Field(grid, vals, BC_DIRICHLET)


def constant_m(grid: Grid, direction=(0.0, 0.0, 1.0), normalize: bool = True) -> Field:
    d = np.asarray(direction, dtype=float)
    if normalize:
        n = np.linalg.norm(d)
        if n == 0:
            raise StructuralError("magnetization direction must be nonzero")
        d = d / n
    vals = np.zeros((3,) + grid.shape)
    for c in range(3):
        vals[c] = d[c]
    return Field(grid, vals, BC_NEUMANN)


_INITIAL_PRESETS = ("zero", "constant_m", "vortex", "smooth")


def initial_state(grid: Grid, preset: str = "zero", amplitude: float = 0.5,
                  m_direction=(0.0, 0.0, 1.0)) -> State:
    """Built-in initial data.

    zero        all fields zero
    constant_m  only a spatially constant unit magnetization
    vortex      swirling velocity, constant magnetization, zero deformation
    smooth      vortex velocity, twisted magnetization, small deformation
    """
    s = zero_state(grid)
    if preset == "zero":
        return s
    if preset == "constant_m":
        return State(s.v, s.p, s.F, constant_m(grid, m_direction), 0.0)
    if preset == "vortex":
        return State(stream_vortex(grid, amplitude), s.p, s.F, constant_m(grid, m_direction), 0.0)
    if preset == "smooth":
        return State(
            stream_vortex(grid, amplitude),
            s.p,
            deformation_bump(grid, 0.2 * amplitude),
            magnetization_twist(grid, amplitude),
            0.0,
        )
    raise StructuralError(f"unknown initial preset {preset!r}; choose from {_INITIAL_PRESETS}")


def coil_basis_fields(grid: Grid, kind: str = "bumps", n: int = 2) -> list[Field]:
    """Fixed spatial coil fields.

    bumps      Gaussian bump per coil, centers spread along the domain,
               polarization rotating through the three components
    harmonics  Neumann-compatible cosine modes
    """
    X, Y = grid.xy()
    fields = []
    if kind == "bumps":
        sigma2 = 2.0 * (0.18 * min(grid.lx, grid.ly)) ** 2
        for i in range(n):
            cx = grid.lx * (i + 1.0) / (n + 1.0)
            cy = grid.ly * (0.35 + 0.3 * (i % 2))
            bump = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / sigma2)
            vals = np.zeros((3,) + grid.shape)
            vals[i % 3] = bump
            fields.append(Field(grid, vals, BC_NEUMANN))
    elif kind == "harmonics":
        for i in range(n):
            kx, ky = (i % 2) + (0 if i < 2 else 1), i // 2
            mode = np.cos(kx * math.pi * X / grid.lx) * np.cos(ky * math.pi * Y / grid.ly)
            vals = np.zeros((3,) + grid.shape)
            vals[i % 3] = mode
            fields.append(Field(grid, vals, BC_NEUMANN))
    else:
        raise StructuralError(f"unknown coil basis kind {kind!r}")
    return fields


def smooth_random_field(grid: Grid, rng: np.random.Generator, ncomp: int = 3,
                        bc: str = BC_NEUMANN, modes: int = 3,
                        amplitude: float = 1.0) -> Field:
    """Random low-mode field compatible with the requested boundary tag.

    Neumann fields combine cosine modes (zero normal derivative on the
    boundary); Dirichlet fields combine sine products that vanish there.
    """
    X, Y = grid.xy()
    vals = np.zeros((ncomp,) + grid.shape)
    for c in range(ncomp):
        for kx in range(modes):
            for ky in range(modes):
                coef = amplitude * rng.uniform(-1.0, 1.0) / (1.0 + kx + ky)
                if bc == BC_DIRICHLET:
                    if kx == 0 or ky == 0:
                        continue
                    vals[c] += coef * np.sin(kx * math.pi * X / grid.lx) * np.sin(ky * math.pi * Y / grid.ly)
                else:
                    vals[c] += coef * np.cos(kx * math.pi * X / grid.lx) * np.cos(ky * math.pi * Y / grid.ly)
    return Field(grid, vals, bc)


def smooth_random_control(grid: Grid, rng: np.random.Generator, nsamples: int,
                          modes: int = 3, amplitude: float = 1.0,
                          time_smooth: bool = True):
    """Random control with smooth time dependence (for derivative checks)."""
    from .control import FieldControl

    base = [smooth_random_field(grid, rng, 3, BC_NEUMANN, modes, amplitude) for _ in range(2)]
    phase = rng.uniform(0.0, 2.0 * math.pi)
    samples = []
    for k in range(nsamples):
        tau = k / max(nsamples - 1, 1)
        if time_smooth:
            c0, c1 = math.cos(math.pi * tau + phase), math.sin(math.pi * tau + phase)
        else:
            c0, c1 = 1.0, 0.0
        samples.append(Field(grid, c0 * base[0].values + c1 * base[1].values, BC_NEUMANN))
    return FieldControl(samples)
