import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mvfluid as mv
from mvfluid.grid import PoissonSolver, mean
from mvfluid.presets import make_rng, smooth_random_field


def analytic(grid, expr):
    X, Y = grid.xy()
    return expr(X, Y)


class TestGridAndFields:
    def test_grid_invariants(self):
        g = mv.Grid(16, 24, 2.0, 3.0)
        assert g.hx == pytest.approx(0.125)
        assert g.hy == pytest.approx(0.125)
        with pytest.raises(mv.StructuralError):
            mv.Grid(4, 16)
        with pytest.raises(mv.StructuralError):
            mv.Grid(16, 16, -1.0, 1.0)

    def test_field_validation(self, grid16):
        with pytest.raises(mv.StructuralError):
            mv.Field(grid16, np.zeros((2, 5, 5)), mv.BC_NONE)
        with pytest.raises(mv.StructuralError):
            mv.Field(grid16, np.zeros((5,) + grid16.shape), mv.BC_NONE)
        bad = np.zeros((1,) + grid16.shape)
        bad[0, 3, 3] = np.nan
        with pytest.raises(mv.StructuralError):
            mv.Field(grid16, bad, mv.BC_NONE)
        with pytest.raises(mv.StructuralError):
            mv.Field(grid16, np.zeros((1,) + grid16.shape), "periodic")

    def test_grid_mismatch_rejected(self, grid16):
        other = mv.Grid(16, 16, 2.0, 1.0)
        a = mv.zero_field(grid16, 1, mv.BC_NONE)
        b = mv.zero_field(other, 1, mv.BC_NONE)
        with pytest.raises(mv.StructuralError):
            mv.inner_l2(a, b)


class TestGradient:
    def test_zero(self, grid16):
        out = mv.gradient_scalar(mv.zero_field(grid16, 1, mv.BC_NONE))
        assert np.all(out.values == 0.0)

    def test_linear_exact_interior(self, grid16):
        f = mv.Field(grid16, analytic(grid16, lambda x, y: x)[None], mv.BC_NONE)
        out = mv.gradient_scalar(f)
        assert np.max(np.abs(out.values[0] - 1.0)) < 1e-12
        assert np.max(np.abs(out.values[1])) < 1e-12

    def test_sine_second_order(self):
        # measure the error constant on 32x32 and require it to hold,
        # with margin, on the refined grid as well
        errors = {}
        for n in (32, 64):
            g = mv.Grid(n, n)
            X, Y = g.xy()
            f = mv.Field(g, np.sin(2 * np.pi * X / g.lx)[None], mv.BC_NONE)
            out = mv.gradient_scalar(f)
            exact = (2 * np.pi / g.lx) * np.cos(2 * np.pi * X / g.lx)
            errors[n] = (
                np.max(np.abs(out.values[0] - exact)),
                np.max(np.abs(out.values[1])),
                g.hx,
            )
        C = errors[32][0] / errors[32][2] ** 2
        assert errors[64][0] < 1.1 * C * errors[64][2] ** 2
        assert errors[64][1] < 1e-12


class TestDivergence:
    def test_constant_interior_zero(self, grid16):
        vals = np.stack([np.full(grid16.shape, 1.7), np.full(grid16.shape, -0.3)])
        d = mv.divergence(mv.Field(grid16, vals, mv.BC_NONE))
        assert np.max(np.abs(d.values[0][1:-1, 1:-1])) < 1e-12

    def test_matched_curl_divergence_free(self, grid32):
        g = grid32
        X, Y = g.xy()
        psi = mv.Field(g, (np.sin(2 * np.pi * X / g.lx) * np.sin(2 * np.pi * Y / g.ly))[None],
                       mv.BC_DIRICHLET)
        gp = mv.gradient_scalar(psi)
        curl = mv.Field(g, np.stack([gp.values[1], -gp.values[0]]), mv.BC_DIRICHLET)
        assert mv.norm_l2(mv.divergence(curl)) < 1e-10

    def test_div_grad_matches_laplacian(self):
        errs = []
        for n in (32, 64):
            g = mv.Grid(n, n)
            X, Y = g.xy()
            f = mv.Field(g, np.sin(2 * np.pi * X / g.lx)[None], mv.BC_NONE)
            du = mv.divergence(mv.Field(g, mv.gradient_scalar(f).values, mv.BC_NONE))
            exact = -(2 * np.pi / g.lx) ** 2 * np.sin(2 * np.pi * X / g.lx)
            errs.append(np.max(np.abs(du.values[0][2:-2, 2:-2] - exact[2:-2, 2:-2])))
        assert math.log2(errs[0] / errs[1]) > 1.7


class TestLaplacian:
    def test_trivials(self, grid16):
        z = mv.laplacian(mv.zero_field(grid16, 1, mv.BC_NEUMANN))
        assert np.all(z.values == 0.0)
        ones = mv.Field(grid16, np.ones((1,) + grid16.shape), mv.BC_NEUMANN)
        assert np.max(np.abs(mv.laplacian(ones).values)) < 1e-12

    def test_requires_bc(self, grid16):
        with pytest.raises(mv.UsageError):
            mv.laplacian(mv.zero_field(grid16, 1, mv.BC_NONE))

    def test_neumann_cosine_convergence(self):
        errs = []
        for n in (32, 64, 128):
            g = mv.Grid(n, n)
            X, Y = g.xy()
            f = mv.Field(g, np.cos(np.pi * X / g.lx)[None], mv.BC_NEUMANN)
            exact = -((np.pi / g.lx) ** 2) * np.cos(np.pi * X / g.lx)
            errs.append(np.max(np.abs(mv.laplacian(f).values[0] - exact)))
        orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert all(1.8 <= o <= 2.2 for o in orders)


class TestPoissonNeumann:
    def test_zero_rhs(self, grid16):
        p = mv.poisson_neumann_solve(mv.zero_field(grid16, 1, mv.BC_NONE))
        assert np.all(p.values == 0.0)

    def test_manufactured(self, grid32):
        g = grid32
        X, Y = g.xy()
        target = mv.Field(g, np.cos(np.pi * X / g.lx)[None], mv.BC_NEUMANN)
        rhs = mv.Field(g, -mv.laplacian(target).values, mv.BC_NONE)
        p = mv.poisson_neumann_solve(rhs, tol=1e-10)
        want = target.values[0] - mean(target)
        rel = np.linalg.norm(p.values[0] - want) / np.linalg.norm(want)
        assert rel <= 10 * 1e-10

    def test_dense_oracle_8x8(self):
        g = mv.Grid(8, 8)
        solver = PoissonSolver(g, tol=1e-12)
        n = 81
        A = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            A[:, j] = solver._apply_neumann_lap(e.reshape(9, 9)).ravel()
        rng = make_rng(7)
        w = g.quad_weights().ravel()
        b = rng.standard_normal(n)
        b -= np.sum(w * b) / np.sum(w)
        Ap = A.copy()
        Ap[0, :] = 0.0
        Ap[0, 0] = 1.0
        bp = b.copy()
        bp[0] = 0.0
        dense = np.linalg.solve(Ap, bp)
        dense -= np.sum(w * dense) / g.area
        cg = solver.poisson_neumann(mv.Field(g, b.reshape(1, 9, 9), mv.BC_NONE)).values[0].ravel()
        assert np.linalg.norm(cg - dense) / np.linalg.norm(dense) < 1e-8

    def test_incompatible_rhs(self, grid16):
        rhs = mv.Field(grid16, np.ones((1,) + grid16.shape), mv.BC_NONE)
        with pytest.raises(mv.CompatibilityError):
            mv.poisson_neumann_solve(rhs)

    def test_budget_exhausted(self, grid32):
        rng = make_rng(3)
        f = smooth_random_field(grid32, rng, 1, mv.BC_NEUMANN)
        rhs = mv.Field(grid32, -mv.laplacian(f).values, mv.BC_NONE)
        with pytest.raises(mv.ConvergenceError) as err:
            mv.poisson_neumann_solve(rhs, tol=1e-12, max_iters=2)
        assert err.value.residual > 0


class TestLeray:
    def test_zero(self, grid16):
        u, p = mv.leray_project(mv.zero_field(grid16, 2, mv.BC_NONE))
        assert np.all(u.values == 0.0) and np.all(p.values == 0.0)

    def test_annihilates_gradients(self, grid32, rng):
        g = smooth_random_field(grid32, rng, 1, mv.BC_NEUMANN)
        solver = PoissonSolver(grid32, tol=1e-10)
        gr = np.stack([
            mv.grid._ddx(g.values[0], grid32.hx, mv.BC_NEUMANN),
            mv.grid._ddy(g.values[0], grid32.hy, mv.BC_NEUMANN),
        ])
        f = mv.Field(grid32, gr, mv.BC_NONE)
        u, _ = solver.leray(f)
        assert mv.norm_l2(u) <= 100 * 1e-10 * mv.norm_l2(f)

    def test_curl_fixed_point(self, grid32):
        g = grid32
        X, Y = g.xy()
        psi = mv.Field(g, (np.sin(2 * np.pi * X / g.lx) * np.sin(2 * np.pi * Y / g.ly))[None],
                       mv.BC_DIRICHLET)
        gp = mv.gradient_scalar(psi)
        curl = mv.Field(g, np.stack([gp.values[1], -gp.values[0]]), mv.BC_DIRICHLET)
        u, _ = mv.leray_project(curl, tol=1e-10)
        assert mv.norm_l2(u - curl) <= 100 * 1e-10 * mv.norm_l2(curl)

    def test_projection_properties(self, grid32, rng):
        solver = PoissonSolver(grid32, tol=1e-10)
        f = smooth_random_field(grid32, rng, 2, mv.BC_DIRICHLET)
        h = smooth_random_field(grid32, rng, 2, mv.BC_DIRICHLET)
        uf, _ = solver.leray(f)
        uh, _ = solver.leray(h)
        uff, _ = solver.leray(uf)
        scale = mv.norm_l2(f)
        assert mv.norm_l2(uff - uf) <= 10 * 1e-10 * scale
        sym = abs(mv.inner_l2(uf, h) - mv.inner_l2(f, uh))
        assert sym <= 1e-10 * scale * mv.norm_l2(h)
        assert mv.norm_l2(uf) <= scale * (1 + 1e-8)
        assert mv.norm_l2(mv.divergence(uf)) <= 10 * 1e-10 * (1 + scale)
        assert abs(mean(_p_of(solver, f))) < 1e-10

    def test_pressure_gauge(self, grid32, rng):
        f = smooth_random_field(grid32, rng, 2, mv.BC_DIRICHLET)
        _, p = mv.leray_project(f)
        assert abs(mean(p)) < 1e-12 * (1 + mv.norm_l2(p))


def _p_of(solver, f):
    _, p = solver.leray(f)
    return p


class TestInnerProductsAndNorms:
    def test_constant_inner(self, grid16):
        one = mv.Field(grid16, np.ones((1,) + grid16.shape), mv.BC_NONE)
        assert mv.inner_l2(one, one) == pytest.approx(1.0, abs=1e-12)

    def test_sine_l2_norm(self):
        g = mv.Grid(64, 64)
        X, Y = g.xy()
        f = mv.Field(g, np.sin(2 * np.pi * X / g.lx)[None], mv.BC_NONE)
        assert mv.norm_l2(f) == pytest.approx(math.sqrt(0.5), abs=1e-3)

    def test_h1_dominates_l2(self, grid16, rng):
        f = smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN)
        assert mv.norm_h1(f) >= mv.norm_l2(f)
        assert mv.norm_h2(f) >= mv.norm_h1(f)

    def test_operator_linearity(self, grid16, rng):
        a = smooth_random_field(grid16, rng, 1, mv.BC_DIRICHLET)
        b = smooth_random_field(grid16, rng, 1, mv.BC_DIRICHLET)
        lin = mv.gradient_scalar(mv.Field(grid16, 2.0 * a.values - 3.0 * b.values, mv.BC_DIRICHLET))
        direct = 2.0 * mv.gradient_scalar(a).values - 3.0 * mv.gradient_scalar(b).values
        assert np.max(np.abs(lin.values - direct)) < 1e-13 * max(1.0, np.max(np.abs(direct)))


class TestAdjointness:
    def test_grad_div_adjoint(self, grid32, rng):
        f = smooth_random_field(grid32, rng, 1, mv.BC_DIRICHLET)
        u = smooth_random_field(grid32, rng, 2, mv.BC_DIRICHLET)
        lhs = mv.inner_l2(mv.gradient_scalar(f), u)
        rhs = -mv.inner_l2(f, mv.divergence(u))
        scale = mv.norm_l2(f) * mv.norm_l2(u)
        assert abs(lhs - rhs) <= 1e-10 * scale


class TestRefinementOrders:
    def test_orders_in_window(self):
        errs = {"grad": [], "div": [], "lap": []}
        for n in (32, 64, 128):
            g = mv.Grid(n, n)
            X, Y = g.xy()
            sin2 = np.sin(2 * np.pi * X / g.lx) * np.sin(2 * np.pi * Y / g.ly)
            f = mv.Field(g, sin2[None], mv.BC_NONE)
            exact = np.stack([
                (2 * np.pi / g.lx) * np.cos(2 * np.pi * X / g.lx) * np.sin(2 * np.pi * Y / g.ly),
                (2 * np.pi / g.ly) * np.sin(2 * np.pi * X / g.lx) * np.cos(2 * np.pi * Y / g.ly),
            ])
            errs["grad"].append(np.max(np.abs(mv.gradient_scalar(f).values - exact)))
            u = mv.Field(g, np.stack([sin2, np.cos(np.pi * X / g.lx) * np.cos(np.pi * Y / g.ly)]),
                         mv.BC_NONE)
            exd = exact[0] + (np.pi / g.ly) * np.cos(np.pi * X / g.lx) * (-np.sin(np.pi * Y / g.ly))
            errs["div"].append(np.max(np.abs(mv.divergence(u).values[0] - exd)))
            h = mv.Field(g, (np.cos(np.pi * X / g.lx) * np.cos(2 * np.pi * Y / g.ly))[None],
                         mv.BC_NEUMANN)
            exl = -((np.pi / g.lx) ** 2 + (2 * np.pi / g.ly) ** 2) * h.values[0]
            errs["lap"].append(np.max(np.abs(mv.laplacian(h).values[0] - exl)))
        for name, seq in errs.items():
            for i in range(2):
                order = math.log2(seq[i] / seq[i + 1])
                assert 1.8 <= order <= 2.2, f"{name} order {order}"


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
       st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_field_arithmetic(avals, bvals):
    g = mv.Grid(8, 8)
    a = mv.Field(g, np.stack([np.full(g.shape, v) for v in avals]), mv.BC_NEUMANN)
    b = mv.Field(g, np.stack([np.full(g.shape, v) for v in bvals]), mv.BC_NEUMANN)
    s = a + b
    assert np.allclose(s.values[:, 0, 0], np.array(avals) + np.array(bvals))
    d = a - b
    assert np.allclose(d.values[:, 0, 0], np.array(avals) - np.array(bvals))
