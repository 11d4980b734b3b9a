import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mvfluid as mv
from mvfluid.adjoint import CostSpec
from mvfluid.control import (
    CoilBasis,
    CoilControl,
    FieldControl,
    OptimizerOptions,
    coil_cost,
    coil_field,
    coil_fixed_point_residual,
    coil_gradient,
    coil_taylor_test,
    control_inner,
    control_norm,
    h1_inner,
    kkt_residual,
    optimize_coils,
    optimize_field,
    project_box,
    reduced_cost,
    reduced_gradient,
    stability_probe,
    taylor_test,
    time_weights,
)
from mvfluid.grid import PoissonSolver, _lap
from mvfluid.presets import (
    coil_basis_fields,
    constant_m,
    initial_state,
    make_rng,
    smooth_random_control,
    smooth_random_field,
)


T, DT = 0.03, 3e-3
NS = int(round(T / DT))  # steps


@pytest.fixture()
def solver(grid16):
    return PoissonSolver(grid16, tol=1e-11)


class TestReducedCost:
    def test_all_zero_gives_zero(self, grid16, params, solver):
        H = FieldControl.zeros(grid16, NS + 1)
        init = initial_state(grid16, "zero")
        J, _ = reduced_cost(H, init, T, DT, params, CostSpec(a3=1.0, lam=1.0), solver)
        assert J == 0.0

    def test_constant_target_closed_form(self, grid16, params, solver):
        # zero run against a constant magnetization target: the tracking
        # term integrates to (a3/2) |Omega| T |c|^2
        c = np.array([0.3, -0.2, 0.5])
        cost = CostSpec(a3=1.0, lam=1.0, M_d=constant_m(grid16, c, normalize=False))
        H = FieldControl.zeros(grid16, NS + 1)
        init = initial_state(grid16, "zero")
        J, _ = reduced_cost(H, init, T, DT, params, cost, solver)
        expect = 0.5 * grid16.area * T * float(np.dot(c, c))
        assert J == pytest.approx(expect, rel=1e-12)

    def test_lambda_scaling_exact(self, grid16, params, solver, rng):
        H = smooth_random_control(grid16, rng, NS + 1, amplitude=0.4)
        init = initial_state(grid16, "constant_m")
        cost1 = CostSpec(a3=1.0, lam=0.3, M_d=constant_m(grid16, (1, 0, 0)))
        cost2 = CostSpec(a3=1.0, lam=0.6, M_d=constant_m(grid16, (1, 0, 0)))
        J1, _ = reduced_cost(H, init, T, DT, params, cost1, solver)
        J2, _ = reduced_cost(H, init, T, DT, params, cost2, solver)
        assert J2 - J1 == pytest.approx(0.15 * control_inner(H, H, DT), rel=1e-11)


class TestReducedGradient:
    def test_pure_regularization_riesz(self, grid16, params, solver, rng):
        H = smooth_random_control(grid16, rng, NS + 1, amplitude=0.4)
        init = initial_state(grid16, "constant_m")
        rep = reduced_gradient(H, init, T, DT, params, CostSpec(lam=0.37), solver)
        dev = max(mv.norm_l2(r - 0.37 * h) for r, h in zip(rep.riesz.samples, H.samples))
        assert dev <= 1e-8 * 0.37 * control_norm(H, DT)

    def test_riesz_solves_dual_equation(self, grid16, params, solver, rng):
        H = smooth_random_control(grid16, rng, NS + 1, amplitude=0.4)
        init = initial_state(grid16, "smooth", amplitude=0.3)
        cost = CostSpec(a3=1.0, lam=0.2, M_d=smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN))
        rep = reduced_gradient(H, init, T, DT, params, cost, solver)
        for r, d in zip(rep.riesz.samples, rep.dual.samples):
            lhs = r.values - _lap(r.values, grid16, mv.BC_NEUMANN)
            assert np.max(np.abs(lhs - d.values)) <= 1e-8 * (1 + np.max(np.abs(d.values)))

    def test_taylor_slope(self, grid16, params, solver, rng):
        tight = PoissonSolver(grid16, tol=1e-12)
        H = smooth_random_control(grid16, rng, NS + 1, amplitude=0.5)
        init = initial_state(grid16, "smooth", amplitude=0.4)
        cost = CostSpec(a1=1.0, a3=1.0, lam=1e-2,
                        M_d=smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN))
        dirs = [smooth_random_control(grid16, rng, NS + 1, amplitude=1.5)]
        rows = taylor_test(H, dirs, [1e-1, 1e-2, 1e-3, 1e-4], init, T, DT, params, cost, tight)
        assert 1.6 <= rows[0]["remainder_slope"] <= 2.4
        assert 0.8 <= rows[0]["dq_slope"] <= 1.2


class TestKKT:
    def test_zero_at_trivial_optimum(self, grid16, params, solver):
        H = FieldControl.zeros(grid16, NS + 1)
        init = initial_state(grid16, "constant_m")
        res = kkt_residual(H, init, T, DT, params, CostSpec(lam=1.0), solver)
        assert res == 0.0

    def test_matches_dual_norm_identity(self, grid16, params, solver, rng):
        H = smooth_random_control(grid16, rng, NS + 1, amplitude=0.3)
        init = initial_state(grid16, "smooth", amplitude=0.3)
        cost = CostSpec(a3=1.0, lam=0.4, M_d=constant_m(grid16, (1, 0, 0)))
        rep = reduced_gradient(H, init, T, DT, params, cost, solver)
        res = kkt_residual(H, init, T, DT, params, cost, solver, report=rep)
        # reassemble through the riesz representative
        tw = time_weights(NS)
        acc = 0.0
        for wk, r in zip(tw, rep.riesz.samples):
            img = mv.Field(grid16, r.values - _lap(r.values, grid16, mv.BC_NEUMANN), r.bc)
            acc += wk * DT * mv.inner_l2(img, img)
        assert res == pytest.approx(math.sqrt(acc) / cost.lam, rel=1e-8)


class TestOptimizeField:
    def test_pure_regularization_converges_to_zero(self, grid16, params, solver, rng):
        H0 = smooth_random_control(grid16, rng, NS + 1, amplitude=0.05)
        init = initial_state(grid16, "constant_m")
        opts = OptimizerOptions(max_iter=50, grad_tol=1e-9)
        Hs, hist = optimize_field(H0, init, T, DT, params, CostSpec(lam=0.5), opts, solver)
        assert control_norm(Hs, DT) <= 1e-6
        assert len(hist) - 1 <= 50
        Js = [h["J"] for h in hist]
        assert all(Js[i + 1] < Js[i] for i in range(len(Js) - 1))

    def test_tracking_run_improves(self, grid16, params, rng):
        solver = PoissonSolver(grid16, tol=1e-11)
        init = initial_state(grid16, "constant_m")
        target = constant_m(grid16, (0.1, 0.0, 1.0), normalize=True)
        cost = CostSpec(a3=1.0, lam=1e-3, M_d=target)
        H0 = FieldControl.zeros(grid16, NS + 1)
        opts = OptimizerOptions(max_iter=30, grad_tol=1e-10)
        Hs, hist = optimize_field(H0, init, T, DT, params, cost, opts, solver)
        assert hist[-1]["J"] < hist[0]["J"]
        assert hist[-1]["grad_norm"] <= hist[0]["grad_norm"] / 100.0
        res = kkt_residual(Hs, init, T, DT, params, cost, solver)
        assert res <= hist[-1]["grad_norm"] * (1 + cost.lam) / cost.lam


class TestCoilField:
    def test_zero_intensities(self, grid16):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u = CoilControl(np.zeros((2, 4)), -1, 1)
        H = coil_field(u, basis)
        assert all(np.all(s.values == 0.0) for s in H.samples)

    def test_single_coil_identity(self, grid16):
        basis = CoilBasis(coil_basis_fields(grid16, "harmonics", 1))
        u = CoilControl(np.ones((1, 3)), -2, 2)
        H = coil_field(u, basis)
        for s in H.samples:
            assert np.array_equal(s.values, basis.h[0].values)

    def test_linearity(self, grid16, rng):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 3))
        a = rng.uniform(-1, 1, (3, 5))
        b = rng.uniform(-1, 1, (3, 5))
        Ha = coil_field(CoilControl(a, -9, 9), basis)
        Hb = coil_field(CoilControl(b, -9, 9), basis)
        Hs = coil_field(CoilControl(a + b, -9, 9), basis)
        for x, y, z in zip(Ha.samples, Hb.samples, Hs.samples):
            assert np.max(np.abs(x.values + y.values - z.values)) < 1e-14


class TestCoilGradient:
    def test_pure_regularization(self, grid16, params, solver):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u = CoilControl(np.linspace(-1, 1, 2 * (NS + 1)).reshape(2, NS + 1), -2, 2)
        init = initial_state(grid16, "constant_m")
        g, J, _ = coil_gradient(u, basis, init, T, DT, params, CostSpec(lam=0.7), solver)
        assert np.max(np.abs(g - 0.7 * u.u)) < 1e-12

    def test_chain_rule_identity(self, grid16, params, solver, rng):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u = CoilControl(rng.uniform(-0.5, 0.5, (2, NS + 1)), -2, 2)
        init = initial_state(grid16, "constant_m")
        cost = CostSpec(a3=1.0, lam=0.1,
                        M_d=smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN, amplitude=0.4))
        g, _, _ = coil_gradient(u, basis, init, T, DT, params, cost, solver)
        rep = reduced_gradient(coil_field(u, basis), init, T, DT, params, cost, solver)
        du = rng.uniform(-1, 1, (2, NS + 1))
        tw = time_weights(NS)
        pair_coil = float(np.sum(tw * DT * np.sum((g - cost.lam * u.u) * du, axis=0)))
        Cdu = coil_field(CoilControl(du, -9, 9), basis)
        pair_field = sum(wk * DT * mv.inner_l2(d, c)
                         for wk, d, c in zip(tw, rep.tracking.samples, Cdu.samples))
        assert abs(pair_coil - pair_field) <= 1e-8 * max(abs(pair_coil), 1e-12)

    def test_taylor_slope(self, grid16, params, rng):
        tight = PoissonSolver(grid16, tol=1e-12)
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u = CoilControl(rng.uniform(-0.5, 0.5, (2, NS + 1)), -2, 2)
        init = initial_state(grid16, "constant_m")
        cost = CostSpec(a3=1.0, lam=0.1,
                        M_d=smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN, amplitude=0.4))
        rows = coil_taylor_test(u, basis, [rng.uniform(-1, 1, u.u.shape)],
                                [1e-1, 1e-2, 1e-3, 1e-4], init, T, DT, params, cost, tight)
        assert 1.6 <= rows[0]["remainder_slope"] <= 2.4


class TestProjectBox:
    def test_example(self):
        u = np.array([-2.0, 0.5, 3.0])
        out = project_box(u, np.zeros(3), np.ones(3))
        assert np.array_equal(out, [0.0, 0.5, 1.0])

    def test_feasible_unchanged(self):
        u = np.array([[0.2, 0.8]])
        assert np.array_equal(project_box(u, 0.0, 1.0), u)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4),
           st.lists(st.floats(-100, 100), min_size=4, max_size=4))
    def test_idempotent_and_nonexpansive(self, uvals, vvals):
        a, b = -1.5, 2.5
        u = np.asarray(uvals)
        v = np.asarray(vvals)
        pu = project_box(u, a, b)
        pv = project_box(v, a, b)
        assert np.array_equal(project_box(pu, a, b), pu)
        assert np.all(np.abs(pu - pv) <= np.abs(u - v) + 1e-15)


class TestOptimizeCoils:
    def test_infeasible_zero_clamps_to_lower_bound(self, grid16, params, solver):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u0 = CoilControl(np.full((2, NS + 1), 1.6), 1.0, 2.0)
        init = initial_state(grid16, "constant_m")
        opts = OptimizerOptions(max_iter=20, grad_tol=1e-9)
        us, hist, _ = optimize_coils(u0, basis, init, T, DT, params, CostSpec(lam=0.5),
                                     opts, solver)
        assert np.allclose(us.u, 1.0, atol=1e-12)
        assert hist[-1]["fixedpoint_residual"] <= 1e-8

    def test_interior_zero_optimum(self, grid16, params, solver):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u0 = CoilControl(np.full((2, NS + 1), 0.37), -1.0, 1.0)
        init = initial_state(grid16, "constant_m")
        opts = OptimizerOptions(max_iter=25, grad_tol=1e-9)
        us, hist, _ = optimize_coils(u0, basis, init, T, DT, params, CostSpec(lam=0.5),
                                     opts, solver)
        assert np.max(np.abs(us.u)) <= 1e-8
        assert hist[-1]["fixedpoint_residual"] <= 1e-8

    def test_iterates_feasible_and_monotone(self, grid16, params, solver, rng):
        basis = CoilBasis(coil_basis_fields(grid16, "bumps", 2))
        u0 = CoilControl(np.zeros((2, NS + 1)), -1.5, 1.5)
        init = initial_state(grid16, "constant_m")
        cost = CostSpec(a3=1.0, lam=1e-2,
                        M_d=constant_m(grid16, (0.15, 0.0, 1.0), normalize=True))
        opts = OptimizerOptions(max_iter=12, grad_tol=1e-7)
        us, hist, vi = optimize_coils(u0, basis, init, T, DT, params, cost, opts, solver,
                                      vi_samples=50, rng=make_rng(3))
        Js = [h["J"] for h in hist]
        assert all(Js[i + 1] < Js[i] for i in range(len(Js) - 1))
        assert us.feasible
        assert vi >= -1e-6 * (1 + abs(Js[-1]))


class TestStabilityProbe:
    def test_equal_controls_exact_zero(self, grid16, params, solver, rng):
        H = smooth_random_control(grid16, rng, NS + 1, amplitude=0.3)
        init = initial_state(grid16, "smooth", amplitude=0.3)
        out = stability_probe(H, H, init, T, DT, params, solver)
        assert out["weak_lhs"] == 0.0
        assert out["strong_lhs"] == 0.0
        assert out["weak_ratio"] == 0.0

    def test_ratio_family_bounded(self, grid16, params, solver, rng):
        H1 = smooth_random_control(grid16, rng, NS + 1, amplitude=0.3)
        dirn = smooth_random_control(grid16, rng, NS + 1, amplitude=1.0)
        init = initial_state(grid16, "smooth", amplitude=0.3)
        ratios = []
        for eps in (1e-1, 1e-2, 1e-3):
            H2 = H1.axpy(eps, dirn)
            out = stability_probe(H1, H2, init, T, DT, params, solver)
            ratios.append(out["weak_ratio"])
        assert max(ratios) / min(ratios) < 3.0


class TestControlContainers:
    def test_field_control_validation(self, grid16):
        with pytest.raises(mv.StructuralError):
            FieldControl([])
        with pytest.raises(mv.StructuralError):
            FieldControl([mv.zero_field(grid16, 2, mv.BC_NEUMANN)])

    def test_coil_bounds_validation(self):
        with pytest.raises(mv.StructuralError):
            CoilControl(np.zeros((1, 3)), 1.0, -1.0)

    def test_h1_inner_symmetric(self, grid16, rng):
        a = smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN)
        b = smooth_random_field(grid16, rng, 3, mv.BC_NEUMANN)
        assert h1_inner(a, b) == pytest.approx(h1_inner(b, a), rel=1e-12)
        assert h1_inner(a, a) >= mv.inner_l2(a, a)
