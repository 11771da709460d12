import math

import numpy as np
import pytest

from fdelab import (
    CflViolation,
    InvalidExponent,
    ModelParams,
    ScalarField,
    SolverConfig,
    SpaceTimeGrid,
    StructureField,
    StructureKind,
    barenblatt,
    solve,
    weak_residual,
)
from fdelab.solver import (
    barenblatt_exponents,
    barenblatt_field,
    barenblatt_trace,
    explicit_cfl_limit,
)


class TestBarenblatt:
    def test_exponents_reference_case(self, params2d):
        assert barenblatt_exponents(params2d) == pytest.approx((2.0, 1.0, 0.5))

    def test_center_value(self, params2d):
        # at x = 0 the profile is t^-alpha C^(-1/(1-m))
        C = 0.7
        for t in (0.5, 1.0, 2.0):
            val = barenblatt(params2d, C, np.zeros((2, 1)), t)[0]
            assert val == pytest.approx(t**-2 * C**-2, rel=1e-14)

    def test_pde_residual_pointwise(self, params2d):
        # plug the profile into u_t - div(grad u^m), high-order differences
        C, d = 1.0, 1e-2
        x0, y0, t0 = 0.37, -0.21, 1.3

        def u(x, y, t):
            return barenblatt(params2d, C, np.stack([np.asarray(x, float),
                                                     np.asarray(y, float)]), t)

        def um(x, y, t):
            return u(x, y, t) ** params2d.m

        def d1(f, h):
            return (-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h)

        def d2(f, h):
            return (-f(2) + 16 * f(1) - 30 * f(0) + 16 * f(-1) - f(-2)) / (12 * h**2)

        ut = d1(lambda k: u(x0, y0, t0 + k * d), d)
        uxx = d2(lambda k: um(x0 + k * d, y0, t0), d)
        uyy = d2(lambda k: um(x0, y0 + k * d, t0), d)
        assert abs(ut - uxx - uyy) < 1e-6

    def test_mass_conservation(self, params2d):
        C = 0.25
        g = SpaceTimeGrid(box=[(-48, 48)] * 2, t_range=(1.0, 2.0),
                          shape=(481, 481), nt=2)
        m1 = barenblatt(params2d, C, g.coords, 1.0).sum() * g.h**2
        m2 = barenblatt(params2d, C, g.coords, 2.0).sum() * g.h**2
        assert abs(m1 - m2) / m1 < 1e-3

    def test_invalid_exponent(self):
        p = ModelParams(n=3, m=0.25)  # n(m-1)+2 = -0.25
        with pytest.raises(InvalidExponent):
            barenblatt_exponents(p)


class TestStructureField:
    def test_identity_bounds(self, params2d):
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 1), shape=(9, 9), nt=3)
        lo, hi = StructureField().check_structure(g, np.random.default_rng(0))
        assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)

    def test_diagonal_bounds_sampled(self):
        nu, L = 0.5, 2.0
        A = StructureField(
            kind=StructureKind.DIAGONAL_ANISOTROPIC,
            coeffs=(lambda x, y, t: 1.0 + 0.5 * np.sin(x + t),
                    lambda x, y, t: 1.5 + 0.4 * np.cos(y - t)),
            nu=nu, L_up=L)
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 1), shape=(9, 9), nt=3)
        lo, hi = A.check_structure(g, np.random.default_rng(1), n_samples=10_000)
        assert nu <= lo and hi <= L


class TestStep:
    def test_constant_is_exact_both_schemes(self, params2d):
        for scheme in ("explicit", "semi_implicit"):
            g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 0.005),
                              shape=(17, 17), nt=6)
            cfg = SolverConfig(scheme=scheme,
                               boundary=lambda x, y, t: np.full_like(x, 3.0))
            res = solve(g, np.full(g.shape, 3.0), None, StructureField(), cfg,
                        params2d.m)
            assert np.abs(res.u.values - 3.0).max() < 1e-10

    def test_pure_source_one_explicit_step(self, params2d):
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 1e-8), shape=(9, 9), nt=2)
        f = ScalarField.constant(g, 1.0)
        cfg = SolverConfig(scheme="explicit", u_floor=1e-3)
        res = solve(g, np.zeros(g.shape), f, StructureField(), cfg, params2d.m)
        assert res.u.values[1][1:-1, 1:-1] == pytest.approx(g.dt, rel=1e-12)

    def test_cfl_violation(self, params2d):
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 10.0), shape=(17, 17), nt=3)
        with pytest.raises(CflViolation):
            solve(g, np.full(g.shape, 1.0), None, StructureField(),
                  SolverConfig(scheme="explicit"), params2d.m)

    def test_cfl_limit_uses_small_values(self, params2d):
        # diffusivity m u^(m-1) grows as u drops: the slice minimum governs
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 1), shape=(17, 17), nt=3)
        cfg = SolverConfig(scheme="explicit", u_floor=1e-6)
        hi = explicit_cfl_limit(g, np.full(g.shape, 4.0), params2d.m, cfg)
        lo = explicit_cfl_limit(g, np.full(g.shape, 0.01), params2d.m, cfg)
        assert lo < hi


class TestSolve:
    def test_zero_data_stays_zero(self, params2d):
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 0.01), shape=(17, 17), nt=9)
        res = solve(g, np.zeros(g.shape), None, StructureField(),
                    SolverConfig(scheme="semi_implicit"), params2d.m)
        assert res.u.values.max() == 0.0

    def test_spatially_constant_invariance(self, params2d):
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 0.01), shape=(17, 17), nt=9)
        cfg = SolverConfig(scheme="explicit",
                           boundary=lambda x, y, t: np.full_like(x, 2.0))
        res = solve(g, np.full(g.shape, 2.0), None, StructureField(), cfg, params2d.m)
        spread = res.u.values.max(axis=(1, 2)) - res.u.values.min(axis=(1, 2))
        assert spread.max() < 1e-13

    def test_source_monotonicity(self, params2d):
        # doubling f never decreases the explicit solution (monotone data)
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 0.002), shape=(17, 17), nt=9)
        bump = ScalarField.from_function(
            g, lambda x, y, t: np.exp(-(x**2 + y**2) / 0.2), nonneg=True)
        double = ScalarField(g, 2.0 * bump.values, nonneg=True)
        cfg = SolverConfig(scheme="explicit",
                           boundary=lambda x, y, t: np.full_like(x, 1.0))
        u1 = solve(g, np.full(g.shape, 1.0), bump, StructureField(), cfg, params2d.m)
        u2 = solve(g, np.full(g.shape, 1.0), double, StructureField(), cfg, params2d.m)
        assert (u2.u.values >= u1.u.values - 1e-14).all()

    def test_nonnegativity_and_clamp_rate(self, params2d):
        g = SpaceTimeGrid(box=[(-4, 4)] * 2, t_range=(1.0, 1.5), shape=(33, 33), nt=33)
        cfg = SolverConfig(scheme="semi_implicit",
                           boundary=barenblatt_trace(params2d, 1.0))
        u0 = barenblatt(params2d, 1.0, g.coords, g.times[0])
        res = solve(g, u0, None, StructureField(), cfg, params2d.m)
        assert res.u.values.min() >= 0.0
        assert res.total_clamped < 0.001 * res.u.grid.num_nodes


class TestWeakResidual:
    def test_exact_solution_refines_with_order_one(self, params2d):
        vals = []
        for shape in (17, 33, 65):
            g = SpaceTimeGrid(box=[(-4, 4)] * 2, t_range=(1.0, 1.5),
                              shape=(shape, shape), nt=shape)
            u = barenblatt_field(g, params2d, 1.0)
            vals.append(weak_residual(u, None, StructureField(), params2d.m))
        orders = [math.log2(vals[i] / vals[i + 1]) for i in range(2)]
        assert min(orders) >= 1.0

    def test_constant_residual_vanishes_with_resolution(self, params2d):
        g = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0, 1), shape=(33, 33), nt=65)
        r = weak_residual(ScalarField.constant(g, 2.0), None, StructureField(),
                          params2d.m)
        assert r < 1e-4

    def test_solver_output_close_to_sampled_exact(self, params2d):
        g = SpaceTimeGrid(box=[(-4, 4)] * 2, t_range=(1.0, 1.5), shape=(33, 33), nt=33)
        cfg = SolverConfig(scheme="semi_implicit",
                           boundary=barenblatt_trace(params2d, 1.0))
        u0 = barenblatt(params2d, 1.0, g.coords, g.times[0])
        res = solve(g, u0, None, StructureField(), cfg, params2d.m)
        r_solver = weak_residual(res.u, None, StructureField(), params2d.m)
        r_exact = weak_residual(barenblatt_field(g, params2d, 1.0), None,
                                StructureField(), params2d.m)
        assert r_solver <= 3.0 * r_exact
