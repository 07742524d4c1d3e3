"""Reference-measure simulation, coordinate reduction, the scalar
Kalman oracle, conditional Monte Carlo, and the randomization bridge."""

import dataclasses

import numpy as np
import pytest

from helpers import scalar_coeffs, ito_brownian
from roughfilter import rng
from roughfilter.classical import (ClassicalScenario, InitialLaw,
                                   LinearGaussianParams, PrimitiveSystem,
                                   conditional_mc_filter, kalman_bucy,
                                   primitives_from_reduced, probe_k,
                                   randomization_harness,
                                   reduce_to_nondegenerate,
                                   riccati_fixed_point, simulate_system)
from roughfilter.errors import (CapabilityError, ConfigurationError,
                                DimensionError)
from roughfilter.models import (bounded_nonlinear, degenerate_rank1,
                                invertible_k, lg_uncorrelated)
from roughfilter.particle import run_filter
from roughfilter.roughpath import TimeGrid, lift_piecewise_linear
from roughfilter.rsde import propagate
from roughfilter.testfuncs import clipped_identity, library, one


def wrap_scalar(coeffs, mean=0.1, spread=0.2):
    """Classical scenario around a reduced scalar coefficient set with a
    unit observation matrix."""
    prim = primitives_from_reduced(coeffs, np.eye(1))
    init = InitialLaw(np.array([mean]), np.array([[spread]]))
    return ClassicalScenario(name=coeffs.meta["name"], prim=prim,
                             coeffs=coeffs, init=init)


class TestSimulate:
    def test_k_zero_forces_silent_observation(self):
        coeffs = scalar_coeffs(b=-0.3, sigma=0.4, h=0.7, name="kzero")
        prim = primitives_from_reduced(coeffs, np.eye(1))
        prim = dataclasses.replace(prim, k=lambda t, y: np.zeros((1, 1)))
        scn = ClassicalScenario(name="kzero", prim=prim, coeffs=coeffs,
                                init=InitialLaw(np.array([0.2]),
                                                np.array([[0.3]])))
        s = simulate_system(scn, TimeGrid(1.0, 32), 4, n_paths=3)
        assert (s.obs == 0.0).all()
        assert (s.weights == 1.0).all()

    def test_weight_is_mean_one_martingale(self):
        sc = bounded_nonlinear()
        s = simulate_system(sc, TimeGrid(1.0, 128), 9, n_paths=10_000)
        zt = s.weights[:, -1]
        se = zt.std(ddof=1) / np.sqrt(zt.size)
        assert abs(zt.mean() - 1.0) <= 3.0 * se

    def test_left_point_euler_replay(self):
        sc = bounded_nonlinear()
        grid = TimeGrid(1.0, 32)
        seed, m = 14, 5
        s = simulate_system(sc, grid, seed, n_paths=m)
        n, dt = grid.steps, grid.dt
        sq = np.sqrt(dt)
        dw = rng.normal_block(seed, ("cl_w",), (m, n, 1)) * sq
        db = rng.normal_block(seed, ("cl_b",), (m, n, 1)) * sq
        x = sc.init.sample(m, seed)
        y = np.zeros((m, 1))
        z = np.ones(m)
        k = np.eye(1)
        for i in range(n):
            assert np.array_equal(s.states[:, i], x)
            assert np.array_equal(s.obs[:, i], y)
            assert np.array_equal(s.weights[:, i], z)
            bv, sv, fv, hv = sc.pathwise_vals(grid.nodes[i], x, y)
            dy = dw[:, i] @ k.T
            x = x + bv * dt + np.einsum("pib,pb->pi", sv, db[:, i]) \
                + np.einsum("pil,pl->pi", fv, dy)
            z = z * (1.0 + np.einsum("pl,pl->p", hv, dy))
            y = y + dy
        assert np.array_equal(s.states[:, n], x)
        assert np.array_equal(s.weights[:, n], z)

    def test_f_zero_decouples_from_observation(self):
        coeffs = scalar_coeffs(b=-0.5, sigma=0.4, h=0.8, name="fzero")
        scn = wrap_scalar(coeffs, mean=0.1, spread=0.25)
        grid = TimeGrid(1.0, 256)
        # scaling the observation matrix must not move the signal at all
        prim2 = dataclasses.replace(scn.prim, k=lambda t, y: 2.0 * np.eye(1))
        scn2 = dataclasses.replace(scn, prim=prim2)
        a = simulate_system(scn, grid, 12, n_paths=64)
        b = simulate_system(scn2, grid, 12, n_paths=64)
        assert np.array_equal(a.states, b.states)
        assert not np.array_equal(a.obs, b.obs)
        # and the law of X_T matches the signal solver on a flat driver
        s = simulate_system(scn, grid, 12, n_paths=20_000)
        xt = s.states[:, -1, 0]
        rp0 = lift_piecewise_linear(grid, np.zeros((grid.steps + 1, 1)), 0.45)
        res = propagate(coeffs, rp0, scn.init.sample(20_000, 13), 13,
                        with_weights=False)
        yt = res.final_states[:, 0]
        for moment in (1, 2):
            va, vb = xt ** moment, yt ** moment
            budget = 3.0 * np.hypot(va.std(ddof=1), vb.std(ddof=1)) \
                / np.sqrt(20_000) + 0.5 * grid.dt
            assert abs(va.mean() - vb.mean()) <= budget


class TestReduce:
    def test_identity_matrix_reduction(self):
        sc = bounded_nonlinear()
        red = reduce_to_nondegenerate(sc.prim)
        x = np.linspace(-2.0, 2.0, 7)[:, None]
        y = np.array([0.4])
        t = 0.3
        assert np.array_equal(red.f(t, x, y), sc.coeffs.f(t, x, y))
        assert np.array_equal(red.h(t, x, y), sc.coeffs.h(t, x, y))
        assert np.array_equal(red.dyf(t, x, y), sc.coeffs.dyf(t, x, y))
        assert np.array_equal(red.dxf(t, x, y), sc.coeffs.dxf(t, x, y))
        assert np.array_equal(red.dxh(t, x, y), sc.coeffs.dxh(t, x, y))
        # b is rebuilt as (b + f h) - f h, exact only up to rounding
        assert np.abs(red.b(t, x, y) - sc.coeffs.b(t, x, y)).max() < 1e-14

    def test_scalar_constants(self):
        def const2(t, x, y):
            return np.full((x.shape[0], 1, 1), 2.0)

        def const3(t, x, y):
            return np.full((x.shape[0], 1), 3.0)

        def zero3(t, x, y):
            return np.zeros((x.shape[0], 1, 1, 1))

        def zero2(t, x, y):
            return np.zeros((x.shape[0], 1, 1))

        prim = PrimitiveSystem(
            dim_x=1, dim_b=1, dim_y=1, dim_w=1,
            bbar=lambda t, x, y: np.zeros((x.shape[0], 1)),
            sigma=lambda t, x, y: np.full((x.shape[0], 1, 1), 1.0),
            fbar=const2, h2=const3, dxfbar=zero3, dyfbar=zero3,
            dxh2=zero2, dyh2=zero2, k=lambda t, y: np.array([[2.0]]),
            k_is_constant=True)
        red = reduce_to_nondegenerate(prim)
        x = np.array([[0.7]])
        y = np.zeros(1)
        assert red.f(0.1, x, y)[0, 0, 0] == 1.0
        assert red.h(0.1, x, y)[0, 0] == 1.5

    def test_reduction_matches_direct_pipeline(self):
        sc = bounded_nonlinear()
        red = reduce_to_nondegenerate(sc.prim)
        rp = ito_brownian(5, 64)
        e1 = run_filter(sc.coeffs, rp, 400, 21, library(1), sc.init)
        e2 = run_filter(red, rp, 400, 21, library(1), sc.init)
        worst = max(np.abs(e1.mu(tf) - e2.mu(tf)).max() for tf in library(1))
        assert worst < 1e-12

    def test_derivative_fields_match_finite_differences(self):
        red = invertible_k().coeffs
        gen = rng.generator(123, "fd")
        step = 1e-5
        worst = 0.0
        for _ in range(100):
            t = float(gen.uniform(0, 1))
            x = gen.standard_normal((1, 1)) * 1.2
            y = gen.standard_normal(2) * 1.2
            for e in range(2):
                dy = np.zeros(2)
                dy[e] = step
                fd = (red.f(t, x, y + dy) - red.f(t, x, y - dy)) / (2 * step)
                worst = max(worst,
                            float(np.abs(fd - red.dyf(t, x, y)[..., e]).max()))
                fdh = (red.h(t, x, y + dy) - red.h(t, x, y - dy)) / (2 * step)
                worst = max(worst,
                            float(np.abs(fdh - red.dyh(t, x, y)[..., e]).max()))
            dx = np.array([[step]])
            fdx = (red.f(t, x + dx, y) - red.f(t, x - dx, y)) / (2 * step)
            worst = max(worst,
                        float(np.abs(fdx - red.dxf(t, x, y)[..., 0]).max()))
            fdxh = (red.h(t, x + dx, y) - red.h(t, x - dx, y)) / (2 * step)
            worst = max(worst,
                        float(np.abs(fdxh - red.dxh(t, x, y)[..., 0]).max()))
        assert worst <= 1e-6

    def test_singular_k_reports_location(self):
        prim = degenerate_rank1().prim
        with pytest.raises(ConfigurationError, match="singular at probe t="):
            probe_k(prim)
        with pytest.raises(ConfigurationError, match="singular at probe"):
            reduce_to_nondegenerate(prim)
        skew = dataclasses.replace(prim, dim_w=1,
                                   k=lambda t, y: np.zeros((2, 1)))
        with pytest.raises(ConfigurationError, match="square"):
            probe_k(skew)

    def test_probe_reports_conditioning(self):
        rep = probe_k(invertible_k().prim)
        assert rep.n_probes == 50
        assert 0.7 < rep.min_singular_value < 0.9
        assert 1.2 < rep.max_condition < 1.5


class TestKalman:
    def test_riccati_fixed_point_closed_forms(self):
        p = LinearGaussianParams(a=-1, sigma=1, hmat=1, k=1, m0=0, p0=0.5)
        assert abs(riccati_fixed_point(p) - (np.sqrt(2) - 1)) < 1e-15
        p0 = LinearGaussianParams(a=-1, sigma=1, hmat=0, k=1, m0=0, p0=0.5)
        assert riccati_fixed_point(p0) == 0.5
        unstable = LinearGaussianParams(a=0.5, sigma=1, hmat=0, k=1,
                                        m0=0, p0=0.5)
        with pytest.raises(ConfigurationError):
            riccati_fixed_point(unstable)

    def test_variance_reaches_steady_state(self):
        p = LinearGaussianParams(a=-1, sigma=1, hmat=1, k=1, m0=0, p0=0.5)
        grid = TimeGrid(10.0, 2000)
        kb = kalman_bucy(p, grid, np.zeros(grid.steps + 1))
        assert abs(kb.var[-1] - (np.sqrt(2) - 1)) <= 1e-4

    def test_zero_noise_collapse(self):
        p = LinearGaussianParams(a=-1.0, sigma=0.0, hmat=1, k=1,
                                 m0=0.7, p0=0.0)
        grid = TimeGrid(1.0, 128)
        y = np.cumsum(np.r_[0.0, rng.normal_block(3, ("y",), (128,))
                            * np.sqrt(grid.dt)])
        kb = kalman_bucy(p, grid, y)
        assert (kb.var == 0.0).all()
        mean = np.empty(129)
        mean[0] = 0.7
        for i in range(128):
            mean[i + 1] = mean[i] + (-1.0) * mean[i] * grid.dt
        assert np.array_equal(kb.mean, mean)

    def test_variance_ignores_observation(self):
        scn = lg_uncorrelated()
        grid = TimeGrid(2.0, 512)
        ya = simulate_system(scn, grid, 31).obs[0]
        yb = simulate_system(scn, grid, 32).obs[0]
        ka = kalman_bucy(scn.linear_gaussian, grid, ya)
        kb = kalman_bucy(scn.linear_gaussian, grid, yb)
        assert np.array_equal(ka.var, kb.var)
        assert not np.array_equal(ka.mean, kb.mean)

    def test_conditional_mc_tracks_kalman_mean(self):
        scn = lg_uncorrelated()
        grid = TimeGrid(2.0, 512)
        y = simulate_system(scn, grid, 31).obs[0]
        kb = kalman_bucy(scn.linear_gaussian, grid, y)
        tf = clipped_identity(1)
        cmc = conditional_mc_filter(scn, grid, y, [tf], 20_000, 44)
        sig = cmc.sigma(tf.name)
        sse = cmc.sigma_stderr(tf.name)
        for i in np.linspace(0, grid.steps, 9).astype(int)[1:]:
            assert abs(sig[i] - kb.mean[i]) <= 3.0 * sse[i] + 1e-2


class TestConditionalMC:
    def test_silent_sensor_constant_mass(self):
        coeffs = scalar_coeffs(b=-0.5, sigma=0.4, name="h0")
        scn = wrap_scalar(coeffs)
        grid = TimeGrid(2.0, 512)
        y = simulate_system(lg_uncorrelated(), grid, 31).obs[0]
        res = conditional_mc_filter(scn, grid, y, [one(1)], 512, 7)
        assert (res.mu("one") == 1.0).all()
        assert (res.sigma("one") == 1.0).all()

    def test_validation_errors(self):
        grid = TimeGrid(1.0, 32)
        y = np.zeros(grid.steps + 1)
        with pytest.raises(CapabilityError):
            conditional_mc_filter(degenerate_rank1(), grid, np.zeros((33, 2)),
                                  [one(1)], 16, 1)
        scn = wrap_scalar(scalar_coeffs(b=-0.2, name="v"))
        with pytest.raises(ConfigurationError):
            conditional_mc_filter(scn, grid, y, [one(1)], 16, 1, out_stride=5)
        with pytest.raises(DimensionError):
            conditional_mc_filter(scn, grid, y[:-1], [one(1)], 16, 1)


class TestRandomization:
    def test_uncorrelated_silent_sensor_matches(self):
        coeffs = scalar_coeffs(b=0.1, b_lin=-0.5, sigma=0.4, name="h0")
        scn = wrap_scalar(coeffs)
        rep = randomization_harness(scn, TimeGrid(1.0, 64), 16, 2000, 17)
        assert rep.ok
        # with a silent sensor both sides are plain B-averages of phi(X);
        # the coupled runs differ only by the coarse/fine scheme gap
        assert max(r.diff for r in rep.rows_mu) <= rep.allowance
        assert max(r.diff for r in rep.rows_sigma) <= rep.allowance

    def test_bounded_model_matches(self):
        sc = bounded_nonlinear()
        rep = randomization_harness(sc, TimeGrid(1.0, 128), 16, 4000, 18)
        assert rep.ok
        assert all(r.ok for r in rep.rows_mu)
        assert all(r.ok for r in rep.rows_sigma)

    def test_gap_shrinks_with_refinement(self):
        sc = bounded_nonlinear()
        r1 = randomization_harness(sc, TimeGrid(1.0, 32), 16, 3000, 19)
        r2 = randomization_harness(sc, TimeGrid(1.0, 64), 32, 3000, 19)
        w1 = max(r.diff for r in r1.rows_mu)
        w2 = max(r.diff for r in r2.rows_mu)
        assert w2 < w1

    def test_report_dict_shape(self):
        coeffs = scalar_coeffs(b=-0.3, sigma=0.3, name="h0")
        scn = wrap_scalar(coeffs)
        rep = randomization_harness(scn, TimeGrid(1.0, 16), 16, 200, 5,
                                    phis=[one(1)])
        d = rep.as_dict()
        assert set(d) == {"allowance", "ok", "mu", "sigma"}
        row = d["mu"][0]
        assert set(row) == {"phi", "node", "t", "rough", "reference",
                            "diff", "budget", "ok"}
        assert rep.worst() <= 0.0
