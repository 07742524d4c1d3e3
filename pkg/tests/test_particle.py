import numpy as np
import pytest

from roughfilter.errors import ConfigurationError
from roughfilter.models import bounded_nonlinear
from roughfilter.particle import (ParticleEnsemble, Perturbation, mc_stderr,
                                  perturb_driver, robustness_probe, run_filter,
                                  write_filter_csv)
from roughfilter.roughpath import geometrify
from roughfilter.rsde import solve_signal
from roughfilter.testfuncs import TestFunction as TF
from roughfilter.testfuncs import gauss_bump, library, one

from helpers import ito_brownian, scalar_coeffs


def _x0(m, dim=1, spread=0.5, seed_offset=0):
    def sample(mm, seed):
        from roughfilter import rng
        return spread * rng.normal_block(seed + seed_offset, ("x0",), (mm, dim))
    return sample


def test_single_particle_tracks_signal_path():
    rp = ito_brownian(0, 64)
    cs = scalar_coeffs(b_lin=-1.0, sigma=0.8, f=0.4)  # h = 0
    x0 = np.array([[0.7]])
    ens = run_filter(cs, rp, 1, 17, library(1), x0)
    sol = solve_signal(cs, rp, np.array([0.7]), seed=17)
    for tf in library(1):
        np.testing.assert_array_equal(ens.mu(tf), tf.fn(sol.states))


def test_normalized_mass_is_one_exactly():
    scn = bounded_nonlinear()
    rp = ito_brownian(1, 64)
    ens = run_filter(scn.coeffs, rp, 256, 1, library(1), scn.init)
    np.testing.assert_array_equal(ens.sigma("one"), np.ones(65))
    assert np.all(ens.mass() > 0)


def test_unweighted_mass_is_one_exactly():
    cs = scalar_coeffs(b_lin=-1.0, sigma=1.0)  # h = 0
    rp = ito_brownian(2, 32)
    ens = run_filter(cs, rp, 128, 2, [one(1)], np.zeros((128, 1)))
    np.testing.assert_array_equal(ens.mu("one"), np.ones(33))


def test_empirical_linearity():
    scn = bounded_nonlinear()
    rp = ito_brownian(3, 32)
    phis = library(1)
    a, b = 2.0, -0.3
    p0, p1 = phis[0], phis[1]
    combo = TF(
        name="combo", dim=1,
        fn=lambda x: a * p0.fn(x) + b * p1.fn(x),
        grad=lambda x: a * p0.grad(x) + b * p1.grad(x),
        hess=lambda x: a * p0.hess(x) + b * p1.hess(x))
    ens = run_filter(scn.coeffs, rp, 512, 3, [p0, p1, combo], scn.init)
    np.testing.assert_allclose(ens.mu("combo"),
                               a * ens.mu(p0) + b * ens.mu(p1),
                               rtol=1e-12, atol=1e-14)


def test_monotonicity_with_positive_weights():
    cs = scalar_coeffs(b_lin=-0.5, sigma=1.0)  # h = 0, weights stay 1
    rp = ito_brownian(4, 32)
    ens = run_filter(cs, rp, 256, 4, [gauss_bump(1), one(1)],
                     np.zeros((256, 1)))
    assert np.all(ens.mu(gauss_bump(1)) <= ens.mu("one") + 1e-15)


def test_stderr_scaling_and_guards():
    scn = bounded_nonlinear()
    rp = ito_brownian(5, 64)
    tf = library(1)[0]
    se = []
    for m in (2000, 4000):
        ens = run_filter(scn.coeffs, rp, m, 5, [tf], scn.init)
        se.append(ens.stderr(tf, 64))
    ratio = se[0] / se[1]
    assert abs(ratio - np.sqrt(2)) <= 0.2 * np.sqrt(2)

    tiny = run_filter(scn.coeffs, rp, 1, 5, [tf], scn.init)
    with pytest.raises(ConfigurationError):
        tiny.stderr(tf, 64)
    with pytest.raises(ConfigurationError):
        run_filter(scn.coeffs, rp, 0, 5, [tf], scn.init)


def test_stderr_coverage_over_seeds():
    scn = bounded_nonlinear()
    rp = ito_brownian(6, 32)
    tf = library(1)[0]
    n_seeds, m = 50, 400
    vals, ses = [], []
    for s in range(n_seeds):
        ens = run_filter(scn.coeffs, rp, m, 100 + s, [tf], scn.init)
        vals.append(ens.mu(tf, 32))
        ses.append(ens.stderr(tf, 32))
    vals = np.array(vals)
    ses = np.array(ses)
    center = vals.mean()
    rate = np.mean(np.abs(vals - center) <= ses)
    assert 0.5 <= rate <= 0.86  # ~68% with binomial slack at 50 seeds


def test_mu_determinism_and_seed_sensitivity():
    scn = bounded_nonlinear()
    rp = ito_brownian(7, 32)
    tf = library(1)[1]
    a = run_filter(scn.coeffs, rp, 128, 7, [tf], scn.init)
    b = run_filter(scn.coeffs, rp, 128, 7, [tf], scn.init)
    np.testing.assert_array_equal(a.mu(tf), b.mu(tf))
    c = run_filter(scn.coeffs, rp, 128, 8, [tf], scn.init)
    assert not np.array_equal(a.mu(tf), c.mu(tf))


def test_scan_reproduces_cached_moments():
    scn = bounded_nonlinear()
    rp = ito_brownian(8, 16)
    tf = library(1)[2]
    ens = run_filter(scn.coeffs, rp, 64, 8, [tf], scn.init)
    seen = np.empty(17)

    def obs(i, x, z, cache):
        from roughfilter import rng
        seen[i] = rng.tree_mean(tf.fn(x) * z)

    ens.scan([obs])
    np.testing.assert_array_equal(seen, ens.mu(tf))


def test_perturb_driver_zero_shift_is_identity():
    rp = ito_brownian(9, 32)
    same = perturb_driver(rp, Perturbation("area_shift", 0.0))
    np.testing.assert_array_equal(same.second, rp.second)
    np.testing.assert_array_equal(same.bracket, rp.bracket)
    geo = perturb_driver(geometrify(rp), Perturbation("geometrify"))
    np.testing.assert_array_equal(geo.second, geometrify(rp).second)
    with pytest.raises(ConfigurationError):
        perturb_driver(rp, Perturbation("smooth_flip"))
    assert Perturbation("area_shift", 0.25).ident == "area_shift[0.25]"


def test_robustness_probe_zero_perturbation_vanishes():
    scn = bounded_nonlinear()
    rp = ito_brownian(10, 32)
    phis = library(1)[:2]
    rep = robustness_probe(scn.coeffs, rp,
                           [Perturbation("area_shift", 0.0),
                            Perturbation("area_shift", 0.1)],
                           phis, 256, 10, scn.init)
    zero_row = rep.rows[0]
    assert zero_row.rho == 0.0
    assert all(v == 0.0 for v in zero_row.diffs.values())
    assert rep.rows[1].rho > 0
    csv_rows = rep.to_csv_rows()
    assert csv_rows[0] == ["perturb_id", "rho_alpha", "diff", "ratio"]


def test_store_modes():
    scn = bounded_nonlinear()
    rp = ito_brownian(11, 16)
    small = run_filter(scn.coeffs, rp, 8, 11, [one(1)], scn.init)
    assert small.stores_paths  # tiny run fits the auto budget
    off = run_filter(scn.coeffs, rp, 8, 11, [one(1)], scn.init, store=False)
    assert not off.stores_paths


def test_mc_stderr_constant_integrand_is_zero():
    cs = scalar_coeffs()  # frozen state, h = 0
    rp = ito_brownian(12, 8)
    ens = run_filter(cs, rp, 16, 12, [one(1)], np.zeros((16, 1)))
    assert mc_stderr(ens, "one", 8) == 0.0


def test_write_filter_csv_layout(tmp_path):
    scn = bounded_nonlinear()
    rp = ito_brownian(13, 8)
    ens = run_filter(scn.coeffs, rp, 32, 13, library(1)[:1], scn.init)
    out = tmp_path / "filter.csv"
    write_filter_csv(str(out), ens)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "t,phi_name,mu,sigma,stderr"
    # one block of steps+1 rows per phi, library member plus "one"
    assert len(lines) == 1 + 2 * 9
