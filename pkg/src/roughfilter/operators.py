r"""Filtering operators and Davie-expansion residual certification.

With qv = bracket derivative of the driver, the drift generator is

    A phi = sum_i bb^i d_i phi + 1/2 sum_ij aa^ij d2_ij phi,
    aa    = sigma sigma^T + f qv f^T,     bb = b + f qv h,

and the observation-direction operators are

    Gamma_k phi   = sum_i f^i_k d_i phi + h_k phi,
    Gamma'_ke phi = sum_i dyf[i,k,e] d_i phi + dyh[k,e] phi.

Residual ladders test the local expansions over windows [s, t]:

  unnormalized:  mu_t(phi) - mu_s(phi)
                 - sum_{r in [s,t)} mu_r(A phi) dt
                 - mu_s(Gamma_k phi) dY^k
                 - mu_s((Gamma_k Gamma_l + Gamma'_{lk') phi) YY^{kl}  = O(|t-s|^{3 alpha})

  normalized:    same shape with the compensated coefficients Phi, Phi'
                 and drift sigma_r(A phi) - Phi_k qv^{kl} sigma_r(h_l).

Each window's residual is an average of per-particle residual values,
whose spread across particles gives the Monte Carlo noise floor; only
window sizes whose max residual clears a multiple of the extreme-value
level sqrt(2 ln n_windows) times the floor enter the log-log fit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import rng
from .coeffs import CoefficientSet
from .errors import ConfigurationError, DimensionError
from .particle import ParticleEnsemble
from .roughpath import RoughPath, chen_extend
from .rsde import EvalCache, eval_coeffs
from .testfuncs import TestFunction, library, one

FIT_THRESHOLD = 3.0
MIN_USABLE_SPANS = 3


@dataclass(frozen=True)
class OperatorContext:
    """Coefficients paired with a driver (for the bracket derivative)."""

    coeffs: CoefficientSet
    rp: RoughPath

    def qv(self, i: int) -> np.ndarray:
        return self.rp.bracket_derivative.values[i]

    def eval(self, i: int, x: np.ndarray) -> EvalCache:
        return eval_coeffs(self.coeffs, i, self.rp.grid.nodes[i], x, self.rp.first[i])


def _tf_arrays(tf: TestFunction, x: np.ndarray):
    return tf.fn(x), tf.grad(x), tf.hess(x)


def abar_vals(cache: EvalCache, qv: np.ndarray) -> np.ndarray:
    out = np.einsum("mib,mjb->mij", cache.sigma, cache.sigma)
    out += np.einsum("mik,kl,mjl->mij", cache.f, qv, cache.f)
    return out


def bbar_vals(cache: EvalCache, qv: np.ndarray) -> np.ndarray:
    return cache.b + np.einsum("mik,kl,ml->mi", cache.f, qv, cache.h)


def a_vals(cache: EvalCache, qv: np.ndarray, grad: np.ndarray,
           hess: np.ndarray) -> np.ndarray:
    out = np.einsum("mi,mi->m", bbar_vals(cache, qv), grad)
    out += 0.5 * np.einsum("mij,mij->m", abar_vals(cache, qv), hess)
    return out


def gamma_vals(cache: EvalCache, vals: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.einsum("mik,mi->mk", cache.f, grad) + cache.h * vals[..., None]


def gamma_prime_vals(cache: EvalCache, vals: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.einsum("mike,mi->mke", cache.dyf, grad) \
        + cache.dyh * vals[..., None, None]


def gamma_gamma_vals(cache: EvalCache, vals: np.ndarray, grad: np.ndarray,
                     hess: np.ndarray) -> np.ndarray:
    """Composition matrix [k, l] = Gamma_k Gamma_l phi, shape (M, d, d)."""
    f, h = cache.f, cache.h
    out = np.einsum("mjk,milj,mi->mkl", f, cache.dxf, grad)
    out += np.einsum("mjk,mil,mij->mkl", f, f, hess)
    out += np.einsum("mjk,mlj,m->mkl", f, cache.dxh, vals)
    out += np.einsum("mjk,ml,mj->mkl", f, h, grad)
    out += np.einsum("mk,mil,mi->mkl", h, f, grad)
    out += np.einsum("mk,ml,m->mkl", h, h, vals)
    return out


def gamma_second_vals(cache: EvalCache, vals: np.ndarray, grad: np.ndarray,
                      hess: np.ndarray) -> np.ndarray:
    """Forward second-order coefficient [k, l] of YY^{kl}:
    Gamma_k Gamma_l phi + Gamma'_{lk} phi."""
    gp = gamma_prime_vals(cache, vals, grad)
    return gamma_gamma_vals(cache, vals, grad, hess) + gp.transpose(0, 2, 1)


def gamma_second_backward_vals(cache: EvalCache, vals: np.ndarray, grad: np.ndarray,
                               hess: np.ndarray) -> np.ndarray:
    """Backward second-order coefficient [k, l] of YY^{kl}:
    Gamma_k Gamma_l u - Gamma'_{kl} u."""
    gp = gamma_prime_vals(cache, vals, grad)
    return gamma_gamma_vals(cache, vals, grad, hess) - gp


def apply_A(ctx: OperatorContext, t_index: int, tf: TestFunction,
            x: np.ndarray, cache: EvalCache | None = None) -> np.ndarray:
    cache = ctx.eval(t_index, x) if cache is None else cache
    _, grad, hess = _tf_arrays(tf, x)
    return a_vals(cache, ctx.qv(t_index), grad, hess)


def apply_Gamma(ctx: OperatorContext, t_index: int, tf: TestFunction,
                x: np.ndarray, cache: EvalCache | None = None) -> np.ndarray:
    cache = ctx.eval(t_index, x) if cache is None else cache
    return gamma_vals(cache, tf.fn(x), tf.grad(x))


def apply_Gamma_prime(ctx: OperatorContext, t_index: int, tf: TestFunction,
                      x: np.ndarray, cache: EvalCache | None = None) -> np.ndarray:
    cache = ctx.eval(t_index, x) if cache is None else cache
    return gamma_prime_vals(cache, tf.fn(x), tf.grad(x))


def gamma_second_order(ctx: OperatorContext, t_index: int, tf: TestFunction,
                       x: np.ndarray, cache: EvalCache | None = None) -> np.ndarray:
    cache = ctx.eval(t_index, x) if cache is None else cache
    vals, grad, hess = _tf_arrays(tf, x)
    return gamma_second_vals(cache, vals, grad, hess)


@dataclass(frozen=True)
class ProbeReport:
    max_asymmetry: float
    min_eigenvalue: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_asymmetry <= self.tol and self.min_eigenvalue >= -self.tol


def psd_probe(ctx: OperatorContext, n_probes: int = 50, seed: int = 20260814,
              tol: float = 1e-10, x_scale: float = 1.5) -> ProbeReport:
    """aa must be symmetric positive semidefinite at random (t, x) probes."""
    gen = rng.generator(seed, "psd_probe")
    idx = gen.integers(0, ctx.rp.steps, size=n_probes)
    asym = 0.0
    mineig = np.inf
    for i in idx:
        x = x_scale * gen.standard_normal((1, ctx.coeffs.dim_x))
        cache = ctx.eval(int(i), x)
        aa = abar_vals(cache, ctx.qv(int(i)))[0]
        asym = max(asym, float(np.max(np.abs(aa - aa.T))))
        mineig = min(mineig, float(np.min(np.linalg.eigvalsh(0.5 * (aa + aa.T)))))
    return ProbeReport(max_asymmetry=asym, min_eigenvalue=mineig, tol=tol)


def fd_gamma_check(ctx: OperatorContext, tf: TestFunction, n_probes: int = 50,
                   seed: int = 20260814, step: float = 1e-5,
                   tol: float = 1e-5, x_scale: float = 1.5) -> float:
    """Nesting check: gamma_second_order against a finite-difference
    composition of apply_Gamma plus the analytic Gamma' transpose."""
    gen = rng.generator(seed, "fd_gamma")
    worst = 0.0
    d = ctx.coeffs.dim_x
    for _ in range(n_probes):
        i = int(gen.integers(0, ctx.rp.steps))
        x = x_scale * gen.standard_normal((1, d))
        cache = ctx.eval(i, x)
        an = gamma_second_order(ctx, i, tf, x, cache)[0]

        def g_fun(pts: np.ndarray) -> np.ndarray:
            c = ctx.eval(i, pts)
            return gamma_vals(c, tf.fn(pts), tf.grad(pts))

        g0 = g_fun(x)
        dg = np.empty((1, ctx.coeffs.dim_y, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            dg[..., j] = (g_fun(x + e) - g_fun(x - e)) / (2 * step)
        comp = np.einsum("mjk,mlj->mkl", cache.f, dg) \
            + np.einsum("mk,ml->mkl", cache.h, g0)
        fd = comp[0] + gamma_prime_vals(cache, tf.fn(x), tf.grad(x))[0].T
        scale = np.maximum(1.0, np.abs(an))
        worst = max(worst, float(np.max(np.abs(fd - an) / scale)))
    return worst


def strato_equivalence_probe(ctx: OperatorContext, n_probes: int = 10,
                             seed: int = 20260814, tol: float = 1e-10,
                             phis: Sequence[TestFunction] | None = None,
                             x_scale: float = 1.5) -> float:
    """Pointwise identity behind the geometric-form rewrite:

        (A - Gamma'_{lk} qv^{kl} - L°) psi
            = 1/2 (Gamma_k Gamma_l - Gamma'_{kl}) psi qv^{kl}

    where L° is the corrected-drift generator with scalar term c°.
    Returns the max absolute defect over random probes."""
    if phis is None:
        phis = library(ctx.coeffs.dim_x)
    gen = rng.generator(seed, "strato_probe")
    worst = 0.0
    for p in range(n_probes):
        tf = phis[p % len(phis)]
        i = int(gen.integers(0, ctx.rp.steps))
        x = x_scale * gen.standard_normal((1, ctx.coeffs.dim_x))
        cache = ctx.eval(i, x)
        qv = ctx.qv(i)
        vals, grad, hess = _tf_arrays(tf, x)
        lhs = a_vals(cache, qv, grad, hess)
        gp = gamma_prime_vals(cache, vals, grad)
        lhs = lhs - np.einsum("mlk,kl->m", gp, qv)
        # L° psi with b° = b - (level-2 signal coefficient):qv / 2 and the
        # scalar weight drift c°.
        g2sig = np.einsum("milj,mjk->milk", cache.dxf, cache.f) + cache.dyf
        b_circ = cache.b - 0.5 * np.einsum("milk,kl->mi", g2sig, qv)
        w2 = np.einsum("ml,mk->mlk", cache.h, cache.h)
        w2 += np.einsum("mlj,mjk->mlk", cache.dxh, cache.f)
        w2 += cache.dyh
        c_circ = -0.5 * np.einsum("mlk,kl->m", w2, qv)
        l_circ = np.einsum("mi,mi->m", b_circ, grad)
        l_circ += 0.5 * np.einsum("mib,mjb,mij->m", cache.sigma, cache.sigma, hess)
        l_circ += c_circ * vals
        lhs = lhs - l_circ
        rhs = 0.5 * np.einsum("mkl,kl->m",
                              gamma_gamma_vals(cache, vals, grad, hess) - gp, qv)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


@dataclass(frozen=True)
class ResidualWindow:
    s: int
    t: int
    span: int
    residual: float
    noise_floor: float


@dataclass(frozen=True)
class SpanSummary:
    span: int
    n_windows: int
    max_residual: float
    floor_at_max: float
    usable: bool


@dataclass(frozen=True)
class ResidualReport:
    kind: str
    phi_name: str
    dt: float
    windows: tuple
    summaries: tuple
    exponent: float
    inconclusive: bool
    fit_threshold: float

    @property
    def usable_spans(self) -> int:
        return sum(1 for s in self.summaries if s.usable)

    def to_csv_rows(self) -> list[list[str]]:
        out = [["s", "t", "span", "residual", "noise_floor"]]
        for w in self.windows:
            out.append([str(w.s), str(w.t), str(w.span),
                        format(w.residual, ".17g"), format(w.noise_floor, ".17g")])
        return out

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "phi": self.phi_name,
            "exponent": self.exponent,
            "inconclusive": self.inconclusive,
            "usable_spans": self.usable_spans,
            "fit_threshold": self.fit_threshold,
            "spans": [
                {"span": s.span, "n_windows": s.n_windows,
                 "max_residual": s.max_residual,
                 "floor_at_max": s.floor_at_max, "usable": s.usable}
                for s in self.summaries
            ],
        }


def write_residual_csv(path: str, report: ResidualReport) -> str:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(report.to_csv_rows())
    return path


def _check_spans(spans: Sequence[int], n: int) -> list[int]:
    spans = sorted(int(s) for s in spans)
    if not spans:
        raise ConfigurationError("need at least one window span")
    for s in spans:
        if s < 1 or s > n:
            raise ConfigurationError(f"span {s} outside [1, {n}]")
    return spans


def _fit_report(kind: str, phi_name: str, dt: float, windows: list,
                spans: list[int], fit_threshold: float) -> ResidualReport:
    summaries = []
    xs, ys = [], []
    for span in spans:
        ws = [w for w in windows if w.span == span]
        if not ws:
            continue
        best = max(ws, key=lambda w: abs(w.residual))
        # The statistic is a max over len(ws) window averages, so pure noise
        # already reaches stderr * sqrt(2 ln n_w); gating against the raw
        # stderr would let noise-dominated spans certify themselves.
        ev = float(np.sqrt(2.0 * np.log(len(ws)))) if len(ws) > 1 else 1.0
        usable = abs(best.residual) > fit_threshold * ev * best.noise_floor
        summaries.append(SpanSummary(span=span, n_windows=len(ws),
                                     max_residual=abs(best.residual),
                                     floor_at_max=best.noise_floor, usable=usable))
        if usable and abs(best.residual) > 0:
            xs.append(np.log(span * dt))
            ys.append(np.log(abs(best.residual)))
    inconclusive = len(xs) < MIN_USABLE_SPANS
    exponent = float("nan") if inconclusive else float(np.polyfit(xs, ys, 1)[0])
    return ResidualReport(kind=kind, phi_name=phi_name, dt=dt,
                          windows=tuple(windows), summaries=tuple(summaries),
                          exponent=exponent, inconclusive=inconclusive,
                          fit_threshold=fit_threshold)


class _BoundaryTracker:
    """Keeps per-window stashes alive exactly as long as needed."""

    def __init__(self, spans: list[int], n: int):
        self.spans = spans
        self.n = n
        self.stashes: dict[int, tuple] = {}

    def matching(self, i: int) -> list[int]:
        return [span for span in self.spans if i % span == 0]

    def wants_stash(self, i: int) -> bool:
        m = self.matching(i)
        return bool(m) and i + min(m) <= self.n

    def put(self, i: int, payload: tuple) -> None:
        self.stashes[i] = payload

    def windows_ending(self, i: int) -> list[tuple[int, int]]:
        out = []
        for span in self.spans:
            if i >= span and i % span == 0 and (i - span) in self.stashes:
                out.append((i - span, span))
        return out

    def prune(self, i: int) -> None:
        dead = [s for s in self.stashes if s + max(self.matching(s)) < i]
        for s in dead:
            del self.stashes[s]


def _std_err(values: np.ndarray) -> float:
    m = values.shape[0]
    if m < 2:
        return 0.0
    mean = rng.tree_mean(values)
    var = rng.tree_mean((values - mean) ** 2) * m / (m - 1)
    return float(np.sqrt(var / m))


def zakai_davie_residual(ensemble: ParticleEnsemble, ctx: OperatorContext,
                         tf: TestFunction, spans: Sequence[int],
                         fit_threshold: float = FIT_THRESHOLD) -> ResidualReport:
    """Window residuals of the unnormalized Davie expansion.

    Per particle over a window [s, t]:

        r^m = (v_t - v_s) - (D_t - D_s) - g_s . dY_{s,t} - G_s : YY_{s,t}

    with v = phi(X) Z, D the running left-point drift sum of A phi . Z,
    g = Gamma phi . Z and G the forward second-order coefficient . Z.
    The window residual is mean_m r^m; the noise floor is its standard
    error across particles.
    """
    rp = ensemble.rp
    n = rp.steps
    spans = _check_spans(spans, n)
    dt = rp.grid.dt
    tracker = _BoundaryTracker(spans, n)
    drift = np.zeros(ensemble.m)
    windows: list[ResidualWindow] = []

    def observer(i: int, x: np.ndarray, z: np.ndarray, cache: EvalCache) -> None:
        nonlocal drift
        vals, grad, hess = _tf_arrays(tf, x)
        v = vals * z
        for s, span in tracker.windows_ending(i):
            v_s, d_s, g_s, gg_s = tracker.stashes[s]
            dy, yy = chen_extend(rp, s, i)
            r = (v - v_s) - (drift - d_s)
            r -= np.einsum("mk,k->m", g_s, dy)
            r -= np.einsum("mkl,kl->m", gg_s, yy)
            windows.append(ResidualWindow(s=s, t=i, span=span,
                                          residual=float(rng.tree_mean(r)),
                                          noise_floor=_std_err(r)))
        if tracker.wants_stash(i):
            g = gamma_vals(cache, vals, grad) * z[:, None]
            gg = gamma_second_vals(cache, vals, grad, hess) * z[:, None, None]
            tracker.put(i, (v.copy(), drift.copy(), g, gg))
        tracker.prune(i)
        if i < n:
            qv = ctx.qv(i)
            drift = drift + a_vals(cache, qv, grad, hess) * z * dt

    ensemble.scan([observer])
    return _fit_report("zakai", tf.name, dt, windows, spans, fit_threshold)


@dataclass(frozen=True)
class KSStack:
    """Node-wise compensated coefficients of the normalized expansion."""

    phi_name: str
    sig_phi: np.ndarray
    sig_a_phi: np.ndarray
    sig_h: np.ndarray
    mass: np.ndarray
    phi_lvl1: np.ndarray
    phi_lvl2: np.ndarray
    psi_lvl1: np.ndarray
    psi_lvl2: np.ndarray


def build_ks_stack(ensemble: ParticleEnsemble, ctx: OperatorContext,
                   tf: TestFunction) -> KSStack:
    """Empirical Phi, Phi', Psi, Psi' at every node.

        Phi_k        = sig(Gamma_k phi) - sig(phi) sig(h_k)
        Psi_k        = sig(h_k)
        Psi'_{k,l}   = sig(Gamma_l h_k + dyh[k,l]) - sig(h_k) sig(h_l)
        Phi'_{k,l}   = sig(Gamma_k phi)'_l - Phi_l sig(h_k) - sig(phi) Psi'_{k,l}

    with sig(Gamma_k phi)'_l = sig((Gamma_l Gamma_k + Gamma'_{k,l}) phi)
    - sig(Gamma_k phi) sig(h_l); the derivative slot is the second index.
    """
    rp = ensemble.rp
    n1 = rp.steps + 1
    d = rp.dim
    one_tf = one(ctx.coeffs.dim_x)
    mass = np.empty(n1)
    mu_phi = np.empty(n1)
    mu_a = np.empty(n1)
    mu_g = np.empty((n1, d))
    mu_g2 = np.empty((n1, d, d))
    mu_h = np.empty((n1, d))
    mu_g2_one = np.empty((n1, d, d))

    def observer(i: int, x: np.ndarray, z: np.ndarray, cache: EvalCache) -> None:
        vals, grad, hess = _tf_arrays(tf, x)
        qv = ctx.qv(min(i, rp.steps - 1))
        mass[i] = rng.tree_mean(z)
        mu_phi[i] = rng.tree_mean(vals * z)
        mu_a[i] = rng.tree_mean(a_vals(cache, qv, grad, hess) * z)
        mu_g[i] = rng.tree_mean(gamma_vals(cache, vals, grad) * z[:, None], axis=0)
        mu_g2[i] = rng.tree_mean(
            gamma_second_vals(cache, vals, grad, hess) * z[:, None, None], axis=0)
        ones, zer_g, zer_h = _tf_arrays(one_tf, x)
        mu_h[i] = rng.tree_mean(gamma_vals(cache, ones, zer_g) * z[:, None], axis=0)
        mu_g2_one[i] = rng.tree_mean(
            gamma_second_vals(cache, ones, zer_g, zer_h) * z[:, None, None], axis=0)

    ensemble.scan([observer])
    sig_phi = mu_phi / mass
    sig_h = mu_h / mass[:, None]
    sig_g = mu_g / mass[:, None]
    sig_g2 = mu_g2 / mass[:, None, None]
    sig_g2_one = mu_g2_one / mass[:, None, None]
    phi_lvl1 = sig_g - sig_phi[:, None] * sig_h
    psi_lvl2 = sig_g2_one.transpose(0, 2, 1) - np.einsum("nk,nl->nkl", sig_h, sig_h)
    d_sig_g = sig_g2.transpose(0, 2, 1) - np.einsum("nk,nl->nkl", sig_g, sig_h)
    phi_lvl2 = d_sig_g - np.einsum("nl,nk->nkl", phi_lvl1, sig_h) \
        - sig_phi[:, None, None] * psi_lvl2
    return KSStack(phi_name=tf.name, sig_phi=sig_phi, sig_a_phi=mu_a / mass,
                   sig_h=sig_h, mass=mass, phi_lvl1=phi_lvl1, phi_lvl2=phi_lvl2,
                   psi_lvl1=sig_h, psi_lvl2=psi_lvl2)


def ks_davie_residual(ensemble: ParticleEnsemble, ctx: OperatorContext,
                      tf: TestFunction, spans: Sequence[int],
                      stack: KSStack | None = None,
                      fit_threshold: float = FIT_THRESHOLD) -> ResidualReport:
    """Window residuals of the normalized Davie expansion.

    The drift integrand is sig_r(A phi) - Phi_{r,k} qv_r^{kl} sig_r(h_l);
    level-1/level-2 coefficients are Phi and Phi' frozen at the window
    start.  Noise floors use per-particle influence values
    (phi(X) - sig(phi)) Z / mass differenced across the window.
    """
    rp = ensemble.rp
    n = rp.steps
    spans = _check_spans(spans, n)
    dt = rp.grid.dt
    if stack is None:
        stack = build_ks_stack(ensemble, ctx, tf)
    qv_all = rp.bracket_derivative.values
    drift_terms = np.array([
        stack.sig_a_phi[r]
        - float(np.einsum("k,kl,l->", stack.phi_lvl1[r], qv_all[r], stack.sig_h[r]))
        for r in range(n)
    ])
    drift_pref = np.zeros(n + 1)
    np.cumsum(drift_terms * dt, out=drift_pref[1:])

    tracker = _BoundaryTracker(spans, n)
    windows: list[ResidualWindow] = []

    def observer(i: int, x: np.ndarray, z: np.ndarray, cache: EvalCache) -> None:
        infl = (tf.fn(x) - stack.sig_phi[i]) * z / stack.mass[i]
        for s, span in tracker.windows_ending(i):
            infl_s = tracker.stashes[s][0]
            dy, yy = chen_extend(rp, s, i)
            res = stack.sig_phi[i] - stack.sig_phi[s] - (drift_pref[i] - drift_pref[s])
            res -= float(np.einsum("k,k->", stack.phi_lvl1[s], dy))
            res -= float(np.einsum("kl,lk->", stack.phi_lvl2[s], yy))
            windows.append(ResidualWindow(s=s, t=i, span=span, residual=float(res),
                                          noise_floor=_std_err(infl - infl_s)))
        if tracker.wants_stash(i):
            tracker.put(i, (infl.copy(),))
        tracker.prune(i)

    ensemble.scan([observer])
    return _fit_report("kushner_stratonovich", tf.name, dt, windows, spans,
                       fit_threshold)


@dataclass(frozen=True)
class TotalMassReport:
    mass_dev: float
    mass_scale: float
    phi_devs: dict
    phi_scales: dict
    rel_tol: float
    path: np.ndarray = field(repr=False, default=None)

    @property
    def mass_ok(self) -> bool:
        return self.mass_dev <= self.rel_tol * self.mass_scale

    @property
    def ok(self) -> bool:
        if not self.mass_ok:
            return False
        return all(self.phi_devs[k] <= self.rel_tol * max(self.phi_scales[k], 1e-300)
                   for k in self.phi_devs)

    def as_dict(self) -> dict:
        return {"mass_dev": self.mass_dev, "mass_scale": self.mass_scale,
                "phi_devs": dict(self.phi_devs), "phi_scales": dict(self.phi_scales),
                "rel_tol": self.rel_tol, "mass_ok": self.mass_ok, "ok": self.ok}


def solve_mass_rde(stack: KSStack, rp: RoughPath) -> np.ndarray:
    """Davie recursion for the total mass driven by (Psi, Psi')."""
    n = rp.steps
    z = np.empty(n + 1)
    z[0] = 1.0
    for i in range(n):
        psi = stack.psi_lvl1[i]
        # slot [l, k] multiplies YY^{kl}, mirroring the weight recursion
        lvl2 = np.einsum("l,k->lk", psi, psi) + stack.psi_lvl2[i]
        fac = 1.0 + float(psi @ rp.increments[i]) \
            + float(np.einsum("lk,kl->", lvl2, rp.second[i]))
        z[i + 1] = z[i] * fac
    return z


def total_mass_rde(ensemble: ParticleEnsemble, ctx: OperatorContext,
                   phis: Sequence[TestFunction] | None = None,
                   rel_tol: float = 5e-2,
                   stack: KSStack | None = None) -> TotalMassReport:
    """Reconstruct mu(1) from normalized quantities alone and compare.

    Solves the scalar Davie recursion driven by (Psi, Psi') and checks
    max_t |Z - mu_t(1)| and, per phi, max_t |Z sig_t(phi) - mu_t(phi)|.
    """
    if stack is None:
        stack = build_ks_stack(ensemble, ctx, one(ctx.coeffs.dim_x))
    z = solve_mass_rde(stack, ensemble.rp)
    mass = ensemble.mu("one")
    mass_dev = float(np.max(np.abs(z - mass)))
    mass_scale = float(np.max(np.abs(mass)))
    if phis is None:
        phis = [tf for name, tf in ensemble.phis.items() if name != "one"]
    phi_devs, phi_scales = {}, {}
    for tf in phis:
        mu_series = ensemble.mu(tf)
        sig_series = ensemble.sigma(tf)
        phi_devs[tf.name] = float(np.max(np.abs(z * sig_series - mu_series)))
        phi_scales[tf.name] = float(np.max(np.abs(mu_series)))
    return TotalMassReport(mass_dev=mass_dev, mass_scale=mass_scale,
                           phi_devs=phi_devs, phi_scales=phi_scales,
                           rel_tol=rel_tol, path=z)
