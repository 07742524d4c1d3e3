r"""Classical (randomized-driver) reference layer.

A scenario couples a primitive observation system

    dX = (bbar - fbar h2) dt + sigma dB + fbar dW,
    dY = h1(t, Y) dt + k(t, Y) dW,          dZ = Z h2^T dW,

under the reference measure, with its reduced nondegenerate form

    f = fbar k^{-1},   h = h2^T k^{-1},   b = bbar - fbar h2,

available whenever k is square and invertible.  The reduced coefficient
callables are exact compositions of the primitive callables, so the
reduction is consistent with directly specified coefficients.

The conditional Monte Carlo filter freezes one simulated observation
path and propagates fresh particles against it with an Euler scheme on
the fine grid; by the randomization principle its per-node estimates
agree with the rough filter driven by the Ito lift of the same path, up
to Monte Carlo error and scheme bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .coeffs import CoefficientSet
from .errors import BlowUpError, CapabilityError, ConfigurationError, DimensionError
from .roughpath import TimeGrid, lift_ito
from .testfuncs import TestFunction, library

Z_BLOWUP = 1e12
X_BLOWUP = 1e8


@dataclass(frozen=True)
class LinearGaussianParams:
    """Scalar model dX = a X dt + sigma dB + fcorr dW with observation
    dY = hmat X dt + k dW; fcorr correlates signal and observation noise."""

    a: float
    sigma: float
    hmat: float
    k: float
    m0: float
    p0: float
    fcorr: float = 0.0


@dataclass(frozen=True)
class InitialLaw:
    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        chol = np.atleast_2d(np.asarray(self.chol, dtype=np.float64))
        if chol.shape != (mean.size, mean.size):
            raise DimensionError(f"chol must be ({mean.size}, {mean.size}), got {chol.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, m: int, seed: int, label: str = "x0") -> np.ndarray:
        g = rng.normal_block(seed, (label,), (m, self.dim))
        return self.mean[None, :] + g @ self.chol.T


@dataclass(frozen=True)
class PrimitiveSystem:
    """Physical-coordinate coefficients; same batching contract as
    CoefficientSet, with the observation-noise column space dim_w."""

    dim_x: int
    dim_b: int
    dim_y: int
    dim_w: int
    bbar: Callable
    sigma: Callable
    fbar: Callable
    h2: Callable
    dxfbar: Callable
    dyfbar: Callable
    dxh2: Callable
    dyh2: Callable
    k: Callable
    h1: Callable | None = None
    dyk: Callable | None = None
    k_is_constant: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def k_matrix(self, t: float, y: np.ndarray) -> np.ndarray:
        km = np.asarray(self.k(t, y), dtype=np.float64)
        if km.shape != (self.dim_y, self.dim_w):
            raise DimensionError(f"k must be ({self.dim_y}, {self.dim_w}), got {km.shape}")
        return km

    def h1_vec(self, t: float, y: np.ndarray) -> np.ndarray:
        if self.h1 is None:
            return np.zeros(self.dim_y)
        return np.asarray(self.h1(t, y), dtype=np.float64)


@dataclass(frozen=True)
class ClassicalScenario:
    name: str
    prim: PrimitiveSystem
    coeffs: CoefficientSet | None
    init: InitialLaw
    linear_gaussian: LinearGaussianParams | None = None
    bounded: bool = True
    default_horizon: float = 1.0
    pathwise_vals: Callable | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim_x(self) -> int:
        return self.prim.dim_x

    @property
    def dim_y(self) -> int:
        return self.prim.dim_y


@dataclass(frozen=True)
class KProbeReport:
    min_singular_value: float
    max_condition: float
    n_probes: int


def probe_k(prim: PrimitiveSystem, n_probes: int = 50, seed: int = 20260814,
            y_scale: float = 1.5, t_max: float = 1.0,
            sv_floor: float = 1e-10) -> KProbeReport:
    """Sample k(t, y) and fail loudly at the first singular probe."""
    if prim.dim_y != prim.dim_w:
        raise ConfigurationError(
            f"k must be square to invert: dim_y={prim.dim_y}, dim_w={prim.dim_w}")
    gen = rng.generator(seed, "k_probe")
    min_sv = np.inf
    max_cond = 0.0
    for p in range(n_probes):
        t = t_max * p / n_probes
        y = y_scale * gen.standard_normal(prim.dim_y)
        sv = np.linalg.svd(prim.k_matrix(t, y), compute_uv=False)
        if sv[-1] < sv_floor * max(1.0, sv[0]):
            raise ConfigurationError(
                f"observation matrix k singular at probe t={t:.6g}, y={y}: "
                f"singular values {sv}")
        min_sv = min(min_sv, float(sv[-1]))
        max_cond = max(max_cond, float(sv[0] / sv[-1]))
    return KProbeReport(min_singular_value=min_sv, max_condition=max_cond,
                        n_probes=n_probes)


def reduce_to_nondegenerate(prim: PrimitiveSystem, probe: bool = True) -> CoefficientSet:
    """Compose the primitive callables with k^{-1}.

    Derivative fields are exact compositions; if k depends on y, dyk
    must be supplied (constant k is assumed otherwise).
    """
    if prim.dim_y != prim.dim_w:
        raise ConfigurationError(
            f"reduction needs dim_y == dim_w, got {prim.dim_y} vs {prim.dim_w}")
    if probe:
        probe_k(prim)

    def kinv(t, y):
        return np.linalg.inv(prim.k_matrix(t, y))

    def dkinv(t, y):
        # d(k^{-1})/dy_e = -k^{-1} dk/dy_e k^{-1}, slot [w, l, e]
        ki = kinv(t, y)
        if prim.dyk is None:
            return np.zeros((prim.dim_w, prim.dim_y, prim.dim_y))
        dk = np.asarray(prim.dyk(t, y), dtype=np.float64)
        return -np.einsum("wa,abe,bl->wle", ki, dk, ki)

    def f(t, x, y):
        return np.einsum("...iw,wl->...il", prim.fbar(t, x, y), kinv(t, y))

    def dxf(t, x, y):
        return np.einsum("...iwj,wl->...ilj", prim.dxfbar(t, x, y), kinv(t, y))

    def dyf(t, x, y):
        out = np.einsum("...iwe,wl->...ile", prim.dyfbar(t, x, y), kinv(t, y))
        out = out + np.einsum("...iw,wle->...ile", prim.fbar(t, x, y), dkinv(t, y))
        return out

    def h(t, x, y):
        return np.einsum("...w,wl->...l", prim.h2(t, x, y), kinv(t, y))

    def dxh(t, x, y):
        return np.einsum("...wj,wl->...lj", prim.dxh2(t, x, y), kinv(t, y))

    def dyh(t, x, y):
        out = np.einsum("...we,wl->...le", prim.dyh2(t, x, y), kinv(t, y))
        out = out + np.einsum("...w,wle->...le", prim.h2(t, x, y), dkinv(t, y))
        return out

    def b(t, x, y):
        return prim.bbar(t, x, y) - np.einsum("...iw,...w->...i",
                                              prim.fbar(t, x, y), prim.h2(t, x, y))

    meta = dict(prim.meta)
    meta["name"] = str(meta.get("name", "primitive")) + "_reduced"
    return CoefficientSet(dim_x=prim.dim_x, dim_b=prim.dim_b, dim_y=prim.dim_y,
                          b=b, sigma=prim.sigma, f=f, dyf=dyf, h=h, dyh=dyh,
                          dxf=dxf, dxh=dxh, meta=meta)


def primitives_from_reduced(coeffs: CoefficientSet, k_const: np.ndarray,
                            meta: dict | None = None) -> PrimitiveSystem:
    """Reconstruct a primitive system whose reduction is exactly coeffs.

    Sets fbar = f k, h2 = k^T h^T, bbar = b + fbar . h2, with a constant
    observation matrix, so reduce_to_nondegenerate inverts it by
    construction.
    """
    k = np.atleast_2d(np.asarray(k_const, dtype=np.float64))
    if k.shape[0] != coeffs.dim_y or k.shape[0] != k.shape[1]:
        raise DimensionError(f"k must be square ({coeffs.dim_y} x {coeffs.dim_y})")
    dim_w = k.shape[1]

    def fbar(t, x, y):
        return np.einsum("...il,lw->...iw", coeffs.f(t, x, y), k)

    def h2(t, x, y):
        return np.einsum("...l,lw->...w", coeffs.h(t, x, y), k)

    def bbar(t, x, y):
        return coeffs.b(t, x, y) + np.einsum("...iw,...w->...i",
                                             fbar(t, x, y), h2(t, x, y))

    def dxfbar(t, x, y):
        return np.einsum("...ilj,lw->...iwj", coeffs.dxf(t, x, y), k)

    def dyfbar(t, x, y):
        return np.einsum("...ile,lw->...iwe", coeffs.dyf(t, x, y), k)

    def dxh2(t, x, y):
        return np.einsum("...lj,lw->...wj", coeffs.dxh(t, x, y), k)

    def dyh2(t, x, y):
        return np.einsum("...le,lw->...we", coeffs.dyh(t, x, y), k)

    md = dict(meta or {})
    md.setdefault("name", str(coeffs.meta.get("name", "reduced")) + "_primitive")
    return PrimitiveSystem(dim_x=coeffs.dim_x, dim_b=coeffs.dim_b,
                           dim_y=coeffs.dim_y, dim_w=dim_w,
                           bbar=bbar, sigma=coeffs.sigma, fbar=fbar, h2=h2,
                           dxfbar=dxfbar, dyfbar=dyfbar, dxh2=dxh2, dyh2=dyh2,
                           k=lambda t, y: k, h1=None, dyk=None,
                           k_is_constant=True, meta=md)


@dataclass(frozen=True)
class ClassicalSample:
    """Euler sample paths under the reference measure, leading axis = path."""

    grid: TimeGrid
    states: np.ndarray
    obs: np.ndarray
    noise_w: np.ndarray
    weights: np.ndarray


def simulate_system(scn: ClassicalScenario, grid: TimeGrid, seed: int,
                    n_paths: int = 1) -> ClassicalSample:
    """Joint Euler simulation of (X, Y, W, Z).

    Y integrates h1 dt + k dW; X uses the reduced drift and loads on dY
    through f (equivalently fbar dW); Z is the multiplicative Euler
    weight 1 + h . dY.  Scenarios provide pathwise_vals for vectorized
    per-path coefficient values; without it paths are chunked one at a
    time, which is only meant for small n_paths.
    """
    prim = scn.prim
    n = grid.steps
    dt = grid.dt
    sq = np.sqrt(dt)
    dw = rng.normal_block(seed, ("cl_w",), (n_paths, n, prim.dim_w)) * sq
    db = rng.normal_block(seed, ("cl_b",), (n_paths, n, prim.dim_b)) * sq
    x = scn.init.sample(n_paths, seed)
    y = np.zeros((n_paths, prim.dim_y))
    w = np.zeros((n_paths, prim.dim_w))
    z = np.ones(n_paths)
    states = np.empty((n_paths, n + 1, prim.dim_x))
    obs = np.empty((n_paths, n + 1, prim.dim_y))
    noise_w = np.empty((n_paths, n + 1, prim.dim_w))
    weights = np.empty((n_paths, n + 1))
    t_nodes = grid.nodes

    def vals_at(t, xb, yb):
        if scn.pathwise_vals is not None:
            return scn.pathwise_vals(t, xb, yb)
        rows_b, rows_s, rows_f, rows_h = [], [], [], []
        for p in range(xb.shape[0]):
            xp = xb[p : p + 1]
            yp = yb[p]
            if scn.coeffs is not None:
                c = scn.coeffs
                rows_b.append(c.b(t, xp, yp)[0])
                rows_s.append(c.sigma(t, xp, yp)[0])
                rows_f.append(c.f(t, xp, yp)[0])
                rows_h.append(c.h(t, xp, yp)[0])
            else:
                fb = prim.fbar(t, xp, yp)[0]
                h2 = prim.h2(t, xp, yp)[0]
                rows_b.append(prim.bbar(t, xp, yp)[0] - fb @ h2)
                rows_s.append(prim.sigma(t, xp, yp)[0])
                rows_f.append(fb)
                rows_h.append(h2)
        return (np.stack(rows_b), np.stack(rows_s),
                np.stack(rows_f), np.stack(rows_h))

    # pathwise_vals must match this branch: (b, sigma, f, h) when reduced
    # coefficients exist, else (bbar - fbar h2, sigma, fbar, h2)
    reduced = scn.coeffs is not None
    for i in range(n):
        t = t_nodes[i]
        states[:, i] = x
        obs[:, i] = y
        noise_w[:, i] = w
        weights[:, i] = z
        bv, sv, fv, hv = vals_at(t, x, y)
        if prim.k_is_constant and i == 0:
            k_const = prim.k_matrix(0.0, np.zeros(prim.dim_y))
        if prim.k_is_constant and prim.h1 is None:
            dy = dw[:, i] @ k_const.T
        else:
            dy = np.empty((n_paths, prim.dim_y))
            for p in range(n_paths):
                km = prim.k_matrix(t, y[p])
                dy[p] = prim.h1_vec(t, y[p]) * dt + km @ dw[:, i][p]
        if reduced:
            # f loads on dY, weight on h . dY
            x = x + bv * dt + np.einsum("pib,pb->pi", sv, db[:, i]) \
                + np.einsum("pil,pl->pi", fv, dy)
            z = z * (1.0 + np.einsum("pl,pl->p", hv, dy))
        else:
            # degenerate: fbar and h2 load on dW directly
            x = x + bv * dt + np.einsum("pib,pb->pi", sv, db[:, i]) \
                + np.einsum("piw,pw->pi", fv, dw[:, i])
            z = z * (1.0 + np.einsum("pw,pw->p", hv, dw[:, i]))
        y = y + dy
        w = w + dw[:, i]
        if not np.all(np.isfinite(x)) or float(np.max(np.abs(x))) > X_BLOWUP:
            raise BlowUpError(f"simulated state blew up during step {i}", step=i, what="state")
        if not np.all(np.isfinite(z)) or float(np.max(np.abs(z))) > Z_BLOWUP:
            raise BlowUpError(f"simulated weight blew up during step {i}", step=i, what="weight")
    states[:, n] = x
    obs[:, n] = y
    noise_w[:, n] = w
    weights[:, n] = z
    return ClassicalSample(grid=grid, states=states, obs=obs,
                           noise_w=noise_w, weights=weights)


@dataclass(frozen=True)
class KalmanResult:
    grid: TimeGrid
    mean: np.ndarray
    var: np.ndarray


def riccati_fixed_point(params: LinearGaussianParams) -> float:
    """Positive root of the stationary variance equation
    2 a P + sigma^2 + fcorr^2 - (hmat P + fcorr k)^2 / k^2 = 0
    (Lyapunov limit -sigma^2 / 2a when hmat = 0 and fcorr = 0)."""
    a, s, hm, k, c = params.a, params.sigma, params.hmat, params.k, params.fcorr
    if hm == 0.0 and c == 0.0:
        if a >= 0:
            raise ConfigurationError("no steady state: hmat = 0 needs a < 0")
        return -s * s / (2 * a)
    q = hm * hm / (k * k)
    a_eff = a - c * hm / k
    if q == 0.0:
        if a_eff >= 0:
            raise ConfigurationError("no steady state: effective drift not stable")
        return -s * s / (2 * a_eff)
    return (a_eff + np.sqrt(a_eff * a_eff + s * s * q)) / q


def kalman_bucy(params: LinearGaussianParams, grid: TimeGrid,
                y_path: np.ndarray) -> KalmanResult:
    """Scalar Kalman-Bucy filter: RK4 for the variance, Euler innovations
    for the mean.  Matrix parameters are out of scope."""
    for name in ("a", "sigma", "hmat", "k", "m0", "p0"):
        if not np.isscalar(getattr(params, name)) and np.asarray(getattr(params, name)).size != 1:
            raise CapabilityError("kalman_bucy implements the scalar case only")
    y = np.asarray(y_path, dtype=np.float64)
    if y.ndim == 2:
        if y.shape[1] != 1:
            raise CapabilityError("kalman_bucy implements the scalar case only")
        y = y[:, 0]
    if y.shape[0] != grid.steps + 1:
        raise DimensionError(f"observation path must have {grid.steps + 1} nodes")
    a, s, hm, k, c = params.a, params.sigma, params.hmat, params.k, params.fcorr

    def pdot(p):
        g = (p * hm + c * k) / k
        return 2 * a * p + s * s + c * c - g * g

    n = grid.steps
    dt = grid.dt
    mean = np.empty(n + 1)
    var = np.empty(n + 1)
    mean[0] = params.m0
    var[0] = params.p0
    for i in range(n):
        p = var[i]
        k1 = pdot(p)
        k2 = pdot(p + 0.5 * dt * k1)
        k3 = pdot(p + 0.5 * dt * k2)
        k4 = pdot(p + dt * k3)
        var[i + 1] = p + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        gain = (p * hm + c * k) / (k * k)
        dy = y[i + 1] - y[i]
        mean[i + 1] = mean[i] + a * mean[i] * dt + gain * (dy - hm * mean[i] * dt)
    return KalmanResult(grid=grid, mean=mean, var=var)


class ConditionalMCResult:
    """Per-node moment table of the conditional Monte Carlo filter."""

    def __init__(self, node_indices: np.ndarray, times: np.ndarray, m: int,
                 mu: dict, m2: dict, xz: dict):
        self.node_indices = node_indices
        self.times = times
        self.m = m
        self.node_mu = mu
        self.node_m2 = m2
        self.node_xz = xz

    def mu(self, name: str) -> np.ndarray:
        return self.node_mu[name].copy()

    def sigma(self, name: str) -> np.ndarray:
        return self.node_mu[name] / self.node_mu["one"]

    def stderr(self, name: str) -> np.ndarray:
        var = (self.node_m2[name] - self.node_mu[name] ** 2) * self.m / (self.m - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.m)

    def sigma_stderr(self, name: str) -> np.ndarray:
        mass = self.node_mu["one"]
        sig = self.node_mu[name] / mass
        second = self.node_m2[name] - 2.0 * sig * self.node_xz[name] \
            + sig * sig * self.node_m2["one"]
        return np.sqrt(np.maximum(second, 0.0) / (self.m - 1)) / mass


def conditional_mc_filter(scn: ClassicalScenario, fine_grid: TimeGrid,
                          y_fine: np.ndarray, phis: Sequence[TestFunction],
                          m: int, seed: int, out_stride: int = 1,
                          bm_label: str = "signal") -> ConditionalMCResult:
    """Fine-grid Euler particle filter against one frozen observation path.

    Brownian increments are keyed (seed, bm_label, fine step) exactly as
    the rough solver keys its sub-blocks, so a rough run with
    bm_substeps equal to the refinement consumes identical noise.
    """
    if scn.coeffs is None:
        raise CapabilityError("conditional MC needs the reduced coefficient set")
    coeffs = scn.coeffs
    y = np.asarray(y_fine, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    nf = fine_grid.steps
    if y.shape != (nf + 1, coeffs.dim_y):
        raise DimensionError(f"observation path must be ({nf + 1}, {coeffs.dim_y})")
    if nf % out_stride:
        raise ConfigurationError("out_stride must divide the number of fine steps")
    phis = list(phis)
    names = [tf.name for tf in phis]
    if "one" not in names:
        from .testfuncs import one as _one
        phis.append(_one(coeffs.dim_x))
        names.append("one")
    x = scn.init.sample(m, seed)
    z = np.ones(m)
    dt = fine_grid.dt
    sq = np.sqrt(dt)
    keep = np.arange(0, nf + 1, out_stride)
    times = fine_grid.nodes[keep]
    mu = {n_: np.empty(keep.size) for n_ in names}
    m2 = {n_: np.empty(keep.size) for n_ in names}
    xz = {n_: np.empty(keep.size) for n_ in names}

    def record(slot: int):
        for tf in phis:
            v = tf.fn(x) * z
            mu[tf.name][slot] = rng.tree_mean(v)
            m2[tf.name][slot] = rng.tree_mean(v * v)
            xz[tf.name][slot] = rng.tree_mean(v * z)

    slot = 0
    for j in range(nf):
        if j % out_stride == 0:
            record(slot)
            slot += 1
        t = fine_grid.nodes[j]
        yj = y[j]
        dy = y[j + 1] - y[j]
        db = rng.normal_block(seed, (bm_label, j), (m, coeffs.dim_b)) * sq
        hv = coeffs.h(t, x, yj)
        z = z * (1.0 + hv @ dy)
        x = x + coeffs.b(t, x, yj) * dt \
            + np.einsum("pib,pb->pi", coeffs.sigma(t, x, yj), db) \
            + coeffs.f(t, x, yj) @ dy
        if not np.all(np.isfinite(x)) or float(np.max(np.abs(x))) > X_BLOWUP:
            raise BlowUpError(f"conditional MC state blew up during step {j}",
                              step=j, what="state")
        if float(np.max(np.abs(z))) > Z_BLOWUP:
            raise BlowUpError(f"conditional MC weight blew up during step {j}",
                              step=j, what="weight")
    record(slot)
    return ConditionalMCResult(node_indices=keep, times=times, m=m,
                               mu=mu, m2=m2, xz=xz)


@dataclass(frozen=True)
class ComparisonRow:
    phi_name: str
    node: int
    t: float
    rough: float
    reference: float
    diff: float
    budget: float

    @property
    def ok(self) -> bool:
        return self.diff <= self.budget


@dataclass(frozen=True)
class RandomizationReport:
    rows_mu: tuple
    rows_sigma: tuple
    allowance: float

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows_mu) and all(r.ok for r in self.rows_sigma)

    def worst(self) -> float:
        vals = [r.diff - r.budget for r in self.rows_mu + self.rows_sigma]
        return max(vals) if vals else float("-inf")

    def as_dict(self) -> dict:
        def rows(rs):
            return [
                {"phi": r.phi_name, "node": r.node, "t": r.t, "rough": r.rough,
                 "reference": r.reference, "diff": r.diff, "budget": r.budget,
                 "ok": r.ok}
                for r in rs
            ]
        return {"allowance": self.allowance, "ok": self.ok,
                "mu": rows(self.rows_mu), "sigma": rows(self.rows_sigma)}


def randomization_harness(scn: ClassicalScenario, grid: TimeGrid,
                          refine_factor: int, m: int, seed: int,
                          phis: Sequence[TestFunction] | None = None,
                          alpha: float = 0.45, coupled: bool = True,
                          allowance: float = 5e-3,
                          compare_stride: int = 1) -> RandomizationReport:
    """Rough filter on the Ito lift of a simulated observation path versus
    the conditional Monte Carlo filter on the underlying fine path.

    With coupled=True both sides consume the same Brownian increments,
    so differences isolate the scheme gap; the budget still assumes
    independent errors (3x combined stderr) plus a fixed allowance.
    """
    from .particle import run_filter

    if scn.coeffs is None:
        raise CapabilityError("randomization harness needs the reduced coefficients")
    if phis is None:
        phis = library(scn.dim_x)
    fine = grid.refine(refine_factor)
    sim = simulate_system(scn, fine, seed, n_paths=1)
    y_fine = sim.obs[0]
    rp = lift_ito(grid, y_fine, refine_factor, alpha, meta={"seed": seed})
    rough = run_filter(scn.coeffs, rp, m, seed, phis, scn.init,
                       bm_substeps=refine_factor if coupled else 1, store=False)
    cmc = conditional_mc_filter(scn, fine, y_fine, phis, m, seed,
                                out_stride=refine_factor)
    rows_mu, rows_sigma = [], []
    nodes = range(0, grid.steps + 1, compare_stride)
    for tf in phis:
        r_mu = rough.mu(tf)
        r_se = rough.stderr(tf)
        r_sig = rough.sigma(tf)
        r_sse = rough.sigma_stderr(tf)
        c_mu = cmc.mu(tf.name)
        c_se = cmc.stderr(tf.name)
        c_sig = cmc.sigma(tf.name)
        c_sse = cmc.sigma_stderr(tf.name)
        for i in nodes:
            t = grid.nodes[i]
            budget = 3.0 * np.hypot(r_se[i], c_se[i]) + allowance
            rows_mu.append(ComparisonRow(tf.name, i, t, r_mu[i], c_mu[i],
                                         abs(r_mu[i] - c_mu[i]), budget))
            budget_s = 3.0 * np.hypot(r_sse[i], c_sse[i]) + allowance
            rows_sigma.append(ComparisonRow(tf.name, i, t, r_sig[i], c_sig[i],
                                            abs(r_sig[i] - c_sig[i]), budget_s))
    return RandomizationReport(rows_mu=tuple(rows_mu), rows_sigma=tuple(rows_sigma),
                               allowance=allowance)
