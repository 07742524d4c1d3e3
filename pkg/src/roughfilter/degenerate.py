r"""Degenerate observation noise via an extended driver.

When the observation matrix k is rank deficient the reduction fails; the
filter instead runs on the hat driver

    Yhat = ( Y,  int k^+ (dY - h1 dt),  int (I - k^+ k) dW ),

of dimension d_Y + 2 d_W.  Block 1 reconstructs the noise component of
the observation, block 2 carries the unobserved remainder; the extended
loads put fbar and h2 on both blocks, so fbar dW is recovered exactly
for any k and the construction collapses to the reduced system when k
is invertible.  Coefficients depend on the driver only through the
observation block, so the extended derivative fields are zero outside
the first d_Y derivative columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classical import ClassicalScenario, simulate_system
from .coeffs import CoefficientSet
from .errors import DimensionError
from .particle import ParticleEnsemble, run_filter
from .roughpath import RoughPath, TimeGrid, lift_ito
from .testfuncs import TestFunction, library

PENROSE_TOL = 1e-8


def moore_penrose(mat: np.ndarray, rel_threshold: float = 1e-10) -> np.ndarray:
    """Pseudo-inverse by SVD with a relative singular-value cutoff."""
    m = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cut = rel_threshold * (s[0] if s.size else 0.0)
    inv = np.where(s > cut, 1.0 / np.where(s > cut, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def penrose_defects(mat: np.ndarray, pinv: np.ndarray) -> float:
    """Largest entry over the four defining identities."""
    k = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    p = np.atleast_2d(np.asarray(pinv, dtype=np.float64))
    kp = k @ p
    pk = p @ k
    defects = [k @ p @ k - k, p @ k @ p - p, kp.T - kp, pk.T - pk]
    return max(float(np.max(np.abs(d))) for d in defects)


@dataclass(frozen=True)
class HatStructure:
    dim_y: int
    dim_w: int

    @property
    def dim_hat(self) -> int:
        return self.dim_y + 2 * self.dim_w

    @property
    def sl_obs(self) -> slice:
        return slice(0, self.dim_y)

    @property
    def sl_recon(self) -> slice:
        return slice(self.dim_y, self.dim_y + self.dim_w)

    @property
    def sl_resid(self) -> slice:
        return slice(self.dim_y + self.dim_w, self.dim_y + 2 * self.dim_w)


def build_hat_path(prim, fine_grid: TimeGrid, y_fine: np.ndarray,
                   w_fine: np.ndarray) -> np.ndarray:
    """Accumulate the hat driver on the fine grid, node values (Nf+1, dhat)."""
    hs = HatStructure(prim.dim_y, prim.dim_w)
    nf = fine_grid.steps
    y = np.asarray(y_fine, dtype=np.float64)
    w = np.asarray(w_fine, dtype=np.float64)
    if y.shape != (nf + 1, prim.dim_y) or w.shape != (nf + 1, prim.dim_w):
        raise DimensionError("hat path needs fine observation and noise paths "
                             f"with {nf + 1} nodes")
    out = np.zeros((nf + 1, hs.dim_hat))
    out[:, hs.sl_obs] = y
    dt = fine_grid.dt
    if prim.k_is_constant:
        k = prim.k_matrix(0.0, np.zeros(prim.dim_y))
        kp = moore_penrose(k)
        proj = np.eye(prim.dim_w) - kp @ k
        dy = np.diff(y, axis=0)
        if prim.h1 is not None:
            h1 = np.stack([prim.h1_vec(fine_grid.nodes[j], y[j]) for j in range(nf)])
            dy = dy - h1 * dt
        np.cumsum(dy @ kp.T, axis=0, out=out[1:, hs.sl_recon])
        np.cumsum(np.diff(w, axis=0) @ proj.T, axis=0, out=out[1:, hs.sl_resid])
        return out
    acc1 = np.zeros(prim.dim_w)
    acc2 = np.zeros(prim.dim_w)
    for j in range(nf):
        t = fine_grid.nodes[j]
        k = prim.k_matrix(t, y[j])
        kp = moore_penrose(k)
        acc1 = acc1 + kp @ (y[j + 1] - y[j] - prim.h1_vec(t, y[j]) * dt)
        acc2 = acc2 + (np.eye(prim.dim_w) - kp @ k) @ (w[j + 1] - w[j])
        out[j + 1, hs.sl_recon] = acc1
        out[j + 1, hs.sl_resid] = acc2
    return out


def build_hat_lift(prim, coarse_grid: TimeGrid, refine_factor: int,
                   y_fine: np.ndarray, w_fine: np.ndarray, alpha: float,
                   meta: dict | None = None) -> RoughPath:
    fine = coarse_grid.refine(refine_factor)
    hat = build_hat_path(prim, fine, y_fine, w_fine)
    md = dict(meta or {})
    md.setdefault("hat_dims", (prim.dim_y, prim.dim_w))
    return lift_ito(coarse_grid, hat, refine_factor, alpha, meta=md)


def kernel_leak(prim, hat_rp: RoughPath) -> float:
    """sup |k . (residual-block increments)|; zero in exact arithmetic since
    that block lives in the kernel of k (identically zero for full rank)."""
    hs = HatStructure(prim.dim_y, prim.dim_w)
    if not prim.k_is_constant:
        raise DimensionError("kernel leak check assumes a constant k")
    k = prim.k_matrix(0.0, np.zeros(prim.dim_y))
    inc = hat_rp.increments[:, hs.sl_resid]
    return float(np.max(np.abs(inc @ k.T))) if inc.size else 0.0


def extend_coefficients(prim) -> CoefficientSet:
    """Coefficients against the hat driver; dim_y becomes d_Y + 2 d_W."""
    hs = HatStructure(prim.dim_y, prim.dim_w)
    dh = hs.dim_hat
    dy, dw, dx = prim.dim_y, prim.dim_w, prim.dim_x

    def b(t, x, yh):
        y = yh[hs.sl_obs]
        fb = prim.fbar(t, x, y)
        return prim.bbar(t, x, y) - np.einsum("...iw,...w->...i",
                                              fb, prim.h2(t, x, y))

    def f(t, x, yh):
        y = yh[hs.sl_obs]
        fb = prim.fbar(t, x, y)
        out = np.zeros(fb.shape[:-1] + (dh,))
        out[..., hs.sl_recon] = fb
        out[..., hs.sl_resid] = fb
        return out

    def dxf(t, x, yh):
        y = yh[hs.sl_obs]
        dfb = prim.dxfbar(t, x, y)
        out = np.zeros(dfb.shape[:1] + (dx, dh, dx))
        out[..., hs.sl_recon, :] = dfb
        out[..., hs.sl_resid, :] = dfb
        return out

    def dyf(t, x, yh):
        y = yh[hs.sl_obs]
        dfb = prim.dyfbar(t, x, y)
        out = np.zeros(dfb.shape[:1] + (dx, dh, dh))
        out[..., hs.sl_recon, hs.sl_obs] = dfb
        out[..., hs.sl_resid, hs.sl_obs] = dfb
        return out

    def h(t, x, yh):
        y = yh[hs.sl_obs]
        h2 = prim.h2(t, x, y)
        out = np.zeros(h2.shape[:-1] + (dh,))
        out[..., hs.sl_recon] = h2
        out[..., hs.sl_resid] = h2
        return out

    def dxh(t, x, yh):
        y = yh[hs.sl_obs]
        dh2 = prim.dxh2(t, x, y)
        out = np.zeros(dh2.shape[:1] + (dh, dx))
        out[..., hs.sl_recon, :] = dh2
        out[..., hs.sl_resid, :] = dh2
        return out

    def dyh(t, x, yh):
        y = yh[hs.sl_obs]
        dh2 = prim.dyh2(t, x, y)
        out = np.zeros(dh2.shape[:1] + (dh, dh))
        out[..., hs.sl_recon, hs.sl_obs] = dh2
        out[..., hs.sl_resid, hs.sl_obs] = dh2
        return out

    def sigma(t, x, yh):
        return prim.sigma(t, x, yh[hs.sl_obs])

    meta = dict(prim.meta)
    meta["name"] = str(meta.get("name", "primitive")) + "_extended"
    meta["hat_dims"] = (dy, dw)
    return CoefficientSet(dim_x=dx, dim_b=prim.dim_b, dim_y=dh, b=b,
                          sigma=sigma, f=f, dyf=dyf, h=h, dyh=dyh,
                          dxf=dxf, dxh=dxh, meta=meta)


@dataclass(frozen=True)
class DegenerateRun:
    ensemble: ParticleEnsemble
    hat_rp: RoughPath
    y_fine: np.ndarray
    w_fine: np.ndarray


def degenerate_filter(scn: ClassicalScenario, grid: TimeGrid, refine_factor: int,
                      m: int, seed: int,
                      phis=None, alpha: float = 0.45) -> DegenerateRun:
    """Simulate one observation/noise pair, build the hat lift, and run
    the extended particle filter on it."""
    if phis is None:
        phis = library(scn.dim_x)
    fine = grid.refine(refine_factor)
    sim = simulate_system(scn, fine, seed, n_paths=1)
    hat_rp = build_hat_lift(scn.prim, grid, refine_factor, sim.obs[0],
                            sim.noise_w[0], alpha, meta={"seed": seed})
    ext = extend_coefficients(scn.prim)
    ens = run_filter(ext, hat_rp, m, seed, phis, scn.init, store=False)
    return DegenerateRun(ensemble=ens, hat_rp=hat_rp,
                         y_fine=sim.obs[0], w_fine=sim.noise_w[0])


@dataclass(frozen=True)
class CollapseReport:
    max_gap: dict
    tol: float
    penrose: float

    @property
    def ok(self) -> bool:
        return max(self.max_gap.values()) <= self.tol and self.penrose <= PENROSE_TOL

    def as_dict(self) -> dict:
        return {"max_gap": dict(self.max_gap), "tol": self.tol,
                "penrose": self.penrose, "ok": self.ok}


def collapse_gap(scn: ClassicalScenario, grid: TimeGrid, refine_factor: int,
                 m: int, seed: int, phis=None, alpha: float = 0.45,
                 tol: float = 3e-3) -> CollapseReport:
    """Extended filter versus the reduced filter driven by the plain
    observation lift; k must be invertible.  Both runs share the seed, so
    initial draws and Brownian blocks coincide and the gap isolates the
    two drivers' schemes."""
    if scn.coeffs is None:
        raise DimensionError("collapse check needs an invertible-k scenario")
    if phis is None:
        phis = library(scn.dim_x)
    run = degenerate_filter(scn, grid, refine_factor, m, seed, phis, alpha)
    rp = lift_ito(grid, run.y_fine, refine_factor, alpha, meta={"seed": seed})
    red = run_filter(scn.coeffs, rp, m, seed, phis, scn.init, store=False)
    gaps = {}
    for tf in phis:
        gaps[tf.name] = float(np.max(np.abs(run.ensemble.sigma(tf) - red.sigma(tf))))
    k = scn.prim.k_matrix(0.0, np.zeros(scn.prim.dim_y))
    pen = penrose_defects(k, moore_penrose(k))
    return CollapseReport(max_gap=gaps, tol=tol, penrose=pen)
