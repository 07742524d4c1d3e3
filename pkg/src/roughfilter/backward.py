r"""Backward value functions and the duality certificate.

For a terminal test function phi the backward value at a checkpoint c is

    u_c(x) = E[ phi(X_T) Z_T | X_c = x, Z_c = 1 ]

estimated pointwise on a spatial grid by inner Monte Carlo restarted at
(c, x) with fresh Brownian streams per checkpoint.  Against the forward
particle filter this gives the duality check: t -> mu_t(u_t) is constant
up to Monte Carlo error, interpolation error, and grid curvature.

The backward expansion over a window [s, t], coefficients at the right
endpoint, is

    u_s - u_t = (t - s) (A u_t - Gamma'_{lk} u_t qv^{kl})
                + Gamma_k u_t dY^k
                + (Gamma_k Gamma_l - Gamma'_{kl}) u_t YY^{kl} + remainder,

probed on interior grid cells with derivatives by central differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .coeffs import CoefficientSet
from .errors import CapabilityError, ConfigurationError, InvalidRunError
from .operators import (OperatorContext, a_vals, gamma_prime_vals,
                        gamma_second_backward_vals, gamma_vals)
from .roughpath import RoughPath, chen_extend
from .rsde import propagate
from .testfuncs import TestFunction


def _std_err(values: np.ndarray) -> float:
    m = values.shape[0]
    if m < 2:
        return 0.0
    mean = rng.tree_mean(values)
    var = rng.tree_mean((values - mean) ** 2) * m / (m - 1)
    return float(np.sqrt(var / m))


@dataclass(frozen=True)
class SpaceBox:
    lo: np.ndarray
    hi: np.ndarray

    def outside(self, x: np.ndarray) -> np.ndarray:
        return np.any((x < self.lo) | (x > self.hi), axis=-1)


def pilot_box(coeffs: CoefficientSet, rp: RoughPath, x0, m: int = 2048,
              seed: int = 0, pad: float = 5.0) -> SpaceBox:
    """Envelope of the signal cloud: per-node mean +/- pad * std, extremized
    over nodes.  Weightless pilot run."""
    from .particle import _resolve_x0

    x0 = _resolve_x0(x0, m, seed, coeffs.dim_x)
    lo = np.full(coeffs.dim_x, np.inf)
    hi = np.full(coeffs.dim_x, -np.inf)

    def obs(i, x, z, cache):
        nonlocal lo, hi
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        lo = np.minimum(lo, mean - pad * std)
        hi = np.maximum(hi, mean + pad * std)

    propagate(coeffs, rp, x0, seed, with_weights=False, observers=(obs,))
    return SpaceBox(lo=lo, hi=hi)


def grid_axes(box: SpaceBox, points: int) -> tuple:
    return tuple(np.linspace(box.lo[j], box.hi[j], points)
                 for j in range(box.lo.size))


def _tensor_points(axes: Sequence[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


@dataclass(frozen=True)
class BackwardSolution:
    """Backward values per test function on (checkpoint, spatial grid)."""

    axes: tuple
    node_indices: np.ndarray
    times: np.ndarray
    values: dict
    stderr: dict
    exit_fraction: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return len(self.axes)

    def _interp_field(self, field_vals: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.dim == 1:
            return np.interp(x[:, 0], self.axes[0], field_vals)
        from scipy.interpolate import RegularGridInterpolator

        it = RegularGridInterpolator(self.axes, field_vals, method="linear",
                                     bounds_error=False, fill_value=None)
        return it(x)

    def interp(self, name: str, ci: int, x: np.ndarray) -> np.ndarray:
        return self._interp_field(self.values[name][ci], x)

    def interp_stderr(self, name: str, ci: int, x: np.ndarray) -> np.ndarray:
        return self._interp_field(self.stderr[name][ci], x)

    def curvature_bound(self, name: str, ci: int) -> float:
        """max over axes and grid of |second difference| / spacing^2."""
        u = self.values[name][ci]
        worst = 0.0
        for j, ax in enumerate(self.axes):
            dd = np.diff(u, n=2, axis=j) / (ax[1] - ax[0]) ** 2
            if dd.size:
                worst = max(worst, float(np.max(np.abs(dd))))
        return worst


def write_backward_csv(path: str, sol: BackwardSolution, name: str) -> str:
    """One row per (checkpoint, grid point): t, coordinates, value, stderr."""
    pts = _tensor_points(sol.axes)
    header = ["t"] + [f"x_{j + 1}" for j in range(sol.dim)] + ["u", "stderr"]
    rows = [header]
    for ci in range(sol.node_indices.size):
        u = sol.values[name][ci].reshape(-1)
        se = sol.stderr[name][ci].reshape(-1)
        t = repr(float(sol.times[ci]))
        for g in range(pts.shape[0]):
            rows.append([t] + [repr(float(c)) for c in pts[g]]
                        + [repr(float(u[g])), repr(float(se[g]))])
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return path


def solve_backward_fk(coeffs: CoefficientSet, rp: RoughPath,
                      phis: Sequence[TestFunction], checkpoints: Sequence[int],
                      axes: Sequence[np.ndarray], m_inner: int, seed: int,
                      box: SpaceBox | None = None) -> BackwardSolution:
    """Inner Monte Carlo for u at every checkpoint and grid point.

    One propagation per checkpoint carries all grid points at once
    (m_inner inner particles each, weight restarted at one); every phi is
    evaluated on the same terminal cloud.  The terminal checkpoint, if
    present, is the exact terminal condition.  Streams are keyed by the
    checkpoint node, so no draws are shared across checkpoints.
    """
    checkpoints = sorted(int(c) for c in checkpoints)
    if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > rp.steps):
        raise ConfigurationError(f"checkpoints must lie in [0, {rp.steps}]")
    if len(set(checkpoints)) != len(checkpoints):
        raise ConfigurationError("duplicate checkpoints")
    axes = tuple(np.asarray(a, dtype=np.float64) for a in axes)
    if len(axes) != coeffs.dim_x:
        raise ConfigurationError(f"need {coeffs.dim_x} spatial axes, got {len(axes)}")
    pts = _tensor_points(axes)
    kshape = tuple(a.size for a in axes)
    ktot = pts.shape[0]
    n_c = len(checkpoints)
    values = {tf.name: np.empty((n_c,) + kshape) for tf in phis}
    stderr = {tf.name: np.empty((n_c,) + kshape) for tf in phis}
    exit_frac = np.zeros(n_c)
    for ci, c in enumerate(checkpoints):
        if c == rp.steps:
            for tf in phis:
                values[tf.name][ci] = tf.fn(pts).reshape(kshape)
                stderr[tf.name][ci] = 0.0
            continue
        x0 = np.repeat(pts, m_inner, axis=0)
        outside = np.zeros(ktot * m_inner, dtype=bool)
        observers = ()
        if box is not None:
            def track(i, x, z, cache):
                np.logical_or(outside, box.outside(x), out=outside)
            observers = (track,)
        res = propagate(coeffs, rp, x0, seed, bm_label=f"backward:{c}",
                        start=c, observers=observers)
        exit_frac[ci] = float(outside.mean()) if box is not None else 0.0
        for tf in phis:
            v = (tf.fn(res.final_states) * res.final_weights).reshape(ktot, m_inner)
            inner_first = v.T
            mean = rng.tree_mean(inner_first, axis=0)
            var = rng.tree_mean((inner_first - mean) ** 2, axis=0) \
                * m_inner / (m_inner - 1)
            values[tf.name][ci] = mean.reshape(kshape)
            stderr[tf.name][ci] = np.sqrt(var / m_inner).reshape(kshape)
    return BackwardSolution(axes=axes, node_indices=np.array(checkpoints),
                            times=rp.grid.nodes[np.array(checkpoints, dtype=int)],
                            values=values, stderr=stderr,
                            exit_fraction=exit_frac,
                            meta={"seed": seed, "m_inner": m_inner})


@dataclass(frozen=True)
class DualityRow:
    phi_name: str
    node: int
    t: float
    pairing: float
    target: float
    diff: float
    budget: float

    @property
    def ok(self) -> bool:
        return self.diff <= self.budget


@dataclass(frozen=True)
class DualityReport:
    rows: tuple
    exit_tol: float

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def as_dict(self) -> dict:
        return {"exit_tol": self.exit_tol, "ok": self.ok,
                "rows": [
                    {"phi": r.phi_name, "node": r.node, "t": r.t,
                     "pairing": r.pairing, "target": r.target,
                     "diff": r.diff, "budget": r.budget, "ok": r.ok}
                    for r in self.rows
                ]}


def duality_check(ensemble, sol: BackwardSolution,
                  phis: Sequence[TestFunction], exit_tol: float = 0.01) -> DualityReport:
    """mu_c(u_c) against the terminal mu_T(phi) at every checkpoint.

    The budget combines three sources: Monte Carlo error of the pairing
    and of the target (3x each), the inner values' interpolated standard
    errors paired against |Z| (an L1 bound, 3x), and a midpoint
    interpolation bias of curvature * dx^2 / 8 times the mass.
    """
    rp = ensemble.rp
    n = rp.steps
    nodes = [int(c) for c in sol.node_indices]
    caught: dict[int, tuple] = {}
    if ensemble.stores_paths:
        for c in nodes:
            caught[c] = (ensemble.states[c], ensemble.weights[c])
    else:
        wanted = set(nodes)

        def grab(i, x, z, cache):
            if i in wanted:
                caught[i] = (x.copy(), z.copy())

        ensemble.scan([grab])
    dx = max(float(ax[1] - ax[0]) for ax in sol.axes)
    lo = np.array([ax[0] for ax in sol.axes])
    hi = np.array([ax[-1] for ax in sol.axes])
    rows = []
    for ci, c in enumerate(nodes):
        x, z = caught[c]
        frac_out = float(np.mean(np.any((x < lo) | (x > hi), axis=1)))
        if frac_out > exit_tol:
            raise InvalidRunError(
                f"{100 * frac_out:.2f}% of outer particles left the backward grid "
                f"at node {c}; widen the box or shorten the horizon")
        for tf in phis:
            u_at = sol.interp(tf.name, ci, x)
            vals = u_at * z
            pairing = float(rng.tree_mean(vals))
            se_pair = _std_err(vals)
            target = ensemble.mu(tf, n)
            se_target = ensemble.stderr(tf, n)
            inner_l1 = float(rng.tree_mean(sol.interp_stderr(tf.name, ci, x) * np.abs(z)))
            curv = sol.curvature_bound(tf.name, ci)
            mass = abs(ensemble.mass(c))
            budget = 3.0 * (se_pair + se_target + inner_l1) \
                + curv * dx * dx / 8.0 * mass
            rows.append(DualityRow(phi_name=tf.name, node=c,
                                   t=float(rp.grid.nodes[c]), pairing=pairing,
                                   target=target, diff=abs(pairing - target),
                                   budget=float(budget)))
    return DualityReport(rows=tuple(rows), exit_tol=exit_tol)


@dataclass(frozen=True)
class BackwardWindow:
    s: int
    t: int
    span: int
    residual: float
    noise_floor: float


def backward_davie_residual(ctx: OperatorContext, sol: BackwardSolution,
                            phi_name: str, trim: int = 2) -> list[BackwardWindow]:
    """Sup-norm expansion defect between consecutive checkpoints.

    Spatial derivatives of the right-endpoint slice come from central
    differences on the grid, so the first and last trim cells are
    excluded; the floor is the summed Monte Carlo error of the two
    slices (the differentiated noise is not modeled, which keeps this a
    diagnostic rather than a sharp gate).
    """
    if sol.dim != 1:
        raise CapabilityError("backward residual probe is one-dimensional only")
    ax = sol.axes[0]
    nodes = [int(c) for c in sol.node_indices]
    rp = ctx.rp
    dt = rp.grid.dt
    out = []
    inner = slice(trim, ax.size - trim if trim else None)
    for ci in range(len(nodes) - 1):
        c1, c2 = nodes[ci], nodes[ci + 1]
        u1 = sol.values[phi_name][ci]
        u2 = sol.values[phi_name][ci + 1]
        x = ax[:, None]
        cache = ctx.eval(c2, x)
        grad = np.gradient(u2, ax)[:, None]
        hess = np.gradient(grad[:, 0], ax)[:, None, None]
        qv = ctx.qv(min(c2, rp.steps - 1))
        drift = a_vals(cache, qv, grad, hess)
        gp = gamma_prime_vals(cache, u2, grad)
        drift = drift - np.einsum("mlk,kl->m", gp, qv)
        g1 = gamma_vals(cache, u2, grad)
        g2b = gamma_second_backward_vals(cache, u2, grad, hess)
        dy, yy = chen_extend(rp, c1, c2)
        r = (u1 - u2) - (c2 - c1) * dt * drift
        r -= g1 @ dy
        r -= np.einsum("mkl,kl->m", g2b, yy)
        floor = sol.stderr[phi_name][ci] + sol.stderr[phi_name][ci + 1]
        out.append(BackwardWindow(
            s=c1, t=c2, span=c2 - c1,
            residual=float(np.max(np.abs(r[inner]))),
            noise_floor=float(np.max(floor[inner]))))
    return out
