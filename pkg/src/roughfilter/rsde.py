r"""Davie-type one-step schemes for the signal and weight dynamics.

Signal step over [t_i, t_{i+1}], all coefficients at (t_i, X_i, Y_{t_i}):

    X_{i+1} = X_i + b dt + sigma dB_i + f dY_i
              + sum_{k,l} ( dxf[i,l,j] f[j,k] + dyf[i,l,k] ) YY_i^{k l}

Weight step (multiplicative, no randomness of its own):

    Z_{i+1} = Z_i * ( 1 + h_k dY_i^k
              + sum_{k,l} ( h_l h_k + dxh[l,j] f[j,k] + dyh[l,k] ) YY_i^{k l}
              + zdrift dt )

where zdrift is the optional scalar weight drift installed by the
Stratonovich-form transform and zero otherwise.

The exponential route integrates the controlled integrand h along the
driver, subtracts half the Young integral of h (x) h against the
bracket, and exponentiates.

All solvers draw Brownian increments as per-step blocks keyed by
(seed, label, step index); the particle is the row inside the block.
With bm_substeps = r the step increment is the sum of r sub-blocks
keyed by the fine step index, which lets a fine-grid Euler reference
consume bitwise the same noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .coeffs import CoefficientSet
from .controlled import ControlledPath, rough_integral, young_integral
from .errors import BlowUpError, DimensionError
from .roughpath import RoughPath, TimeGrid, geometrify

X_BLOWUP = 1e8
Z_BLOWUP = 1e12


@dataclass(frozen=True)
class EvalCache:
    """All coefficient fields at one (t_i, X, Y_{t_i}), shared per step."""

    index: int
    t: float
    y: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    f: np.ndarray
    dyf: np.ndarray
    h: np.ndarray
    dyh: np.ndarray
    dxf: np.ndarray
    dxh: np.ndarray
    zdrift: np.ndarray | None


def eval_coeffs(coeffs: CoefficientSet, i: int, t: float, x: np.ndarray,
                y: np.ndarray) -> EvalCache:
    return EvalCache(
        index=i, t=t, y=y,
        b=coeffs.b(t, x, y),
        sigma=coeffs.sigma(t, x, y),
        f=coeffs.f(t, x, y),
        dyf=coeffs.dyf(t, x, y),
        h=coeffs.h(t, x, y),
        dyh=coeffs.dyh(t, x, y),
        dxf=coeffs.dxf(t, x, y),
        dxh=coeffs.dxh(t, x, y),
        zdrift=None if coeffs.zdrift is None else coeffs.zdrift(t, x, y),
    )


def brownian_increment(seed: int, label: str, step: int, shape: tuple,
                       dt: float, substeps: int = 1) -> np.ndarray:
    if substeps == 1:
        return rng.normal_block(seed, (label, step), shape) * np.sqrt(dt)
    scale = np.sqrt(dt / substeps)
    total = np.zeros(shape)
    for s in range(substeps):
        total += rng.normal_block(seed, (label, step * substeps + s), shape) * scale
    return total


def signal_increment(cache: EvalCache, dy: np.ndarray, yy: np.ndarray,
                     db: np.ndarray, dt: float) -> np.ndarray:
    """Davie increment of the signal, shape (M, d_X)."""
    lvl2 = np.einsum("milj,mjk->milk", cache.dxf, cache.f) + cache.dyf
    out = cache.b * dt
    out += np.einsum("mib,mb->mi", cache.sigma, db)
    out += np.einsum("mik,k->mi", cache.f, dy)
    out += np.einsum("milk,kl->mi", lvl2, yy)
    return out


def weight_factor(cache: EvalCache, dy: np.ndarray, yy: np.ndarray,
                  dt: float) -> np.ndarray:
    """Multiplicative Davie factor of the weight, shape (M,)."""
    lvl2 = np.einsum("ml,mk->mlk", cache.h, cache.h)
    lvl2 += np.einsum("mlj,mjk->mlk", cache.dxh, cache.f)
    lvl2 += cache.dyh
    fac = 1.0 + np.einsum("mk,k->m", cache.h, dy)
    fac += np.einsum("mlk,kl->m", lvl2, yy)
    if cache.zdrift is not None:
        fac += cache.zdrift * dt
    return fac


Observer = Callable[[int, np.ndarray, np.ndarray, EvalCache], None]


@dataclass
class PropagateResult:
    final_states: np.ndarray
    final_weights: np.ndarray
    states: np.ndarray | None = None
    weights: np.ndarray | None = None


def propagate(coeffs: CoefficientSet, rp: RoughPath, x0: np.ndarray, seed: int,
              *, bm_label: str = "signal", bm_substeps: int = 1,
              start: int = 0, stop: int | None = None,
              weights0: np.ndarray | None = None, with_weights: bool = True,
              observers: Sequence[Observer] = (), store: bool = False) -> PropagateResult:
    """Vectorized Davie propagation of a particle batch over [t_start, t_stop].

    Observers run at every node with the pre-step state, including the
    final node; they must not mutate their arguments.  Results do not
    depend on observers or on the store flag.
    """
    if stop is None:
        stop = rp.steps
    if not (0 <= start <= stop <= rp.steps):
        raise DimensionError(f"need 0 <= start <= stop <= {rp.steps}, got ({start}, {stop})")
    x = np.array(x0, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != coeffs.dim_x:
        raise DimensionError(f"x0 has dim {x.shape[1]}, coefficients expect {coeffs.dim_x}")
    m = x.shape[0]
    z = np.ones(m) if weights0 is None else np.array(weights0, dtype=np.float64)
    t = rp.grid.nodes
    dt = rp.grid.dt
    states = weights = None
    if store:
        states = np.empty((stop - start + 1, m, coeffs.dim_x))
        weights = np.empty((stop - start + 1, m))
    for i in range(start, stop):
        cache = eval_coeffs(coeffs, i, t[i], x, rp.first[i])
        for obs in observers:
            obs(i, x, z, cache)
        if store:
            states[i - start] = x
            weights[i - start] = z
        dy = rp.increments[i]
        yy = rp.second[i]
        db = brownian_increment(seed, bm_label, i, (m, coeffs.dim_b), dt, bm_substeps)
        if with_weights:
            z = z * weight_factor(cache, dy, yy, dt)
        x = x + signal_increment(cache, dy, yy, db, dt)
        xmax = float(np.max(np.abs(x)))
        if not np.isfinite(xmax) or xmax > X_BLOWUP:
            raise BlowUpError(f"signal state left |x| <= {X_BLOWUP:g} during step {i}",
                              step=i, what="state")
        zmax = float(np.max(np.abs(z)))
        if not np.isfinite(zmax) or zmax > Z_BLOWUP:
            raise BlowUpError(f"weight left |z| <= {Z_BLOWUP:g} during step {i}",
                              step=i, what="weight")
    cache = eval_coeffs(coeffs, stop, t[stop], x, rp.first[stop])
    for obs in observers:
        obs(stop, x, z, cache)
    if store:
        states[stop - start] = x
        weights[stop - start] = z
    return PropagateResult(final_states=x, final_weights=z, states=states, weights=weights)


@dataclass(frozen=True)
class SolutionPath:
    """One particle's trajectory on the driver's grid (or a tail of it)."""

    grid: TimeGrid
    start: int
    states: np.ndarray
    weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.start : self.start + self.states.shape[0]]


def solve_signal(coeffs: CoefficientSet, rp: RoughPath, x0: np.ndarray, seed: int,
                 *, bm_label: str = "signal") -> SolutionPath:
    res = propagate(coeffs, rp, np.asarray(x0, dtype=np.float64)[None, :], seed,
                    bm_label=bm_label, with_weights=False, store=True)
    return SolutionPath(grid=rp.grid, start=0, states=res.states[:, 0, :],
                        meta={"seed": seed, "bm_label": bm_label})


def solve_weight_davie(coeffs: CoefficientSet, rp: RoughPath, signal: SolutionPath,
                       seed: int | None = None) -> np.ndarray:
    """Weight along a given signal path; the recursion consumes no noise
    (seed accepted for signature parity)."""
    del seed
    if signal.start != 0 or signal.states.shape[0] != rp.steps + 1:
        raise DimensionError("weight solve needs a whole-interval signal path")
    t = rp.grid.nodes
    dt = rp.grid.dt
    z = np.empty(rp.steps + 1)
    z[0] = 1.0
    for i in range(rp.steps):
        x = signal.states[i][None, :]
        cache = eval_coeffs(coeffs, i, t[i], x, rp.first[i])
        fac = weight_factor(cache, rp.increments[i], rp.second[i], dt)
        z[i + 1] = z[i] * fac[0]
        if not np.isfinite(z[i + 1]) or abs(z[i + 1]) > Z_BLOWUP:
            raise BlowUpError(f"weight left |z| <= {Z_BLOWUP:g} during step {i}",
                              step=i, what="weight")
    return z


def weight_controlled_integrand(coeffs: CoefficientSet, rp: RoughPath,
                                signal: SolutionPath) -> ControlledPath:
    """h along the signal as a controlled path: values h, Gubinelli
    derivative dxh . f + dyh (value slot first, derivative slot last)."""
    n1 = rp.steps + 1
    d = rp.dim
    vals = np.empty((n1, 1, d))
    gub = np.empty((n1, 1, d, d))
    t = rp.grid.nodes
    for i in range(n1):
        x = signal.states[i][None, :]
        y = rp.first[i]
        vals[i, 0] = coeffs.h(t[i], x, y)[0]
        gub[i, 0] = np.einsum("lj,jk->lk", coeffs.dxh(t[i], x, y)[0],
                              coeffs.f(t[i], x, y)[0]) + coeffs.dyh(t[i], x, y)[0]
    return ControlledPath(driver=rp, values=vals, gubinelli=gub)


def solve_weight_exponential(coeffs: CoefficientSet, rp: RoughPath,
                             signal: SolutionPath) -> np.ndarray:
    """Z = exp( int h dY - 1/2 int h [QVdot] h^T dr ) along the signal."""
    ctrl = weight_controlled_integrand(coeffs, rp, signal)
    integral = rough_integral(ctrl)[:, 0]
    hh = np.einsum("nak,nal->nkl", ctrl.values, ctrl.values)
    integral = integral - 0.5 * young_integral(hh, rp)
    if coeffs.zdrift is not None:
        t = rp.grid.nodes
        zd = np.array([coeffs.zdrift(t[i], signal.states[i][None, :], rp.first[i])[0]
                       for i in range(rp.steps)])
        drift = np.zeros(rp.steps + 1)
        np.cumsum(zd * rp.grid.dt, out=drift[1:])
        integral = integral + drift
    return np.exp(integral)


def solve_from(coeffs: CoefficientSet, rp: RoughPath, t_index: int, x: np.ndarray,
               seed: int, *, bm_label: str = "signal") -> SolutionPath:
    """Restart at node t_index with unit weight; Brownian keys use absolute
    step indices, so a restart at 0 reproduces the whole-interval solve."""
    res = propagate(coeffs, rp, np.asarray(x, dtype=np.float64)[None, :], seed,
                    bm_label=bm_label, start=t_index, store=True)
    return SolutionPath(grid=rp.grid, start=t_index, states=res.states[:, 0, :],
                        weights=res.weights[:, 0],
                        meta={"seed": seed, "bm_label": bm_label, "start": t_index})


def stratonovich_transform(coeffs: CoefficientSet, rp: RoughPath) -> tuple[CoefficientSet, RoughPath]:
    """Geometric-form system: corrected drift, scalar weight drift, and the
    geometrified driver.

    With the piecewise-constant bracket derivative the correction per step
    cancels the moved second-level mass exactly, so solving the returned
    system reproduces the original solution path for path-level checks.
    Derivative fields beyond those of the base set are not propagated.
    """
    bd = rp.bracket_derivative

    def qvdot(t: float) -> np.ndarray:
        return bd.values[rp.grid.step_of(t)]

    def b_circ(t, x, y):
        g = np.einsum("milj,mjk->milk", coeffs.dxf(t, x, y), coeffs.f(t, x, y))
        g = g + coeffs.dyf(t, x, y)
        return coeffs.b(t, x, y) - 0.5 * np.einsum("milk,kl->mi", g, qvdot(t))

    def z_circ(t, x, y):
        h = coeffs.h(t, x, y)
        w2 = np.einsum("ml,mk->mlk", h, h)
        w2 += np.einsum("mlj,mjk->mlk", coeffs.dxh(t, x, y), coeffs.f(t, x, y))
        w2 += coeffs.dyh(t, x, y)
        out = -0.5 * np.einsum("mlk,kl->m", w2, qvdot(t))
        if coeffs.zdrift is not None:
            out = out + coeffs.zdrift(t, x, y)
        return out

    meta = dict(coeffs.meta)
    meta["name"] = str(meta.get("name", "coeffs")) + "_stratonovich"
    circ = CoefficientSet(
        dim_x=coeffs.dim_x, dim_b=coeffs.dim_b, dim_y=coeffs.dim_y,
        b=b_circ, sigma=coeffs.sigma, f=coeffs.f, dyf=coeffs.dyf,
        h=coeffs.h, dyh=coeffs.dyh, dxf=coeffs.dxf, dxh=coeffs.dxh,
        zdrift=z_circ, meta=meta,
    )
    return circ, geometrify(rp)


def write_paths_csv(path: str, grid: TimeGrid, states: np.ndarray,
                    weights: np.ndarray) -> str:
    """Write particle trajectories as rows (particle, t, X_1..X_dx, Z).

    states: (steps+1, M, d_X), weights: (steps+1, M).
    """
    n1, m, d = states.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "t"] + [f"X_{k+1}" for k in range(d)] + ["Z"])
        for p in range(m):
            for i in range(n1):
                row = [str(p), format(grid.nodes[i], ".17g")]
                row += [format(v, ".17g") for v in states[i, p]]
                row.append(format(weights[i, p], ".17g"))
                w.writerow(row)
    return path
