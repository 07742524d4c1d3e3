r"""Particle representation of the unnormalized and normalized filters.

An ensemble propagates M particles once and caches, at every grid node
and for every registered test function phi,

    mu_t(phi)     = (1/M) sum_m phi(X_t^m) Z_t^m        (unnormalized)
    sigma_t(phi)  = mu_t(phi) / mu_t(1)                 (normalized)

together with the second moments needed for Monte Carlo standard
errors.  Per-particle trajectories are kept only when they fit a memory
budget; everything else re-derives path functionals with scan(), which
replays the (deterministic) propagation and feeds read-only observers.

The normalized stderr uses the delta method: the empirical mean of
(phi - sigma) Z vanishes identically, so its second moment over M
drives the error of the ratio.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .coeffs import CoefficientSet
from .errors import ConfigurationError, DegenerateMassError, DimensionError
from .roughpath import RoughPath, geometrify, rho_alpha, _identity_defect
from .rsde import EvalCache, eval_coeffs, propagate
from .testfuncs import TestFunction, library, one

MASS_FLOOR = 1e-12
STORE_BUDGET_DOUBLES = 2**24


def _resolve_x0(x0, m: int, seed: int, dim_x: int) -> np.ndarray:
    if callable(x0):
        x0 = x0(m, seed)
    elif hasattr(x0, "sample"):
        x0 = x0.sample(m, seed)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (m, dim_x):
        raise DimensionError(f"x0 must have shape ({m}, {dim_x}), got {x0.shape}")
    return x0


class ParticleEnsemble:
    """One propagated particle system with per-node moment caches."""

    def __init__(self, coeffs: CoefficientSet, rp: RoughPath, m: int, seed: int,
                 phis: Sequence[TestFunction], x0: np.ndarray,
                 bm_label: str = "signal", bm_substeps: int = 1,
                 store: bool | str = "auto"):
        if m < 1:
            raise ConfigurationError(f"particle count must be >= 1, got {m}")
        self.coeffs = coeffs
        self.rp = rp
        self.m = int(m)
        self.seed = int(seed)
        self.bm_label = bm_label
        self.bm_substeps = int(bm_substeps)
        self.x0 = _resolve_x0(x0, self.m, self.seed, coeffs.dim_x)
        self.phis: dict[str, TestFunction] = {}
        for tf in phis:
            if tf.name in self.phis:
                raise ConfigurationError(f"duplicate test function name {tf.name}")
            self.phis[tf.name] = tf
        if "one" not in self.phis:
            self.phis["one"] = one(coeffs.dim_x)
        if store == "auto":
            need = (rp.steps + 1) * self.m * (coeffs.dim_x + 1)
            store = need <= STORE_BUDGET_DOUBLES
        n1 = rp.steps + 1
        self.node_mu = {name: np.empty(n1) for name in self.phis}
        self.node_m2 = {name: np.empty(n1) for name in self.phis}
        self.node_xz = {name: np.empty(n1) for name in self.phis}

        def cache_obs(i: int, x: np.ndarray, z: np.ndarray, cache: EvalCache) -> None:
            z2 = z * z
            for name, tf in self.phis.items():
                v = tf.fn(x) * z
                self.node_mu[name][i] = rng.tree_mean(v)
                self.node_m2[name][i] = rng.tree_mean(v * v)
                self.node_xz[name][i] = rng.tree_mean(v * z)
            del z2

        res = propagate(coeffs, rp, self.x0, self.seed, bm_label=bm_label,
                        bm_substeps=self.bm_substeps, observers=(cache_obs,),
                        store=bool(store))
        self.final_states = res.final_states
        self.final_weights = res.final_weights
        self.states = res.states
        self.weights = res.weights

    @property
    def stores_paths(self) -> bool:
        return self.states is not None

    def _name(self, phi) -> str:
        name = phi if isinstance(phi, str) else phi.name
        if name not in self.phis:
            raise ConfigurationError(f"test function {name} not registered with this ensemble")
        return name

    def mu(self, phi, t_index: int | None = None):
        series = self.node_mu[self._name(phi)]
        return series.copy() if t_index is None else float(series[t_index])

    def mass(self, t_index: int | None = None):
        return self.mu("one", t_index)

    def sigma(self, phi, t_index: int | None = None):
        mass = self.node_mu["one"]
        if float(np.min(np.abs(mass))) < MASS_FLOOR:
            bad = int(np.argmin(np.abs(mass)))
            raise DegenerateMassError(
                f"unnormalized mass {mass[bad]:.3e} below {MASS_FLOOR:g} at node {bad}")
        series = self.node_mu[self._name(phi)] / mass
        return series.copy() if t_index is None else float(series[t_index])

    def stderr(self, phi, t_index: int | None = None):
        if self.m < 2:
            raise ConfigurationError("standard errors need at least 2 particles")
        name = self._name(phi)
        var = (self.node_m2[name] - self.node_mu[name] ** 2) * self.m / (self.m - 1)
        se = np.sqrt(np.maximum(var, 0.0) / self.m)
        return se.copy() if t_index is None else float(se[t_index])

    def sigma_stderr(self, phi, t_index: int | None = None):
        if self.m < 2:
            raise ConfigurationError("standard errors need at least 2 particles")
        name = self._name(phi)
        mass = self.node_mu["one"]
        sig = self.node_mu[name] / mass
        second = self.node_m2[name] - 2.0 * sig * self.node_xz[name] \
            + sig * sig * self.node_m2["one"]
        se = np.sqrt(np.maximum(second, 0.0) / (self.m - 1)) / mass
        return se.copy() if t_index is None else float(se[t_index])

    def scan(self, observers: Sequence[Callable]) -> None:
        """Replay the propagation, feeding observers (i, X, Z, cache).

        Uses stored trajectories when available; otherwise re-propagates
        with the original seed, which reproduces the run bitwise.
        """
        if self.stores_paths:
            t = self.rp.grid.nodes
            for i in range(self.rp.steps + 1):
                x = self.states[i]
                z = self.weights[i]
                cache = eval_coeffs(self.coeffs, i, t[i], x, self.rp.first[i])
                for obs in observers:
                    obs(i, x, z, cache)
        else:
            propagate(self.coeffs, self.rp, self.x0, self.seed,
                      bm_label=self.bm_label, bm_substeps=self.bm_substeps,
                      observers=tuple(observers), store=False)


def run_filter(coeffs: CoefficientSet, rp: RoughPath, m: int, seed: int,
               phis: Sequence[TestFunction] | None = None, x0=None,
               *, bm_label: str = "signal", bm_substeps: int = 1,
               store: bool | str = "auto") -> ParticleEnsemble:
    """Propagate a particle system and cache filter curves for phis.

    x0 may be an (M, d_X) array, a callable (m, seed) -> array, or any
    object with a sample(m, seed) method.
    """
    if phis is None:
        phis = library(coeffs.dim_x)
    if x0 is None:
        raise ConfigurationError("run_filter needs an initial law or initial states")
    return ParticleEnsemble(coeffs, rp, m, seed, phis, x0,
                            bm_label=bm_label, bm_substeps=bm_substeps, store=store)


def mu(ensemble: ParticleEnsemble, phi, t_index: int | None = None):
    return ensemble.mu(phi, t_index)


def sigma(ensemble: ParticleEnsemble, phi, t_index: int | None = None):
    return ensemble.sigma(phi, t_index)


def mc_stderr(ensemble: ParticleEnsemble, phi, t_index: int | None = None):
    return ensemble.stderr(phi, t_index)


@dataclass(frozen=True)
class Perturbation:
    kind: str
    amount: float = 0.0

    @property
    def ident(self) -> str:
        if self.kind == "area_shift":
            return f"area_shift[{self.amount:g}]"
        return self.kind


def perturb_driver(rp: RoughPath, pert: Perturbation) -> RoughPath:
    """Apply a second-level perturbation, keeping the bracket identity."""
    if pert.kind == "none":
        return rp
    if pert.kind == "geometrify":
        return geometrify(rp)
    if pert.kind == "area_shift":
        shift = pert.amount * rp.grid.dt * np.eye(rp.dim)
        second = rp.second + shift[None, :, :]
        bracket = _identity_defect(rp.increments, second)
        meta = dict(rp.meta)
        meta["kind"] = f"{pert.ident}:" + str(meta.get("kind", "unknown"))
        return RoughPath(rp.grid, rp.first, second, bracket, rp.alpha, meta)
    raise ConfigurationError(f"unknown perturbation kind {pert.kind!r}")


@dataclass(frozen=True)
class PerturbRow:
    perturb_id: str
    rho: float
    diffs: dict
    ratios: dict
    paired_se: dict

    @property
    def diff_max(self) -> float:
        return max(self.diffs.values())

    @property
    def ratio_max(self) -> float:
        return max(self.ratios.values())


@dataclass(frozen=True)
class RobustnessReport:
    base_mu: dict
    rows: tuple

    def to_csv_rows(self) -> list[list[str]]:
        out = [["perturb_id", "rho_alpha", "diff", "ratio"]]
        for r in self.rows:
            out.append([r.perturb_id, format(r.rho, ".17g"),
                        format(r.diff_max, ".17g"), format(r.ratio_max, ".17g")])
        return out

    def as_dict(self) -> dict:
        return {
            "base_mu": dict(self.base_mu),
            "rows": [
                {"perturb_id": r.perturb_id, "rho_alpha": r.rho,
                 "diffs": dict(r.diffs), "ratios": dict(r.ratios),
                 "paired_se": dict(r.paired_se)}
                for r in self.rows
            ],
        }


def robustness_probe(coeffs: CoefficientSet, rp: RoughPath,
                     perturbations: Sequence[Perturbation],
                     phis: Sequence[TestFunction], m: int, seed: int, x0,
                     threads: int = 1, bm_label: str = "signal") -> RobustnessReport:
    """Terminal filter sensitivity under driver perturbations.

    All runs share the seed (common random numbers), so per-phi
    differences carry only the driver change plus a paired Monte Carlo
    error, reported as paired_se from per-particle terminal values.
    """
    base = run_filter(coeffs, rp, m, seed, phis, x0, bm_label=bm_label, store=False)
    names = [tf.name for tf in phis]

    def term_values(ens: ParticleEnsemble) -> dict:
        return {name: ens.phis[name].fn(ens.final_states) * ens.final_weights
                for name in names}

    v_base = term_values(base)
    n = rp.steps

    def run_one(pert: Perturbation):
        rp_p = perturb_driver(rp, pert)
        rho = rho_alpha(rp, rp_p)
        ens = run_filter(coeffs, rp_p, m, seed, phis, x0, bm_label=bm_label, store=False)
        v_p = term_values(ens)
        diffs, ratios, pses = {}, {}, {}
        for name in names:
            diffs[name] = abs(ens.mu(name, n) - base.mu(name, n))
            ratios[name] = diffs[name] / rho if rho > 0 else float("inf")
            delta = v_p[name] - v_base[name]
            dm = rng.tree_mean(delta)
            var = rng.tree_mean((delta - dm) ** 2) * m / max(m - 1, 1)
            pses[name] = float(np.sqrt(var / m))
        return PerturbRow(perturb_id=pert.ident, rho=rho, diffs=diffs,
                          ratios=ratios, paired_se=pses)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_one, perturbations))
    else:
        rows = [run_one(p) for p in perturbations]
    base_mu = {name: base.mu(name, n) for name in names}
    return RobustnessReport(base_mu=base_mu, rows=tuple(rows))


def write_filter_csv(path: str, ensemble: ParticleEnsemble) -> str:
    """Filter curves as rows (t, phi_name, mu, sigma, stderr)."""
    import csv as _csv

    t = ensemble.rp.grid.nodes
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["t", "phi_name", "mu", "sigma", "stderr"])
        for name in ensemble.phis:
            mu_s = ensemble.mu(name)
            sig_s = ensemble.sigma(name)
            se_s = ensemble.stderr(name)
            for i in range(len(t)):
                w.writerow([format(t[i], ".17g"), name,
                            format(mu_s[i], ".17g"), format(sig_s[i], ".17g"),
                            format(se_s[i], ".17g")])
    return path
