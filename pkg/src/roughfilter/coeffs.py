r"""Coefficient bundles for the signal/weight dynamics.

All callables are evaluated at (t, x, y) with scalar t, batched states
x of shape (..., d_X) and a single driver value y of shape (d_Y,); they
broadcast over the leading axes of x.  Index conventions:

    f(t, x, y)[..., i, k]        = f^i_k          (state row, driver column)
    dyf[..., i, k, e]            = d_{y_e} f^i_k
    dxf[..., i, k, j]            = d_{x_j} f^i_k
    h[..., k]                    = h_k            (row functional)
    dyh[..., k, e]               = d_{y_e} h_k
    dxh[..., k, j]               = d_{x_j} h_k

so a Jacobian's derivative direction is always the trailing axis.
``zdrift`` is an optional scalar drift on the weight used by the
Stratonovich-form transform; plain models leave it None.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .errors import CapabilityError, DimensionError

Coeff = Callable[..., np.ndarray]


@dataclass(frozen=True)
class CoefficientSet:
    dim_x: int
    dim_b: int
    dim_y: int
    b: Coeff
    sigma: Coeff
    f: Coeff
    dyf: Coeff
    h: Coeff
    dyh: Coeff
    dxf: Coeff
    dxh: Coeff
    dxb: Coeff | None = None
    dxsigma: Coeff | None = None
    dxxf: Coeff | None = None
    dxxh: Coeff | None = None
    zdrift: Coeff | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def check_shapes(self, t: float = 0.0, batch: int = 3) -> None:
        """Evaluate every callable once and verify the declared shapes."""
        x = np.zeros((batch, self.dim_x))
        y = np.zeros(self.dim_y)
        want = {
            "b": (batch, self.dim_x),
            "sigma": (batch, self.dim_x, self.dim_b),
            "f": (batch, self.dim_x, self.dim_y),
            "dyf": (batch, self.dim_x, self.dim_y, self.dim_y),
            "h": (batch, self.dim_y),
            "dyh": (batch, self.dim_y, self.dim_y),
            "dxf": (batch, self.dim_x, self.dim_y, self.dim_x),
            "dxh": (batch, self.dim_y, self.dim_x),
        }
        optional = {
            "dxb": (batch, self.dim_x, self.dim_x),
            "dxsigma": (batch, self.dim_x, self.dim_b, self.dim_x),
            "dxxf": (batch, self.dim_x, self.dim_y, self.dim_x, self.dim_x),
            "dxxh": (batch, self.dim_y, self.dim_x, self.dim_x),
            "zdrift": (batch,),
        }
        for name, shape in want.items():
            got = np.asarray(getattr(self, name)(t, x, y)).shape
            if got != shape:
                raise DimensionError(f"{name}(t, x, y) returned shape {got}, expected {shape}")
        for name, shape in optional.items():
            fn = getattr(self, name)
            if fn is None:
                continue
            got = np.asarray(fn(t, x, y)).shape
            if got != shape:
                raise DimensionError(f"{name}(t, x, y) returned shape {got}, expected {shape}")

    def require(self, name: str) -> Coeff:
        fn = getattr(self, name)
        if fn is None:
            raise CapabilityError(f"coefficient set {self.meta.get('name', '?')} "
                                  f"does not provide {name}")
        return fn


@dataclass(frozen=True)
class FDCheckReport:
    max_errors: dict
    tol: float
    n_probes: int

    @property
    def ok(self) -> bool:
        return all(v <= self.tol for v in self.max_errors.values())

    def as_dict(self) -> dict:
        return {"max_errors": dict(self.max_errors), "tol": self.tol,
                "n_probes": self.n_probes, "ok": self.ok}


def _rel_err(fd: np.ndarray, an: np.ndarray) -> float:
    scale = np.maximum(1.0, np.abs(an))
    return float(np.max(np.abs(fd - an) / scale))


def fd_check(coeffs: CoefficientSet, n_probes: int = 100, seed: int = 20260814,
             step: float = 1e-5, tol: float = 1e-6, t_max: float = 1.0,
             x_scale: float = 1.5, y_scale: float = 1.5) -> FDCheckReport:
    """Cross-check analytic Jacobians against central differences.

    Probes are standard-normal states and driver values (scaled), spread
    over a handful of times; errors are relative with a unit floor.
    """
    gen = rng.generator(seed, "fd_check")
    n_t = 5
    per = max(1, n_probes // n_t)
    errs: dict[str, float] = {}

    def acc(name, val):
        errs[name] = max(errs.get(name, 0.0), val)

    for it in range(n_t):
        t = t_max * it / n_t
        x = x_scale * gen.standard_normal((per, coeffs.dim_x))
        y = y_scale * gen.standard_normal(coeffs.dim_y)

        an_dxf = coeffs.dxf(t, x, y)
        an_dxh = coeffs.dxh(t, x, y)
        for j in range(coeffs.dim_x):
            e = np.zeros(coeffs.dim_x)
            e[j] = step
            fd_f = (coeffs.f(t, x + e, y) - coeffs.f(t, x - e, y)) / (2 * step)
            acc("dxf", _rel_err(fd_f, an_dxf[..., j]))
            fd_h = (coeffs.h(t, x + e, y) - coeffs.h(t, x - e, y)) / (2 * step)
            acc("dxh", _rel_err(fd_h, an_dxh[..., j]))
            if coeffs.dxb is not None:
                fd_b = (coeffs.b(t, x + e, y) - coeffs.b(t, x - e, y)) / (2 * step)
                acc("dxb", _rel_err(fd_b, coeffs.dxb(t, x, y)[..., j]))
            if coeffs.dxsigma is not None:
                fd_s = (coeffs.sigma(t, x + e, y) - coeffs.sigma(t, x - e, y)) / (2 * step)
                acc("dxsigma", _rel_err(fd_s, coeffs.dxsigma(t, x, y)[..., j]))
            if coeffs.dxxf is not None:
                fd_ff = (coeffs.dxf(t, x + e, y) - coeffs.dxf(t, x - e, y)) / (2 * step)
                acc("dxxf", _rel_err(fd_ff, coeffs.dxxf(t, x, y)[..., j]))
            if coeffs.dxxh is not None:
                fd_hh = (coeffs.dxh(t, x + e, y) - coeffs.dxh(t, x - e, y)) / (2 * step)
                acc("dxxh", _rel_err(fd_hh, coeffs.dxxh(t, x, y)[..., j]))

        an_dyf = coeffs.dyf(t, x, y)
        an_dyh = coeffs.dyh(t, x, y)
        for e_idx in range(coeffs.dim_y):
            e = np.zeros(coeffs.dim_y)
            e[e_idx] = step
            fd_f = (coeffs.f(t, x, y + e) - coeffs.f(t, x, y - e)) / (2 * step)
            acc("dyf", _rel_err(fd_f, an_dyf[..., e_idx]))
            fd_h = (coeffs.h(t, x, y + e) - coeffs.h(t, x, y - e)) / (2 * step)
            acc("dyh", _rel_err(fd_h, an_dyh[..., e_idx]))

    return FDCheckReport(max_errors=errs, tol=tol, n_probes=n_t * per)
