r"""Controlled paths and compensated rough/Young integrals.

A controlled integrand against a driver Y stores, at every node,

    values[i]    in Lin(R^d, R^m),   entry [a, k]    = phi_i[a]_k,
    gubinelli[i] in Lin(R^d (x) R^d, R^m), entry [a, k, e] = phi'_i[a]_{k e},

where k is the integrand (value) slot contracted against dY and e is
the derivative slot: phi_{i+1}[a,k] ~ phi_i[a,k] + gubinelli[i][a,k,e] dY_i^e.

The compensated sum over one step contributes

    phi_i dY_i + phi'_i YY_i  with  (phi'_i YY_i)[a] = sum_{k,e} gub[a,k,e] YY_i^{e k},

i.e. the derivative slot pairs the first index of the second level.
This matches the expansion int phi dY ~ phi_s dY + phi'[a,k,e] int dY^e dY^k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .roughpath import RoughPath


@dataclass(frozen=True)
class ControlledPath:
    """Integrand values and Gubinelli derivatives at the driver's nodes."""

    driver: RoughPath
    values: np.ndarray
    gubinelli: np.ndarray

    def __post_init__(self):
        n1 = self.driver.steps + 1
        d = self.driver.dim
        vals = np.asarray(self.values, dtype=np.float64)
        gub = np.asarray(self.gubinelli, dtype=np.float64)
        if vals.ndim == 2:
            vals = vals[:, None, :]
        if gub.ndim == 3:
            gub = gub[:, None, :, :]
        if vals.shape[0] != n1 or vals.shape[2] != d:
            raise DimensionError(
                f"values must be (steps+1, m, {d}), got {self.values.shape}"
            )
        m = vals.shape[1]
        if gub.shape != (n1, m, d, d):
            raise DimensionError(
                f"gubinelli must be ({n1}, {m}, {d}, {d}), got {self.gubinelli.shape}"
            )
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "gubinelli", gub)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def remainder_increments(self) -> np.ndarray:
        """R_i = phi_{i+1} - phi_i - phi'_i dY_i, shape (steps, m, d).

        Diagnostic for the controlled structure; the fitted decay
        exponent of max_i |R_i| under refinement should approach
        2 alpha for genuinely controlled integrands.
        """
        dy = self.driver.increments
        pred = np.einsum("nake,ne->nak", self.gubinelli[:-1], dy)
        return self.values[1:] - self.values[:-1] - pred


def rough_integral(ctrl: ControlledPath) -> np.ndarray:
    """Cumulative compensated integral at the nodes, shape (steps+1, m)."""
    rp = ctrl.driver
    terms = np.einsum("nak,nk->na", ctrl.values[:-1], rp.increments)
    terms += np.einsum("nake,nek->na", ctrl.gubinelli[:-1], rp.second)
    out = np.zeros((rp.steps + 1, ctrl.width))
    np.cumsum(terms, axis=0, out=out[1:])
    return out


def young_integral(g: np.ndarray, rp: RoughPath) -> np.ndarray:
    """Cumulative int g d[Y] with left-point increments, shape (steps+1,).

    g pairs the bracket in the Frobenius sense: g may be (steps+1, d, d)
    (node values of a matrix integrand), or (steps+1,) for d = 1.
    """
    d = rp.dim
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        if d != 1:
            raise DimensionError("scalar integrand only valid for a 1-d driver")
        g = g[:, None, None]
    if g.shape != (rp.steps + 1, d, d):
        raise DimensionError(
            f"integrand must be (steps+1, {d}, {d}), got {g.shape}"
        )
    terms = np.einsum("nkl,nkl->n", g[:-1], rp.bracket)
    out = np.zeros(rp.steps + 1)
    np.cumsum(terms, out=out[1:])
    return out


@dataclass(frozen=True)
class RateRow:
    level: int
    steps: int
    diff: float
    fitted_rate: float


@dataclass(frozen=True)
class RateTable:
    """Terminal-value refinement ladder for a compensated integral."""

    rows: tuple
    exponent: float
    terminal_values: tuple = field(default=())

    def to_csv_rows(self) -> list[list[str]]:
        out = [["level", "N", "diff", "fitted_rate"]]
        for r in self.rows:
            out.append([str(r.level), str(r.steps),
                        format(r.diff, ".17g"), format(r.fitted_rate, ".17g")])
        return out


def refine_convergence(builders: Sequence[Callable[[], ControlledPath]] | Sequence[ControlledPath]) -> RateTable:
    """Fit the decay rate of terminal compensated sums across a dyadic ladder.

    Takes controlled paths (or thunks producing them) on grids with
    N, 2N, 4N, ... steps describing the same integrand against finer
    views of the same driver.  Reports |I^(2N) - I^(N)| per level and
    the least-squares exponent of diff against N.
    """
    if len(builders) < 3:
        raise ConfigurationError("refinement ladder needs at least 3 levels")
    ctrls = [b() if callable(b) else b for b in builders]
    ns = [c.driver.steps for c in ctrls]
    for a, b in zip(ns, ns[1:]):
        if b != 2 * a:
            raise ConfigurationError(f"ladder steps must double per level, got {ns}")
    terms = [rough_integral(c)[-1] for c in ctrls]
    diffs = [float(np.max(np.abs(b - a))) for a, b in zip(terms, terms[1:])]
    rows = []
    for lvl, (n, diff) in enumerate(zip(ns, diffs)):
        local = float("nan")
        if lvl + 1 < len(diffs) and diffs[lvl + 1] > 0 and diff > 0:
            local = float(np.log2(diff / diffs[lvl + 1]))
        rows.append(RateRow(level=lvl, steps=n, diff=diff, fitted_rate=local))
    usable = [(np.log(n), np.log(d)) for n, d in zip(ns, diffs) if d > 0]
    if len(usable) >= 2:
        xs, ys = zip(*usable)
        exponent = float(-np.polyfit(xs, ys, 1)[0])
    else:
        exponent = float("inf")
    return RateTable(rows=tuple(rows), exponent=exponent,
                     terminal_values=tuple(float(np.max(np.abs(t))) for t in terms))
