r"""Level-2 rough paths over uniform time grids.

A driver is stored as its first level Y (values at the grid nodes) plus
per-step second-level increments YY_i over [t_i, t_{i+1}] and per-step
bracket increments QV_i.  The defining relation per step is

    dY_i (x) dY_i = YY_i + YY_i^T + QV_i,

with QV_i symmetric.  Second-level increments over arbitrary node pairs
are reconstructed through the Chen relation

    YY_{s,u} = YY_{s,t} + YY_{t,u} + dY_{s,t} (x) dY_{t,u},

implemented with prefix arrays so a single pair costs O(1).

Two lifts are provided: the piecewise-linear (geometric) lift with
YY_i = dY_i (x) dY_i / 2 and zero bracket, and an Ito-type lift that
accumulates left-point Riemann sums of a finer sample of the same path.
``geometrify`` converts any lift to its geometric counterpart by moving
half the bracket into the second level.

Distances use the inhomogeneous alpha-Holder metric

    rho_alpha = sup |dY - dY'| / (t-s)^alpha  +  sup |YY - YY'| / (t-s)^{2 alpha}

with both sups over all node pairs s < t (no subsampling); vector bars
are Euclidean, matrix bars Frobenius.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, DimensionError

TOL_CHEN = 1e-10
TOL_BRACKET_IDENTITY = 1e-10
TOL_BRACKET_SYMMETRY = 1e-12

_ALPHA_LO = 1.0 / 3.0
_ALPHA_HI = 0.5


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (_ALPHA_LO < alpha <= _ALPHA_HI):
        raise ConfigurationError(f"alpha must lie in (1/3, 1/2], got {alpha}")
    return alpha


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * horizon / steps, i = 0..steps."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be a positive integer, got {self.steps}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @cached_property
    def nodes(self) -> np.ndarray:
        # arange/steps hits 0 and 1 exactly, so t_0 = 0 and t_N = horizon.
        t = (np.arange(self.steps + 1) / self.steps) * self.horizon
        t.flags.writeable = False
        return t

    def refine(self, factor: int) -> "TimeGrid":
        if int(factor) != factor or factor < 1:
            raise ConfigurationError(f"refine factor must be a positive integer, got {factor}")
        return TimeGrid(self.horizon, self.steps * int(factor))

    def step_of(self, t: float) -> int:
        """Index i with t in [t_i, t_{i+1}); clamps to the last step at t = horizon."""
        i = int(np.floor(t / self.dt))
        return min(max(i, 0), self.steps - 1)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _identity_defect(increments: np.ndarray, second: np.ndarray) -> np.ndarray:
    """dY (x) dY - YY - YY^T per step, in a fixed evaluation order.

    Lifts define their bracket as exactly this expression, and validate()
    recomputes it the same way, so the bracket identity holds bitwise for
    paths built by the lifts.
    """
    outer = np.einsum("nk,nl->nkl", increments, increments)
    return outer - second - second.transpose(0, 2, 1)


@dataclass(frozen=True)
class RoughPath:
    """First level at nodes, per-step second level and bracket."""

    grid: TimeGrid
    first: np.ndarray
    second: np.ndarray
    bracket: np.ndarray
    alpha: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        first = np.asarray(self.first, dtype=np.float64)
        if first.ndim == 1:
            first = first[:, None]
        if first.ndim != 2:
            raise DimensionError(f"first level must be (steps+1, dim), got shape {first.shape}")
        n, d = first.shape
        if n != self.grid.steps + 1:
            raise DimensionError(
                f"first level has {n} rows, grid expects {self.grid.steps + 1}"
            )
        second = np.asarray(self.second, dtype=np.float64)
        bracket = np.asarray(self.bracket, dtype=np.float64)
        want = (self.grid.steps, d, d)
        if second.shape != want:
            raise DimensionError(f"second level must have shape {want}, got {second.shape}")
        if bracket.shape != want:
            raise DimensionError(f"bracket must have shape {want}, got {bracket.shape}")
        for name, a in (("first", first), ("second", second), ("bracket", bracket)):
            if not np.all(np.isfinite(a)):
                raise DimensionError(f"{name} level contains non-finite entries")
        object.__setattr__(self, "first", _freeze(first))
        object.__setattr__(self, "second", _freeze(second))
        object.__setattr__(self, "bracket", _freeze(bracket))
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))

    @property
    def dim(self) -> int:
        return self.first.shape[1]

    @property
    def steps(self) -> int:
        return self.grid.steps

    @cached_property
    def increments(self) -> np.ndarray:
        inc = self.first[1:] - self.first[:-1]
        inc.flags.writeable = False
        return inc

    @cached_property
    def prefix_second(self) -> np.ndarray:
        """YY_{0,i} for every node i, via the Chen recursion from node 0."""
        rel = self.first[:-1] - self.first[0]
        terms = self.second + np.einsum("nk,nl->nkl", rel, self.increments)
        pref = np.zeros((self.steps + 1, self.dim, self.dim))
        np.cumsum(terms, axis=0, out=pref[1:])
        pref.flags.writeable = False
        return pref

    @cached_property
    def bracket_derivative(self) -> "BracketDerivative":
        return BracketDerivative(self.grid, self.bracket)

    def value(self, i: int) -> np.ndarray:
        return self.first[i]


@dataclass(frozen=True)
class BracketDerivative:
    """Piecewise-constant time derivative of the bracket.

    values[i] = QV_i / dt on [t_i, t_{i+1}).  Integration is done by
    summing the underlying increments, so integrating over [0, T]
    returns the accumulated bracket without a divide/multiply round trip.
    """

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=np.float64)
        if inc.ndim != 3 or inc.shape[0] != self.grid.steps or inc.shape[1] != inc.shape[2]:
            raise DimensionError(f"bracket increments must be (steps, d, d), got {inc.shape}")
        object.__setattr__(self, "increments", _freeze(inc))

    @cached_property
    def values(self) -> np.ndarray:
        v = self.increments / self.grid.dt
        v.flags.writeable = False
        return v

    def at_step(self, i: int) -> np.ndarray:
        return self.values[i]

    def integrate(self) -> np.ndarray:
        """Cumulative bracket at the nodes, shape (steps+1, d, d)."""
        d = self.increments.shape[1]
        out = np.zeros((self.grid.steps + 1, d, d))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def lift_piecewise_linear(grid: TimeGrid, samples: np.ndarray, alpha: float,
                          meta: dict | None = None) -> RoughPath:
    """Canonical lift of the piecewise-linear interpolation of node samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] != grid.steps + 1:
        raise DimensionError(
            f"samples have {samples.shape[0]} rows, grid expects {grid.steps + 1}"
        )
    inc = samples[1:] - samples[:-1]
    second = 0.5 * np.einsum("nk,nl->nkl", inc, inc)
    bracket = _identity_defect(inc, second)
    m = {"kind": "piecewise_linear"}
    m.update(meta or {})
    return RoughPath(grid, samples, second, bracket, alpha, m)


def lift_ito(grid: TimeGrid, fine_samples: np.ndarray, refine_factor: int,
             alpha: float, meta: dict | None = None) -> RoughPath:
    """Ito-type lift from a refinement of the coarse grid.

    fine_samples holds the path on grid.refine(refine_factor); per coarse
    step the second level is the left-point Riemann sum
    sum_s (Y_sub(s) - Y_{t_i}) (x) dY_sub(s), and the bracket is defined
    as the identity defect so the bracket identity holds exactly.
    """
    if int(refine_factor) != refine_factor or refine_factor < 16:
        raise ConfigurationError(
            f"refine_factor must be an integer >= 16, got {refine_factor}"
        )
    r = int(refine_factor)
    fine = np.asarray(fine_samples, dtype=np.float64)
    if fine.ndim == 1:
        fine = fine[:, None]
    n = grid.steps
    if fine.shape[0] != n * r + 1:
        raise DimensionError(
            f"fine samples have {fine.shape[0]} rows, expected {n * r + 1} "
            f"for {n} steps at refine_factor {r}"
        )
    d = fine.shape[1]
    coarse = fine[::r]
    dsub = (fine[1:] - fine[:-1]).reshape(n, r, d)
    partial = np.cumsum(dsub, axis=1)
    shifted = np.concatenate([np.zeros((n, 1, d)), partial[:, :-1]], axis=1)
    second = np.einsum("nsk,nsl->nkl", shifted, dsub)
    inc = coarse[1:] - coarse[:-1]
    bracket = _identity_defect(inc, second)
    m = {"kind": "ito", "refine_factor": r}
    m.update(meta or {})
    return RoughPath(grid, coarse, second, bracket, alpha, m)


def geometrify(rp: RoughPath) -> RoughPath:
    """Move half the bracket into the second level; output bracket is zero.

    Idempotent: applying it to an already geometric path returns equal
    levels since half of a zero bracket is zero.
    """
    second = rp.second + 0.5 * rp.bracket
    bracket = np.zeros_like(rp.bracket)
    meta = dict(rp.meta)
    meta["kind"] = "geometrified:" + str(meta.get("kind", "unknown"))
    return replace(rp, second=second, bracket=bracket, meta=meta)


def chen_extend(rp: RoughPath, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """(dY_{ij}, YY_{ij}) for nodes i <= j via the prefix Chen arrays."""
    n = rp.steps
    if not (0 <= i <= j <= n):
        raise DimensionError(f"need 0 <= i <= j <= {n}, got ({i}, {j})")
    dy = rp.first[j] - rp.first[i]
    yy = rp.prefix_second[j] - rp.prefix_second[i] \
        - np.einsum("k,l->kl", rp.first[i] - rp.first[0], dy)
    return dy, yy


def _second_block(rp: RoughPath, i: int) -> np.ndarray:
    """YY_{i,j} for all j > i, shape (steps - i, d, d)."""
    dy = rp.first[i + 1:] - rp.first[i]
    return rp.prefix_second[i + 1:] - rp.prefix_second[i] \
        - np.einsum("k,jl->jkl", rp.first[i] - rp.first[0], dy)


def rho_alpha(rp_a: RoughPath, rp_b: RoughPath, alpha: float | None = None) -> float:
    """Inhomogeneous alpha-Holder distance over all node pairs."""
    if rp_a.grid != rp_b.grid:
        raise DimensionError("rho_alpha needs both paths on the same grid")
    if rp_a.dim != rp_b.dim:
        raise DimensionError(
            f"dimension mismatch: {rp_a.dim} vs {rp_b.dim}"
        )
    if alpha is None:
        alpha = rp_a.alpha
    t = rp_a.grid.nodes
    lvl1 = 0.0
    lvl2 = 0.0
    for i in range(rp_a.steps):
        dt = t[i + 1:] - t[i]
        d1 = rp_a.first[i + 1:] - rp_a.first[i]
        d2 = rp_b.first[i + 1:] - rp_b.first[i]
        num1 = np.sqrt(np.sum((d1 - d2) ** 2, axis=1))
        lvl1 = max(lvl1, float(np.max(num1 / dt ** alpha)))
        y1 = _second_block(rp_a, i)
        y2 = _second_block(rp_b, i)
        num2 = np.sqrt(np.sum((y1 - y2) ** 2, axis=(1, 2)))
        lvl2 = max(lvl2, float(np.max(num2 / dt ** (2 * alpha))))
    return lvl1 + lvl2


def homogeneous_norm(rp: RoughPath, alpha: float | None = None) -> float:
    """max( sup |dY|/(t-s)^alpha , sqrt( sup |YY|/(t-s)^{2 alpha} ) )."""
    if alpha is None:
        alpha = rp.alpha
    t = rp.grid.nodes
    lvl1 = 0.0
    lvl2 = 0.0
    for i in range(rp.steps):
        dt = t[i + 1:] - t[i]
        d1 = rp.first[i + 1:] - rp.first[i]
        lvl1 = max(lvl1, float(np.max(np.sqrt(np.sum(d1 ** 2, axis=1)) / dt ** alpha)))
        y1 = _second_block(rp, i)
        lvl2 = max(lvl2, float(np.max(
            np.sqrt(np.sum(y1 ** 2, axis=(1, 2))) / dt ** (2 * alpha))))
    return max(lvl1, np.sqrt(lvl2))


@dataclass(frozen=True)
class PathValidationReport:
    chen_residual: float
    bracket_identity_residual: float
    bracket_asymmetry: float
    chen_ok: bool
    bracket_identity_ok: bool
    bracket_asymmetry_ok: bool
    holder_first: float
    holder_second: float

    @property
    def ok(self) -> bool:
        return self.chen_ok and self.bracket_identity_ok and self.bracket_asymmetry_ok

    def as_dict(self) -> dict:
        return {
            "chen_residual": self.chen_residual,
            "bracket_identity_residual": self.bracket_identity_residual,
            "bracket_asymmetry": self.bracket_asymmetry,
            "chen_ok": self.chen_ok,
            "bracket_identity_ok": self.bracket_identity_ok,
            "bracket_asymmetry_ok": self.bracket_asymmetry_ok,
            "holder_first": self.holder_first,
            "holder_second": self.holder_second,
            "ok": self.ok,
        }


def _holder_slopes(rp: RoughPath) -> tuple[float, float]:
    """Empirical Holder exponents from dyadic-span log-log regressions."""
    n = rp.steps
    spans = []
    span = 1
    while span <= n // 2:
        spans.append(span)
        span *= 2
    if len(spans) < 3:
        return float("nan"), float("nan")
    xs, y1, y2 = [], [], []
    for span in spans:
        starts = np.arange(0, n - span + 1, span)
        dy = rp.first[starts + span] - rp.first[starts]
        v1 = float(np.max(np.sqrt(np.sum(dy ** 2, axis=1))))
        vals2 = []
        for s in starts:
            _, yy = chen_extend(rp, int(s), int(s + span))
            vals2.append(np.sqrt(np.sum(yy ** 2)))
        v2 = float(np.max(vals2))
        if v1 > 0 and v2 > 0:
            xs.append(np.log(span * rp.grid.dt))
            y1.append(np.log(v1))
            y2.append(np.log(v2))
    if len(xs) < 3:
        return float("nan"), float("nan")
    slope1 = float(np.polyfit(xs, y1, 1)[0])
    slope2 = float(np.polyfit(xs, y2, 1)[0])
    return slope1, slope2 / 2.0


def validate(rp: RoughPath, n_triples: int = 512, seed: int = 0) -> PathValidationReport:
    """Check the defining relations and report empirical regularity.

    The Chen check re-derives n_triples random (i, j, k) compositions
    plus all consecutive triples; the bracket checks recompute the
    identity defect in the same evaluation order the lifts use.
    """
    from . import rng

    defect = _identity_defect(rp.increments, rp.second)
    identity_residual = float(np.max(np.abs(defect - rp.bracket))) if rp.steps else 0.0
    asym = float(np.max(np.abs(rp.bracket - rp.bracket.transpose(0, 2, 1))))

    chen = 0.0
    n = rp.steps
    triples = []
    if n >= 2:
        idx = np.arange(n - 1)
        triples.extend(zip(idx, idx + 1, idx + 2))
        gen = rng.generator(seed, "validate_triples")
        picks = gen.integers(0, n + 1, size=(n_triples, 3))
        picks.sort(axis=1)
        triples.extend((int(a), int(b), int(c)) for a, b, c in picks if a < b < c)
    for i, j, k in triples:
        dy_ij, yy_ij = chen_extend(rp, i, j)
        dy_jk, yy_jk = chen_extend(rp, j, k)
        _, yy_ik = chen_extend(rp, i, k)
        comp = yy_ij + yy_jk + np.einsum("k,l->kl", dy_ij, dy_jk)
        chen = max(chen, float(np.max(np.abs(comp - yy_ik))))

    h1, h2 = _holder_slopes(rp)
    return PathValidationReport(
        chen_residual=chen,
        bracket_identity_residual=identity_residual,
        bracket_asymmetry=asym,
        chen_ok=chen <= TOL_CHEN,
        bracket_identity_ok=identity_residual <= TOL_BRACKET_IDENTITY,
        bracket_asymmetry_ok=asym <= TOL_BRACKET_SYMMETRY,
        holder_first=h1,
        holder_second=h2,
    )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_rough_path(rp: RoughPath, base: str) -> tuple[str, str]:
    """Write <base>.csv and <base>.json; returns the two paths.

    Row i carries the node value at t_i and the second-level/bracket
    increments of step [t_i, t_{i+1}]; the terminal row pads the step
    fields with zeros.
    """
    d = rp.dim
    header = ["t"] + [f"Y_{k+1}" for k in range(d)]
    header += [f"YY_{k+1}{l+1}" for k in range(d) for l in range(d)]
    header += [f"QV_{k+1}{l+1}" for k in range(d) for l in range(d)]
    csv_path = base + ".csv"
    json_path = base + ".json"
    zeros = np.zeros((d, d))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(rp.steps + 1):
            yy = rp.second[i] if i < rp.steps else zeros
            qv = rp.bracket[i] if i < rp.steps else zeros
            row = [_fmt(rp.grid.nodes[i])]
            row += [_fmt(v) for v in rp.first[i]]
            row += [_fmt(v) for v in yy.ravel()]
            row += [_fmt(v) for v in qv.ravel()]
            w.writerow(row)
    head = {
        "dim": rp.dim,
        "steps": rp.steps,
        "horizon": rp.grid.horizon,
        "alpha": rp.alpha,
        "kind": rp.meta.get("kind", "unknown"),
        "seed": rp.meta.get("seed"),
        "meta": {k: v for k, v in rp.meta.items() if k not in ("kind", "seed")},
    }
    with open(json_path, "w") as fh:
        json.dump(head, fh, indent=2)
        fh.write("\n")
    return csv_path, json_path


def load_rough_path(base: str) -> RoughPath:
    with open(base + ".json") as fh:
        head = json.load(fh)
    d = int(head["dim"])
    steps = int(head["steps"])
    grid = TimeGrid(float(head["horizon"]), steps)
    first = np.zeros((steps + 1, d))
    second = np.zeros((steps, d, d))
    bracket = np.zeros((steps, d, d))
    with open(base + ".csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        want = 1 + d + 2 * d * d
        if len(header) != want:
            raise DimensionError(
                f"CSV has {len(header)} columns, expected {want} for dim {d}"
            )
        for i, row in enumerate(reader):
            if i > steps:
                raise DimensionError(f"CSV has more than {steps + 1} rows")
            vals = np.array([float(v) for v in row])
            first[i] = vals[1 : 1 + d]
            if i < steps:
                second[i] = vals[1 + d : 1 + d + d * d].reshape(d, d)
                bracket[i] = vals[1 + d + d * d :].reshape(d, d)
    meta = {"kind": head.get("kind", "unknown")}
    if head.get("seed") is not None:
        meta["seed"] = head["seed"]
    meta.update(head.get("meta", {}))
    return RoughPath(grid, first, second, bracket, float(head["alpha"]), meta)
