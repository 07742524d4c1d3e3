"""Shared builders for drivers and coefficient sets used across tests."""

from __future__ import annotations

import numpy as np

from roughfilter import rng
from roughfilter.coeffs import CoefficientSet
from roughfilter.roughpath import TimeGrid, lift_ito, lift_piecewise_linear
from roughfilter.testfuncs import TestFunction


def square_tf() -> TestFunction:
    """Unclipped x^2 with exact derivatives; keeps polynomial oracles clean."""
    return TestFunction("square", 1,
                        fn=lambda x: x[:, 0] ** 2,
                        grad=lambda x: 2.0 * x,
                        hess=lambda x: np.full(x.shape + (1,), 2.0))


def brownian_fine(seed: int, n_fine: int, dim: int = 1, horizon: float = 1.0,
                  label: str = "driver_w") -> np.ndarray:
    """Sampled Brownian path on a fine grid, starting at zero."""
    dt = horizon / n_fine
    dw = np.sqrt(dt) * rng.normal_block(seed, (label,), (n_fine, dim))
    return np.vstack([np.zeros((1, dim)), np.cumsum(dw, axis=0)])


def ito_brownian(seed: int, steps: int, dim: int = 1, alpha: float = 0.45,
                 horizon: float = 1.0, refine: int = 16):
    """Ito lift of a seeded Brownian sample."""
    grid = TimeGrid(horizon, steps)
    fine = brownian_fine(seed, steps * refine, dim, horizon)
    return lift_ito(grid, fine, refine, alpha, meta={"seed": seed})


def line_driver(steps: int, horizon: float = 1.0, alpha: float = 0.5,
                slope: float = 1.0, dim: int = 1):
    """Geometric lift of the smooth path Y_t = slope * t per coordinate."""
    grid = TimeGrid(horizon, steps)
    samples = np.tile((slope * grid.nodes)[:, None], (1, dim))
    return lift_piecewise_linear(grid, samples, alpha)


def scalar_coeffs(*, b: float = 0.0, b_lin: float = 0.0, sigma: float = 0.0,
                  f: float = 0.0, f_lin: float = 0.0, h: float = 0.0,
                  h_lin: float = 0.0, dyf: float = 0.0, dyh: float = 0.0,
                  name: str = "inline") -> CoefficientSet:
    """Affine scalar model (d_X = d_B = d_Y = 1): b + b_lin*x, etc.

    dyf and dyh set constant observation derivatives without making f or
    h actually depend on y; only operator probes should use them.
    """

    def bfn(t, x, y):
        return b + b_lin * x

    def dxbfn(t, x, y):
        return np.full(x.shape + (1,), b_lin)

    def sigfn(t, x, y):
        return np.full(x.shape + (1,), sigma)

    def dxsigfn(t, x, y):
        return np.zeros(x.shape + (1, 1))

    def ffn(t, x, y):
        return (f + f_lin * x)[..., None]

    def dxffn(t, x, y):
        return np.full(x.shape + (1, 1), f_lin)

    def dyffn(t, x, y):
        return np.full(x.shape + (1, 1), dyf)

    def dxxffn(t, x, y):
        return np.zeros(x.shape + (1, 1, 1))

    def hfn(t, x, y):
        return h + h_lin * x

    def dxhfn(t, x, y):
        return np.full(x.shape + (1,), h_lin)

    def dyhfn(t, x, y):
        return np.full(x.shape + (1,), dyh)

    def dxxhfn(t, x, y):
        return np.zeros(x.shape + (1, 1))

    return CoefficientSet(
        dim_x=1, dim_b=1, dim_y=1,
        b=bfn, sigma=sigfn, f=ffn, dyf=dyffn, h=hfn, dyh=dyhfn,
        dxf=dxffn, dxh=dxhfn, dxb=dxbfn, dxsigma=dxsigfn,
        dxxf=dxxffn, dxxh=dxxhfn,
        meta={"name": name, "bounded": b_lin == 0 and f_lin == 0 and h_lin == 0})
