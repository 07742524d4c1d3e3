r"""Bounded C^3 test functions with analytic gradients and Hessians.

Everything the filter is evaluated against comes from this small
library: Gaussian bumps, tanh compositions (ramps, clipped coordinates)
and smoothly clipped quadratics.  Callables broadcast over batches of
states: fn(x) with x of shape (..., d) returns (...,), grad returns
(..., d), hess returns (..., d, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng


@dataclass(frozen=True)
class TestFunction:
    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(x)


def one(dim: int) -> TestFunction:
    """The constant function 1; its Gamma image is the observation row h."""
    return TestFunction(
        name="one", dim=dim,
        fn=lambda x: np.ones(x.shape[:-1]),
        grad=lambda x: np.zeros(x.shape[:-1] + (dim,)),
        hess=lambda x: np.zeros(x.shape[:-1] + (dim, dim)),
    )


def gauss_bump(dim: int, center: float = 0.2, width: float = 0.8) -> TestFunction:
    c = np.full(dim, center)
    w2 = width * width

    def fn(x):
        r = x - c
        return np.exp(-np.sum(r * r, axis=-1) / (2 * w2))

    def grad(x):
        r = x - c
        return fn(x)[..., None] * (-r / w2)

    def hess(x):
        r = x - c
        eye = np.eye(dim)
        outer = np.einsum("...i,...j->...ij", r, r) / (w2 * w2)
        return fn(x)[..., None, None] * (outer - eye / w2)

    return TestFunction("gauss_bump", dim, fn, grad, hess,
                        {"center": center, "width": width})


def tanh_ramp(dim: int, shift: float = 0.1, width: float = 0.7) -> TestFunction:
    v = np.ones(dim) / np.sqrt(dim)

    def arg(x):
        return (x @ v - shift) / width

    def fn(x):
        return np.tanh(arg(x))

    def grad(x):
        s2 = 1.0 - np.tanh(arg(x)) ** 2
        return s2[..., None] * (v / width)

    def hess(x):
        th = np.tanh(arg(x))
        s2 = 1.0 - th * th
        coef = -2.0 * th * s2 / (width * width)
        return coef[..., None, None] * np.einsum("i,j->ij", v, v)

    return TestFunction("tanh_ramp", dim, fn, grad, hess,
                        {"shift": shift, "width": width})


def clipped_identity(dim: int, radius: float = 20.0, axis: int = 0) -> TestFunction:
    """radius * tanh(x_axis / radius): the identity coordinate, smoothly clipped."""
    R = float(radius)

    def fn(x):
        return R * np.tanh(x[..., axis] / R)

    def grad(x):
        g = np.zeros(x.shape)
        g[..., axis] = 1.0 - np.tanh(x[..., axis] / R) ** 2
        return g

    def hess(x):
        hss = np.zeros(x.shape + (dim,))
        th = np.tanh(x[..., axis] / R)
        hss[..., axis, axis] = -(2.0 / R) * th * (1.0 - th * th)
        return hss

    return TestFunction("clipped_identity", dim, fn, grad, hess,
                        {"radius": radius, "axis": axis})


def clipped_square(dim: int, radius: float = 10.0) -> TestFunction:
    """radius * tanh(|x|^2 / radius): the squared norm, smoothly clipped."""
    R = float(radius)

    def s(x):
        return np.sum(x * x, axis=-1) / R

    def fn(x):
        return R * np.tanh(s(x))

    def grad(x):
        sech2 = 1.0 - np.tanh(s(x)) ** 2
        return sech2[..., None] * (2.0 * x)

    def hess(x):
        th = np.tanh(s(x))
        sech2 = 1.0 - th * th
        eye = np.eye(dim)
        outer = np.einsum("...i,...j->...ij", x, x)
        return 2.0 * sech2[..., None, None] * eye \
            - (8.0 / R) * (sech2 * th)[..., None, None] * outer

    return TestFunction("clipped_square", dim, fn, grad, hess, {"radius": radius})


def cos_mode(dim: int, freq: float = 0.9, phase: float = 0.3) -> TestFunction:
    v = np.full(dim, freq) / np.sqrt(dim)

    def arg(x):
        return x @ v + phase

    def fn(x):
        return np.cos(arg(x))

    def grad(x):
        return -np.sin(arg(x))[..., None] * v

    def hess(x):
        return -np.cos(arg(x))[..., None, None] * np.einsum("i,j->ij", v, v)

    return TestFunction("cos_mode", dim, fn, grad, hess,
                        {"freq": freq, "phase": phase})


def library(dim: int) -> list[TestFunction]:
    """The five standard bounded test functions used by filter reports."""
    return [
        gauss_bump(dim),
        tanh_ramp(dim),
        clipped_identity(dim),
        clipped_square(dim),
        cos_mode(dim),
    ]


def fd_check_testfuncs(funcs, n_probes: int = 100, seed: int = 20260814,
                       step: float = 1e-5, tol: float = 1e-6) -> dict:
    """Central-difference check of grad and hess, relative with unit floor."""
    out = {}
    for tf in funcs:
        gen = rng.generator(seed, "tf_fd", tf.name)
        x = 1.5 * gen.standard_normal((n_probes, tf.dim))
        gmax = hmax = 0.0
        an_g = tf.grad(x)
        an_h = tf.hess(x)
        for j in range(tf.dim):
            e = np.zeros(tf.dim)
            e[j] = step
            fd_g = (tf.fn(x + e) - tf.fn(x - e)) / (2 * step)
            gmax = max(gmax, float(np.max(np.abs(fd_g - an_g[..., j])
                                          / np.maximum(1.0, np.abs(an_g[..., j])))))
            fd_h = (tf.grad(x + e) - tf.grad(x - e)) / (2 * step)
            hmax = max(hmax, float(np.max(np.abs(fd_h - an_h[..., j])
                                          / np.maximum(1.0, np.abs(an_h[..., j])))))
        out[tf.name] = {"grad": gmax, "hess": hmax, "ok": gmax <= tol and hmax <= tol}
    return out
