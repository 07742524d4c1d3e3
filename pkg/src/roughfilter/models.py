r"""Builtin scenarios.

Scalar models are defined directly in reduced coordinates (unit
observation matrix) with analytic derivatives; their primitive systems
are reconstructed so the reduction identity holds by construction.  The
two-channel models are defined as primitive systems, one with a rank-one
observation matrix and one with an invertible matrix.
"""

from __future__ import annotations

import numpy as np

from .classical import (ClassicalScenario, InitialLaw, LinearGaussianParams,
                        PrimitiveSystem, primitives_from_reduced,
                        reduce_to_nondegenerate)
from .coeffs import CoefficientSet
from .errors import ConfigurationError


def _sech2(x):
    c = np.cosh(x)
    return 1.0 / (c * c)


def _linear_gaussian_scenario(name: str, a_red: float, sigma: float,
                              hmat: float, fval: float, m0: float, p0: float,
                              horizon: float,
                              params: LinearGaussianParams) -> ClassicalScenario:
    """Reduced-coordinate linear model: b = a_red x, constant f, h = hmat x."""

    def b(t, x, y):
        return a_red * x

    def dxb(t, x, y):
        m = x.shape[0]
        return np.full((m, 1, 1), a_red)

    def sig(t, x, y):
        return np.full((x.shape[0], 1, 1), sigma)

    def dxsigma(t, x, y):
        return np.zeros((x.shape[0], 1, 1, 1))

    def f(t, x, y):
        return np.full((x.shape[0], 1, 1), fval)

    def dxf(t, x, y):
        return np.zeros((x.shape[0], 1, 1, 1))

    def dyf(t, x, y):
        return np.zeros((x.shape[0], 1, 1, 1))

    def dxxf(t, x, y):
        return np.zeros((x.shape[0], 1, 1, 1, 1))

    def h(t, x, y):
        return hmat * x

    def dxh(t, x, y):
        return np.full((x.shape[0], 1, 1), hmat)

    def dyh(t, x, y):
        return np.zeros((x.shape[0], 1, 1))

    def dxxh(t, x, y):
        return np.zeros((x.shape[0], 1, 1, 1))

    coeffs = CoefficientSet(dim_x=1, dim_b=1, dim_y=1, b=b, sigma=sig, f=f,
                            dyf=dyf, h=h, dyh=dyh, dxf=dxf, dxh=dxh,
                            dxb=dxb, dxsigma=dxsigma, dxxf=dxxf, dxxh=dxxh,
                            meta={"name": name})
    prim = primitives_from_reduced(coeffs, np.eye(1), meta={"name": name})

    def pathwise_vals(t, xb, yb):
        m = xb.shape[0]
        return (a_red * xb, np.full((m, 1, 1), sigma),
                np.full((m, 1, 1), fval), hmat * xb)

    init = InitialLaw(mean=np.array([m0]), chol=np.array([[np.sqrt(p0)]]))
    return ClassicalScenario(name=name, prim=prim, coeffs=coeffs, init=init,
                             linear_gaussian=params, bounded=False,
                             default_horizon=horizon,
                             pathwise_vals=pathwise_vals,
                             meta={"unbounded_h": True})


def lg_uncorrelated(a: float = -1.0, sigma: float = 1.0, hmat: float = 1.0,
                    m0: float = 0.0, p0: float = 0.5,
                    horizon: float = 2.0) -> ClassicalScenario:
    params = LinearGaussianParams(a=a, sigma=sigma, hmat=hmat, k=1.0,
                                  m0=m0, p0=p0)
    return _linear_gaussian_scenario("lg_uncorrelated", a, sigma, hmat, 0.0,
                                     m0, p0, horizon, params)


def lg_correlated(a: float = -1.0, sigma: float = 1.0, hmat: float = 1.0,
                  fval: float = 0.3, m0: float = 0.0, p0: float = 0.5,
                  horizon: float = 2.0) -> ClassicalScenario:
    """a is the physical drift; the reduced drift slope is a - fval hmat."""
    params = LinearGaussianParams(a=a, sigma=sigma, hmat=hmat, k=1.0,
                                  m0=m0, p0=p0, fcorr=fval)
    return _linear_gaussian_scenario("lg_correlated", a - fval * hmat, sigma,
                                     hmat, fval, m0, p0, horizon, params)


def bounded_nonlinear(horizon: float = 1.0) -> ClassicalScenario:
    """Scalar model with bounded smooth coefficients and genuine x and y
    dependence in both the correlation load and the sensor."""

    def b(t, x, y):
        return -0.5 * np.tanh(x)

    def dxb(t, x, y):
        return (-0.5 * _sech2(x))[..., None]

    def sig(t, x, y):
        return (0.35 + 0.15 * np.cos(x))[..., None]

    def dxsigma(t, x, y):
        return (-0.15 * np.sin(x))[..., None, None]

    def f(t, x, y):
        return (0.4 * np.cos(x) + 0.15 * np.sin(y[0]))[..., None]

    def dxf(t, x, y):
        return (-0.4 * np.sin(x))[..., None, None]

    def dyf(t, x, y):
        return np.full((x.shape[0], 1, 1, 1), 0.15 * np.cos(y[0]))

    def dxxf(t, x, y):
        return (-0.4 * np.cos(x))[..., None, None, None]

    def h(t, x, y):
        return 0.5 * np.tanh(x) + 0.1 * np.cos(y[0])

    def dxh(t, x, y):
        return (0.5 * _sech2(x))[..., None]

    def dyh(t, x, y):
        return np.full((x.shape[0], 1, 1), -0.1 * np.sin(y[0]))

    def dxxh(t, x, y):
        return (-_sech2(x) * np.tanh(x))[..., None, None]

    coeffs = CoefficientSet(dim_x=1, dim_b=1, dim_y=1, b=b, sigma=sig, f=f,
                            dyf=dyf, h=h, dyh=dyh, dxf=dxf, dxh=dxh,
                            dxb=dxb, dxsigma=dxsigma, dxxf=dxxf, dxxh=dxxh,
                            meta={"name": "bounded_nonlinear"})
    prim = primitives_from_reduced(coeffs, np.eye(1),
                                   meta={"name": "bounded_nonlinear"})

    def pathwise_vals(t, xb, yb):
        xc = xb[:, 0]
        yc = yb[:, 0]
        bv = -0.5 * np.tanh(xb)
        sv = (0.35 + 0.15 * np.cos(xb))[..., None]
        fv = (0.4 * np.cos(xc) + 0.15 * np.sin(yc))[:, None, None]
        hv = (0.5 * np.tanh(xc) + 0.1 * np.cos(yc))[:, None]
        return bv, sv, fv, hv

    init = InitialLaw(mean=np.array([0.2]), chol=np.array([[0.3]]))
    return ClassicalScenario(name="bounded_nonlinear", prim=prim,
                             coeffs=coeffs, init=init, linear_gaussian=None,
                             bounded=True, default_horizon=horizon,
                             pathwise_vals=pathwise_vals)


def _two_channel_prim(name: str, k_mat: np.ndarray) -> PrimitiveSystem:
    """Scalar signal observed through two channels; the second channel's
    load depends on the second observation coordinate."""

    def bbar(t, x, y):
        return -0.4 * np.tanh(x)

    def sig(t, x, y):
        return np.full((x.shape[0], 1, 1), 0.4)

    def fbar(t, x, y):
        xc = x[..., 0]
        cols = np.stack([0.3 * np.cos(xc),
                         0.2 * np.sin(xc) + 0.1 * np.cos(y[1])], axis=-1)
        return cols[:, None, :]

    def dxfbar(t, x, y):
        xc = x[..., 0]
        cols = np.stack([-0.3 * np.sin(xc), 0.2 * np.cos(xc)], axis=-1)
        return cols[:, None, :, None]

    def dyfbar(t, x, y):
        out = np.zeros((x.shape[0], 1, 2, 2))
        out[:, 0, 1, 1] = -0.1 * np.sin(y[1])
        return out

    def h2(t, x, y):
        xc = x[..., 0]
        return np.stack([0.4 * np.tanh(xc), 0.3 * np.cos(xc)], axis=-1)

    def dxh2(t, x, y):
        xc = x[..., 0]
        return np.stack([0.4 * _sech2(xc), -0.3 * np.sin(xc)], axis=-1)[..., None]

    def dyh2(t, x, y):
        return np.zeros((x.shape[0], 2, 2))

    return PrimitiveSystem(dim_x=1, dim_b=1, dim_y=2, dim_w=2,
                           bbar=bbar, sigma=sig, fbar=fbar, h2=h2,
                           dxfbar=dxfbar, dyfbar=dyfbar, dxh2=dxh2, dyh2=dyh2,
                           k=lambda t, y: k_mat, h1=None, dyk=None,
                           k_is_constant=True, meta={"name": name})


def _two_channel_pathwise(prim: PrimitiveSystem, kinv: np.ndarray | None):
    """Vectorized per-path values; reduced form when kinv is given."""

    def vals(t, xb, yb):
        xc = xb[:, 0]
        y1 = yb[:, 1]
        fbar = np.stack([0.3 * np.cos(xc),
                         0.2 * np.sin(xc) + 0.1 * np.cos(y1)], axis=-1)[:, None, :]
        h2 = np.stack([0.4 * np.tanh(xc), 0.3 * np.cos(xc)], axis=-1)
        bv = -0.4 * np.tanh(xb) - np.einsum("piw,pw->pi", fbar, h2)
        sv = np.full((xb.shape[0], 1, 1), 0.4)
        if kinv is None:
            return bv, sv, fbar, h2
        fv = np.einsum("piw,wl->pil", fbar, kinv)
        hv = np.einsum("pw,wl->pl", h2, kinv)
        return bv, sv, fv, hv

    return vals


def degenerate_rank1(horizon: float = 1.0) -> ClassicalScenario:
    """Two observation channels, the second carrying no noise: k has rank
    one, so only the extended (hat-lift) filter applies."""
    k_mat = np.array([[1.0, 0.0], [0.0, 0.0]])
    prim = _two_channel_prim("degenerate_rank1", k_mat)
    init = InitialLaw(mean=np.array([0.0]), chol=np.array([[0.3]]))
    return ClassicalScenario(name="degenerate_rank1", prim=prim, coeffs=None,
                             init=init, linear_gaussian=None, bounded=True,
                             default_horizon=horizon,
                             pathwise_vals=_two_channel_pathwise(prim, None),
                             meta={"rank": 1})


def invertible_k(horizon: float = 1.0) -> ClassicalScenario:
    """Same structure with a full-rank non-diagonal observation matrix, so
    the extended filter must collapse to the reduced one."""
    k_mat = np.array([[1.0, 0.2], [0.0, 0.8]])
    prim = _two_channel_prim("invertible_k", k_mat)
    coeffs = reduce_to_nondegenerate(prim)
    kinv = np.linalg.inv(k_mat)
    init = InitialLaw(mean=np.array([0.0]), chol=np.array([[0.3]]))
    return ClassicalScenario(name="invertible_k", prim=prim, coeffs=coeffs,
                             init=init, linear_gaussian=None, bounded=True,
                             default_horizon=horizon,
                             pathwise_vals=_two_channel_pathwise(prim, kinv),
                             meta={"rank": 2})


BUILTIN = {
    "lg_uncorrelated": lg_uncorrelated,
    "lg_correlated": lg_correlated,
    "bounded_nonlinear": bounded_nonlinear,
    "degenerate_rank1": degenerate_rank1,
    "invertible_k": invertible_k,
}


def get_model(name: str, **kwargs) -> ClassicalScenario:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown model {name!r}; builtins: {sorted(BUILTIN)}") from None
    return factory(**kwargs)
