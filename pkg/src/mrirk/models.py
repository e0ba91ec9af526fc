"""Benchmark reaction-diffusion(-convection) models.

Two problems are shipped: the three-species Belousov-Zhabotinski (BZ)
Oregonator model in 1D/2D and the thermo-diffusive vortex-ignition model of a
diffusion flame.  A model is described by a :class:`ModelSpec`; the spatial
discretisation only sees diffusion coefficients, an optional velocity field
and a pointwise source.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class SingularSourceError(FloatingPointError):
    """A source term hit a singular point (e.g. ``1 + tau*theta = 0``)."""


@dataclass(frozen=True)
class BzParams:
    eps: float = 1e-2
    mu: float = 1e-5
    f: float = 1.6
    q: float = 2e-3
    diffusion: tuple[float, float, float] = (2.5e-3, 2.5e-3, 1.5e-3)

    def __post_init__(self):
        if not self.mu < self.eps < 1:
            raise ValueError("BZ parameters require mu < eps < 1")


@dataclass(frozen=True)
class IgnitionParams:
    Da: float = 1.65e7
    phi: float = 34.782608696
    chi: float = 50.0
    Y_O0: float = 0.23
    tau: float = -0.7
    tau_a: float = 8.0
    Re: float = 1000.0
    Sc: float = 1.0
    centre: tuple[float, float] = (0.0, 0.0)
    T_F0: float = 300.0
    T_O0: float = 1000.0


@dataclass
class ModelSpec:
    """Everything the finite-volume operator needs to know about a PDE system.

    ``source(u)`` maps an ``(N, m)`` array to the ``(N, m)`` reaction rates,
    ``velocity(x, t)`` maps ``(N, d)`` points to ``(N, d)`` velocities and
    ``initial(x)`` gives ``(N, m)`` initial values.
    """

    name: str
    m: int
    diffusion: tuple[float, ...]
    source: Callable[[np.ndarray], np.ndarray]
    initial: Callable[[np.ndarray], np.ndarray]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    t_final: float
    velocity: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    component_names: tuple[str, ...] = ()
    params: object = None

    def __post_init__(self):
        if len(self.diffusion) != self.m:
            raise ValueError("one diffusion coefficient per component")
        if any(d < 0 for d in self.diffusion):
            raise ValueError("diffusion coefficients must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.lower)


# --------------------------------------------------------------------------
# Belousov-Zhabotinski


def bz_source(a, b, c, params: BzParams = BzParams()):
    """Oregonator reaction rates ``(ra, rb, rc)``."""
    ra = (-params.q * a - a * b + params.f * c) / params.mu
    rb = (params.q * a - a * b + b * (1.0 - b)) / params.eps
    rc = b - c
    return ra, rb, rc


def _bz_source_array(params):
    def source(u):
        ra, rb, rc = bz_source(u[:, 0], u[:, 1], u[:, 2], params)
        return np.stack([ra, rb, rc], axis=1)

    return source


def bz_seed_1d(x: np.ndarray, width: float = 0.05) -> np.ndarray:
    """Discontinuous seed: ``b = 1`` for ``x < width``, everything else zero."""
    x = np.atleast_2d(x)
    u = np.zeros((x.shape[0], 3))
    u[x[:, 0] < width, 1] = 1.0
    return u


def bz_seed_2d(x: np.ndarray, params: BzParams = BzParams(), centre=(0.5, 0.5)) -> np.ndarray:
    """Phase-gradient spiral seed.

    With ``a`` at its quasi-steady value ``f c / (q + b)`` the system reduces
    to a two-variable Oregonator.  The seed excites ``b = 0.8`` in the wedge
    ``0 < phi < 0.5`` around ``centre`` and lets the recovery variable ``c``
    grow with the polar angle ``phi``, so the wave has a free end that winds
    into a spiral.
    """
    x = np.atleast_2d(x)
    p = params
    phi = np.mod(np.arctan2(x[:, 1] - centre[1], x[:, 0] - centre[0]), 2 * np.pi)
    b = np.where((phi > 0) & (phi < 0.5), 0.8, p.q)
    c = p.q * (p.f + 1) / (p.f - 1) + phi / (8 * np.pi * p.f)
    a = p.f * c / (p.q + b)
    return np.stack([a, b, c], axis=1)


def bz_model(dim: int = 1, params: BzParams = BzParams(), t_final: float = 1.0) -> ModelSpec:
    return ModelSpec(
        name=f"bz{dim}d",
        m=3,
        diffusion=tuple(params.diffusion),
        source=_bz_source_array(params),
        initial=bz_seed_1d if dim == 1 else (lambda x: bz_seed_2d(x, params)),
        lower=(0.0,) * dim,
        upper=(1.0,) * dim,
        t_final=t_final,
        component_names=("a", "b", "c"),
        params=params,
    )


# --------------------------------------------------------------------------
# vortex ignition


def ignition_source(Z, theta, params: IgnitionParams = IgnitionParams()):
    """Reaction rate of the reduced temperature; the mixture fraction is inert."""
    Z = np.asarray(Z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    p = params
    denom = 1.0 + p.tau * theta
    # at and beyond 1 + tau*theta = 0 the Arrhenius factor is singular or unphysical
    bad = denom <= 0
    if np.any(bad):
        where = np.flatnonzero(np.atleast_1d(bad))
        raise SingularSourceError(f"1 + tau*theta <= 0 at cell(s) {where.tolist()[:10]}")
    first = (1.0 - Z) / (p.phi * p.tau) + (Z - theta) / p.chi
    second = Z + (p.tau / p.chi) * (Z - theta)
    rate = p.Da * p.phi * p.chi * p.Y_O0 * first * second * np.exp(-p.tau_a / denom)
    return np.zeros_like(rate), rate


def vortex_velocity(x, y, t, params: IgnitionParams = IgnitionParams()):
    """Counter-clockwise vortex with tangential speed ``Re Sc / r (1 - exp(-r^2/(4 Sc t)))``."""
    if t <= 0:
        raise ValueError("the vortex velocity is defined for t > 0")
    dx = np.asarray(x, dtype=float) - params.centre[0]
    dy = np.asarray(y, dtype=float) - params.centre[1]
    r2 = dx * dx + dy * dy
    with np.errstate(divide="ignore", invalid="ignore"):
        # v_theta / r, finite at the centre
        omega = np.where(
            r2 > 0,
            params.Re * params.Sc * (-np.expm1(-r2 / (4 * params.Sc * t))) / np.where(r2 > 0, r2, 1.0),
            params.Re / (4 * t),
        )
    return dy * omega, -dx * omega


def tangential_speed(r, t, params: IgnitionParams = IgnitionParams()):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(
            r > 0,
            params.Re * params.Sc / np.where(r > 0, r, 1.0) * (-np.expm1(-(r**2) / (4 * params.Sc * t))),
            0.0,
        )


def temperature(theta, params: IgnitionParams = IgnitionParams()):
    """Temperature in kelvin from the reduced temperature."""
    return params.T_O0 + np.asarray(theta) * (params.T_F0 - params.T_O0)


def reduced_temperature(T, params: IgnitionParams = IgnitionParams()):
    return (np.asarray(T) - params.T_O0) / (params.T_F0 - params.T_O0)


def ignition_initial(x: np.ndarray, smoothing: float = 0.0) -> np.ndarray:
    """Fuel (``Z = theta = 1``) for ``y > 0``, hot air (``Z = theta = 0``) below.

    ``smoothing`` is the half-width of a tanh transition across ``y = 0``;
    zero gives the sharp interface.
    """
    x = np.atleast_2d(x)
    y = x[:, 1]
    if smoothing > 0:
        s = 0.5 * (1.0 + np.tanh(y / smoothing))
    else:
        s = (y > 0).astype(float)
    return np.stack([s, s], axis=1)


def ignition_model(params: IgnitionParams = IgnitionParams(), smoothing: float = 0.0, t_final: float = 1.5e-4) -> ModelSpec:
    def source(u):
        zero, rate = ignition_source(u[:, 0], u[:, 1], params)
        return np.stack([zero, rate], axis=1)

    def velocity(x, t):
        vx, vy = vortex_velocity(x[:, 0], x[:, 1], t, params)
        return np.stack([vx, vy], axis=1)

    return ModelSpec(
        name="ignition",
        m=2,
        diffusion=(1.0, 1.0),
        source=source,
        initial=lambda x: ignition_initial(x, smoothing),
        lower=(-1.0, -1.0),
        upper=(1.0, 1.0),
        t_final=t_final,
        velocity=velocity,
        component_names=("Z", "theta"),
        params=params,
    )


def heat_model(dim: int = 1, m: int = 1, diffusion: float = 1.0, initial=None, source=None) -> ModelSpec:
    """Pure diffusion (optionally with a linear source), for tests and demos."""
    return ModelSpec(
        name="heat",
        m=m,
        diffusion=(diffusion,) * m,
        source=source if source is not None else (lambda u: np.zeros_like(u)),
        initial=initial if initial is not None else (lambda x: np.ones((np.atleast_2d(x).shape[0], m))),
        lower=(0.0,) * dim,
        upper=(1.0,) * dim,
        t_final=1.0,
    )


MODELS = {
    "bz1d": lambda **kw: bz_model(1, **kw),
    "bz2d": lambda **kw: bz_model(2, **kw),
    "ignition": ignition_model,
    "heat": heat_model,
}


def get_model(name: str, **kwargs) -> ModelSpec:
    try:
        return MODELS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
