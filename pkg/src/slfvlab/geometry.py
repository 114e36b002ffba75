"""Deterministic geometry and stochastic kernels shared by every process.

Houses the model parameters (dimension d, interaction radius r, impact
factor rho), ball and lens volumes, the two-uniform-ball step density, the
local interaction functionals (psi, beta, kill rate), the step variance
constants, and seeded samplers.  Closed forms are used everywhere in inner
loops; the matching quadrature / Monte Carlo oracles live in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from numba import njit
from numpy.typing import NDArray


# ----------------------------------------------------------------------
# volumes and the lens (two-ball intersection)
# ----------------------------------------------------------------------

def ball_volume(d: int, r: float) -> float:
    """Volume of the radius-r ball in dimension d (2 or 3)."""
    if d == 2:
        return math.pi * r * r
    if d == 3:
        return 4.0 * math.pi * r ** 3 / 3.0
    raise ValueError(f"unsupported dimension {d}; only d=2 and d=3")


@njit(cache=True, inline="always")
def _lens_nb(d: int, r: float, a: float) -> float:
    if a >= 2.0 * r:
        return 0.0
    if a <= 0.0:
        if d == 2:
            return math.pi * r * r
        return 4.0 * math.pi * r ** 3 / 3.0
    if d == 2:
        # two circular segments of equal radius at center distance a
        return 2.0 * r * r * math.acos(a / (2.0 * r)) - 0.5 * a * math.sqrt(4.0 * r * r - a * a)
    # two spherical caps of height r - a/2
    return math.pi * (4.0 * r + a) * (2.0 * r - a) ** 2 / 12.0


def lens_volume(d: int, r: float, a: float) -> float:
    """Volume of B_r(0) ∩ B_r(a·e1); zero for a >= 2r, continuous in a."""
    if d not in (2, 3):
        raise ValueError(f"unsupported dimension {d}; only d=2 and d=3")
    if a < 0.0:
        raise ValueError("center distance a must be >= 0")
    return _lens_nb(d, r, float(a))


def step_density(params: "ModelParams", z: NDArray | float) -> float | NDArray:
    """Density of one dual jump at displacement z: lens(|z|) / |B_r|^2."""
    z = np.asarray(z, dtype=float)
    norms = np.atleast_1d(np.sqrt(np.sum(np.atleast_2d(z) ** 2, axis=-1)))
    vol2 = params.ball_vol ** 2
    out = np.array([_lens_nb(params.d, params.r, float(a)) / vol2 for a in norms])
    return float(out[0]) if out.size == 1 else out


# ----------------------------------------------------------------------
# model parameters and derived constants
# ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _sigma4(d: int, r: float, ball_vol: float) -> float:
    """E|step|^4 by adaptive radial quadrature against the step density."""
    from scipy.integrate import quad

    surf = 2.0 * math.pi if d == 2 else 4.0 * math.pi

    def integrand(a: float) -> float:
        return a ** 4 * surf * a ** (d - 1) * _lens_nb(d, r, a) / ball_vol ** 2

    val, _ = quad(integrand, 0.0, 2.0 * r, epsabs=0.0, epsrel=1e-10, limit=200)
    return val


@dataclass(frozen=True)
class ModelParams:
    """Dimension, interaction radius, and impact factor; fixes every rate.

    d must be 2 or 3, r > 0, rho in (0, 1].
    """

    d: int
    r: float
    rho: float

    def __post_init__(self) -> None:
        if self.d not in (2, 3):
            raise ValueError(f"unsupported dimension {self.d}; only d=2 and d=3")
        if not self.r > 0.0:
            raise ValueError("interaction radius r must be positive")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("impact factor rho must lie in (0, 1]")

    @property
    def ball_vol(self) -> float:
        return ball_volume(self.d, self.r)

    @property
    def rate_single(self) -> float:
        """Jump rate of the one-particle dual: rho |B_r|."""
        return self.rho * self.ball_vol

    @property
    def rate_pair(self) -> float:
        """Jump rate of the free difference walk: 2 rho |B_r|."""
        return 2.0 * self.rho * self.ball_vol

    @property
    def sigma_bar_sq(self) -> float:
        return sigma_bar_sq(self)

    @property
    def sigma2(self) -> float:
        """E|step|^2 = d * sigma_bar_sq."""
        return self.d * self.sigma_bar_sq

    @property
    def sigma4(self) -> float:
        """E|step|^4, cached radial quadrature."""
        return _sigma4(self.d, self.r, self.ball_vol)


def sigma_bar_sq(params: ModelParams) -> float:
    """Per-coordinate step variance: (2/|B_r|) ∫_{B_r} x1^2 dx = 2 r^2 / (d+2)."""
    return 2.0 * params.r ** 2 / (params.d + 2)


# ----------------------------------------------------------------------
# local interaction functionals
# ----------------------------------------------------------------------

class LocalRates(NamedTuple):
    psi: float
    beta: float
    kill: float


@njit(cache=True, inline="always")
def _psi_nb(d: int, r: float, rho: float, a: float) -> float:
    # off-origin branch only: psi = rho^2 * lens(a)
    return rho * rho * _lens_nb(d, r, a)


@njit(cache=True, inline="always")
def _beta_nb(d: int, r: float, rho: float, a: float) -> float:
    return 1.0 - rho * _lens_nb(d, r, a) / ball_vol_nb(d, r)


@njit(cache=True, inline="always")
def ball_vol_nb(d: int, r: float) -> float:
    if d == 2:
        return math.pi * r * r
    return 4.0 * math.pi * r ** 3 / 3.0


@njit(cache=True, inline="always")
def _kill_nb(d: int, r: float, rho: float, a: float) -> float:
    psi = _psi_nb(d, r, rho, a)
    denom = rho * ball_vol_nb(d, r) - psi
    if denom <= 0.0:
        return math.inf
    return rho * ball_vol_nb(d, r) * psi / denom


def local_rates(params: ModelParams, a: float, at_origin: bool = False) -> LocalRates:
    """Coalescence functionals at inter-particle distance a.

    Returns (psi, beta, kill) with psi = rho^2 |B_r ∩ B_r(a)|,
    beta = 1 - psi/(rho |B_r|), kill = rho|B_r| psi / (rho|B_r| - psi).
    The jump value psi(0) = rho |B_r| of the trap state is exposed only
    through the explicit ``at_origin`` flag; no process queries it off the
    trap.
    """
    vol = params.ball_vol
    if at_origin:
        return LocalRates(params.rho * vol, 0.0, math.inf)
    if a <= 0.0:
        raise ValueError("distance must be positive; pass at_origin=True for the trap state")
    if a >= 2.0 * params.r:
        return LocalRates(0.0, 1.0, 0.0)
    psi = _psi_nb(params.d, params.r, params.rho, a)
    beta = 1.0 - psi / (params.rho * vol)
    if beta <= 0.0:
        raise ValueError(f"degenerate slow-down: beta={beta} at distance {a}")
    kill = params.rho * vol * psi / (params.rho * vol - psi)
    return LocalRates(psi, beta, kill)


# ----------------------------------------------------------------------
# samplers (all consume a numpy Generator; numba kernels below share them)
# ----------------------------------------------------------------------

@njit(cache=True, inline="always")
def _ball2_nb(rng, r: float):
    while True:
        x = 2.0 * rng.random() - 1.0
        y = 2.0 * rng.random() - 1.0
        if x * x + y * y <= 1.0:
            return r * x, r * y


@njit(cache=True, inline="always")
def _ball3_nb(rng, r: float):
    while True:
        x = 2.0 * rng.random() - 1.0
        y = 2.0 * rng.random() - 1.0
        z = 2.0 * rng.random() - 1.0
        if x * x + y * y + z * z <= 1.0:
            return r * x, r * y, r * z


@njit(cache=True, inline="always")
def _step_nb(rng, d: int, r: float):
    """One dual displacement: sum of two independent uniform-ball draws."""
    if d == 2:
        a0, a1 = _ball2_nb(rng, r)
        b0, b1 = _ball2_nb(rng, r)
        return a0 + b0, a1 + b1, 0.0
    a0, a1, a2 = _ball3_nb(rng, r)
    b0, b1, b2 = _ball3_nb(rng, r)
    return a0 + b0, a1 + b1, a2 + b2


@njit(cache=True)
def _ball_batch_nb(rng, d: int, r: float, out: NDArray) -> None:
    for i in range(out.shape[0]):
        if d == 2:
            x, y = _ball2_nb(rng, r)
            out[i, 0] = x
            out[i, 1] = y
        else:
            x, y, z = _ball3_nb(rng, r)
            out[i, 0] = x
            out[i, 1] = y
            out[i, 2] = z


def sample_uniform_ball(
    rng: np.random.Generator,
    d: int,
    r: float,
    center: Optional[NDArray] = None,
    size: Optional[int] = None,
) -> NDArray:
    """Uniform draw(s) on the closed ball B_r(center) by cube rejection."""
    if d not in (2, 3):
        raise ValueError(f"unsupported dimension {d}; only d=2 and d=3")
    n = 1 if size is None else int(size)
    out = np.empty((n, d))
    _ball_batch_nb(rng, d, r, out)
    if center is not None:
        out = out + np.asarray(center, dtype=float)
    return out[0] if size is None else out


def sample_step(
    rng: np.random.Generator, params: ModelParams, size: Optional[int] = None
) -> NDArray:
    """Draw dual displacement(s): the sum of two uniform-ball points."""
    n = 1 if size is None else int(size)
    a = np.empty((n, params.d))
    b = np.empty((n, params.d))
    _ball_batch_nb(rng, params.d, params.r, a)
    _ball_batch_nb(rng, params.d, params.r, b)
    out = a + b
    return out[0] if size is None else out


@njit(cache=True)
def _lens_point_nb(rng, d: int, r: float, y1: NDArray, y2: NDArray, out: NDArray) -> int:
    # rejection from B_r(y1); acceptance probability = lens/|B_r| > 0
    tries = 0
    while True:
        if d == 2:
            x, y = _ball2_nb(rng, r)
            px = y1[0] + x
            py = y1[1] + y
            tries += 1
            dx = px - y2[0]
            dy = py - y2[1]
            if dx * dx + dy * dy <= r * r:
                out[0] = px
                out[1] = py
                return tries
        else:
            x, y, z = _ball3_nb(rng, r)
            px = y1[0] + x
            py = y1[1] + y
            pz = y1[2] + z
            tries += 1
            dx = px - y2[0]
            dy = py - y2[1]
            dz = pz - y2[2]
            if dx * dx + dy * dy + dz * dz <= r * r:
                out[0] = px
                out[1] = py
                out[2] = pz
                return tries


def sample_lens_point(
    rng: np.random.Generator,
    params: ModelParams,
    y1: NDArray,
    y2: NDArray,
    return_tries: bool = False,
):
    """Uniform draw on B_r(y1) ∩ B_r(y2); requires |y1 - y2| < 2r."""
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    sep = float(np.linalg.norm(y1 - y2))
    if sep >= 2.0 * params.r:
        raise ValueError(f"empty intersection: |y1-y2| = {sep} >= 2r")
    out = np.empty(params.d)
    tries = _lens_point_nb(rng, params.d, params.r, y1, y2, out)
    if return_tries:
        return out, tries
    return out
