"""Closed-form super-Brownian-motion reference moments.

The limit parameters (diffusion sigma^2, branching rate b) and the first
two moments of X_t(phi) for Gaussian data: every space integral is a
Gaussian-Gaussian closed form, so only the final time integral of the
variance term is numeric (adaptive quadrature at 1e-8 relative tolerance).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import quad

from .geometry import ModelParams


@dataclass(frozen=True)
class SbmParams:
    """Diffusion coefficient and branching rate of the limit process."""

    sigma_sq: float
    b: float
    d: int

    def __post_init__(self) -> None:
        if self.sigma_sq <= 0.0 or self.b <= 0.0:
            raise ValueError("sigma_sq and b must be positive")


def limit_params(params: ModelParams, gamma_e_hat: float) -> SbmParams:
    """sigma^2 = rho |B_r| sigma_bar^2 and b = rho^2 |B_r|^2 gamma_e."""
    if gamma_e_hat <= 0.0:
        raise ValueError("gamma_e estimate must be positive")
    vol = params.ball_vol
    return SbmParams(params.rho * vol * params.sigma_bar_sq,
                     params.rho ** 2 * vol ** 2 * gamma_e_hat,
                     params.d)


@dataclass(frozen=True)
class GaussianBump:
    """A exp(-|x - c|^2 / (2 v)); closed under the heat semigroup."""

    amplitude: float
    center: tuple
    var: float

    def __post_init__(self) -> None:
        if self.var <= 0.0:
            raise ValueError("variance must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    def value(self, x: NDArray) -> float:
        r2 = float(np.sum((np.asarray(x, dtype=float) - np.asarray(self.center)) ** 2))
        return self.amplitude * math.exp(-r2 / (2.0 * self.var))

    def evolve(self, tau: float) -> "GaussianBump":
        """Heat semigroup at variance tau (tau = 0 is the identity)."""
        if tau < 0.0:
            raise ValueError("tau must be >= 0")
        if tau == 0.0:
            return self
        v = self.var + tau
        amp = self.amplitude * (self.var / v) ** (self.d / 2.0)
        return GaussianBump(amp, self.center, v)

    def squared(self) -> "GaussianBump":
        return GaussianBump(self.amplitude ** 2, self.center, self.var / 2.0)


@dataclass(frozen=True)
class GaussianMixtureMeasure:
    """Finite measure sum_i m_i N(c_i, u_i^2 I); u_i = 0 is a point mass."""

    masses: tuple
    centers: tuple
    widths: tuple

    @property
    def d(self) -> int:
        return len(self.centers[0])

    @classmethod
    def point_mass(cls, mass: float, center: Sequence[float]) -> "GaussianMixtureMeasure":
        return cls((float(mass),), (tuple(float(c) for c in center),), (0.0,))

    @classmethod
    def single(cls, mass: float, center: Sequence[float], width: float) -> "GaussianMixtureMeasure":
        return cls((float(mass),), (tuple(float(c) for c in center),), (float(width),))

    def total_mass(self) -> float:
        return float(sum(self.masses))

    def integrate(self, f: GaussianBump) -> float:
        """∫ f dX0 in closed form."""
        if f.d != self.d:
            raise ValueError("dimension mismatch")
        out = 0.0
        for m, c, u in zip(self.masses, self.centers, self.widths):
            veff = f.var + u * u
            r2 = float(np.sum((np.asarray(c) - np.asarray(f.center)) ** 2))
            out += m * f.amplitude * (f.var / veff) ** (self.d / 2.0) * math.exp(-r2 / (2.0 * veff))
        return out


def sbm_mean(sp: SbmParams, x0: GaussianMixtureMeasure, phi: GaussianBump, t: float) -> float:
    """E[X_t(phi)] = X0(P_t phi) with heat variance sigma^2 t."""
    _check_types(x0, phi)
    return x0.integrate(phi.evolve(sp.sigma_sq * t))


def sbm_second_moment(sp: SbmParams, x0: GaussianMixtureMeasure, phi: GaussianBump,
                      t: float, epsrel: float = 1e-8) -> float:
    """E[X_t(phi)^2] = mean^2 + b ∫_0^t X0(P_s[(P_{t-s} phi)^2]) ds."""
    _check_types(x0, phi)
    mean = sbm_mean(sp, x0, phi, t)
    if t == 0.0:
        return mean * mean

    def integrand(s: float) -> float:
        inner = phi.evolve(sp.sigma_sq * (t - s)).squared().evolve(sp.sigma_sq * s)
        return x0.integrate(inner)

    var_term, _ = quad(integrand, 0.0, t, epsabs=0.0, epsrel=epsrel, limit=200)
    return mean * mean + sp.b * var_term


def _check_types(x0, phi) -> None:
    if not isinstance(phi, GaussianBump):
        raise TypeError("phi must be a GaussianBump")
    if not isinstance(x0, GaussianMixtureMeasure):
        raise TypeError("X0 must be a GaussianMixtureMeasure")
