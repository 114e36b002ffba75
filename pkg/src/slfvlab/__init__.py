"""Monte Carlo laboratory for the spatial Lambda-Fleming-Viot (SLFV) process.

Event-driven forward simulation of the SLFV field, its one- and two-particle
coalescing duals (direct jump chain, time-changed random walk, and
constant-rate-pair constructions), rescaled empirical-measure functionals,
and closed-form super-Brownian-motion reference moments, together with an
experiment harness that verifies the identities tying them together.
"""
from __future__ import annotations

from .geometry import ModelParams, ball_volume, lens_volume, local_rates, sigma_bar_sq, step_density
from .rngstreams import RngKey, make_stream
from .stats import McEstimate, ks_two_sample, loglog_slope, mean_ci

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "RngKey",
    "McEstimate",
    "ball_volume",
    "lens_volume",
    "local_rates",
    "make_stream",
    "mean_ci",
    "ks_two_sample",
    "loglog_slope",
    "sigma_bar_sq",
    "step_density",
    "__version__",
]
