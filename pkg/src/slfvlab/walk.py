"""Continuous-time random walks with the two-uniform-ball step law.

Covers the rate-lambda walk driving both duals, exact first entrance/exit
times on stored jump paths, the radial harmonic and polynomial martingale
test functions used as optional-stopping oracles, hitting-probability
estimators, and the reflection-coupled pair of walks (d=2).

Paths are stored as exact jump sequences; there is no time grid anywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .geometry import ModelParams, _ball2_nb, _step_nb
from .stats import McEstimate, RunningStat


# ----------------------------------------------------------------------
# jump paths
# ----------------------------------------------------------------------

@dataclass
class JumpPath:
    """A piecewise-constant trajectory: value after jump k is positions[k]."""

    start: NDArray
    times: NDArray
    positions: NDArray
    horizon: float

    @property
    def n_jumps(self) -> int:
        return int(self.times.size)

    def value_at(self, t: float) -> NDArray:
        if t < 0.0 or t > self.horizon:
            raise ValueError("time outside [0, horizon]")
        k = int(np.searchsorted(self.times, t, side="right"))
        return self.start if k == 0 else self.positions[k - 1]

    def radii(self) -> NDArray:
        """|value| after each jump (start not included)."""
        return np.sqrt(np.sum(self.positions ** 2, axis=1))

    def validate(self, max_step: float) -> None:
        if self.times.size:
            if not np.all(np.diff(self.times) > 0.0) or self.times[-1] > self.horizon:
                raise ValueError("jump times must increase strictly and stay <= horizon")
            steps = np.diff(np.vstack([self.start, self.positions]), axis=0)
            if np.max(np.sqrt(np.sum(steps ** 2, axis=1))) > max_step + 1e-12:
                raise ValueError("step exceeds support bound")


@njit(cache=True)
def _walk_kernel(rng, d, r, rate, horizon, s0, s1, s2):
    cap = 16 + int(rate * horizon + 6.0 * math.sqrt(rate * horizon + 1.0))
    times = np.empty(cap)
    pos = np.empty((cap, 3))
    x0, x1, x2 = s0, s1, s2
    t = 0.0
    n = 0
    while True:
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        dx0, dx1, dx2 = _step_nb(rng, d, r)
        x0 += dx0
        x1 += dx1
        x2 += dx2
        if n == cap:
            cap = 2 * cap
            tnew = np.empty(cap)
            pnew = np.empty((cap, 3))
            tnew[:n] = times[:n]
            pnew[:n] = pos[:n]
            times = tnew
            pos = pnew
        times[n] = t
        pos[n, 0] = x0
        pos[n, 1] = x1
        pos[n, 2] = x2
        n += 1
    return times[:n].copy(), pos[:n].copy()


def simulate_walk(
    rng: np.random.Generator,
    params: ModelParams,
    start: NDArray,
    rate: float,
    horizon: float,
) -> JumpPath:
    """Rate-`rate` walk from `start` with i.i.d. two-uniform-ball steps."""
    if rate <= 0.0:
        raise ValueError("rate must be positive")
    if horizon < 0.0:
        raise ValueError("horizon must be >= 0")
    start = np.asarray(start, dtype=float)
    s = np.zeros(3)
    s[: params.d] = start
    times, pos = _walk_kernel(rng, params.d, params.r, rate, horizon, s[0], s[1], s[2])
    return JumpPath(start=start, times=times, positions=pos[:, : params.d], horizon=horizon)


def first_entrance(path: JumpPath, a: float) -> Optional[float]:
    """First jump time with |value| <= a; 0.0 if the start qualifies."""
    if a <= 0.0:
        raise ValueError("a must be positive")
    if np.linalg.norm(path.start) <= a:
        return 0.0
    hits = np.nonzero(path.radii() <= a)[0]
    return float(path.times[hits[0]]) if hits.size else None


def first_exit(path: JumpPath, big_a: float) -> Optional[float]:
    """First jump time with |value| >= A; 0.0 if the start qualifies."""
    if big_a <= 0.0:
        raise ValueError("A must be positive")
    if np.linalg.norm(path.start) >= big_a:
        return 0.0
    hits = np.nonzero(path.radii() >= big_a)[0]
    return float(path.times[hits[0]]) if hits.size else None


# ----------------------------------------------------------------------
# martingale test functions
# ----------------------------------------------------------------------

def martingale_functionals(params: ModelParams, t: float, y: NDArray) -> Dict[str, float]:
    """Exact martingale test functions of the rate-2rho|B_r| walk.

    h_radial is log|y| (d=2) or |y|^(2-d) (d=3); u2 and u4 are the
    space-time polynomials whose stopped means reproduce their initial
    values.
    """
    y = np.asarray(y, dtype=float)
    rad = float(np.linalg.norm(y))
    if rad == 0.0:
        raise ValueError("h_radial undefined at the origin")
    lam = params.rate_pair
    s2 = params.sigma2
    s4 = params.sigma4
    r2 = rad * rad
    return {
        "h_radial": math.log(rad) if params.d == 2 else rad ** (2 - params.d),
        "u2": r2 - lam * s2 * t,
        "u4": r2 * r2 - 4.0 * lam * s2 * r2 * t + 2.0 * (lam * s2) ** 2 * t * t - lam * s4 * t,
    }


# ----------------------------------------------------------------------
# hitting estimators
# ----------------------------------------------------------------------

@njit(cache=True)
def _exit_entrance_kernel(rng, d, r, rate, x0, x1, x2, a, big_a, time_cap, replicas,
                          outcome, hval):
    # outcome: 0 entered B_a first, 1 exited B_A first, 2 hit the time cap
    for i in range(replicas):
        y0, y1, y2 = x0, x1, x2
        t = 0.0
        code = 2
        while True:
            t += rng.exponential(1.0 / rate)
            if t > time_cap:
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            if nrm <= a:
                code = 0
                break
            if nrm >= big_a:
                code = 1
                break
        outcome[i] = code
        nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
        hval[i] = math.log(nrm) if d == 2 else 1.0 / nrm


def exit_entrance_sample(
    rng: np.random.Generator,
    params: ModelParams,
    x: NDArray,
    a: float,
    big_a: float,
    replicas: int,
    time_cap: float = 1.0e6,
) -> Tuple[NDArray, NDArray]:
    """Per-replica stopped outcomes and harmonic values at t_a ^ T_A.

    Returns (outcome, hval): outcome 0 = entered B_a, 1 = exited B_A,
    2 = censored by the time cap; hval = log|Y_stop| (d=2) or
    |Y_stop|^(2-d) (d=3).
    """
    x = np.asarray(x, dtype=float)
    nx = float(np.linalg.norm(x))
    if not (2.0 * params.r < a < nx < big_a):
        raise ValueError("need 2r < a < |x| < A")
    s = np.zeros(3)
    s[: params.d] = x
    outcome = np.empty(replicas, dtype=np.int8)
    hval = np.empty(replicas)
    _exit_entrance_kernel(rng, params.d, params.r, params.rate_pair,
                          s[0], s[1], s[2], a, big_a, time_cap, replicas, outcome, hval)
    return outcome, hval


def estimate_exit_before_entrance(
    rng: np.random.Generator,
    params: ModelParams,
    x: NDArray,
    a: float,
    big_a: float,
    replicas: int,
    time_cap: float = 1.0e6,
) -> McEstimate:
    """Unbiased indicator estimate of P_x(T_A < t_a), cap hits reported."""
    outcome, _ = exit_entrance_sample(rng, params, x, a, big_a, replicas, time_cap)
    wins = (outcome == 1).astype(float)
    st = RunningStat()
    st.add_moments(replicas, float(wins.sum()), float(wins.sum()))
    return st.estimate(censored=int(np.sum(outcome == 2)))


@njit(cache=True)
def _u2u4_kernel(rng, d, r, rate, x0, x1, x2, big_a, t_max, replicas, out):
    for i in range(replicas):
        y0, y1, y2 = x0, x1, x2
        t = 0.0
        t_stop = t_max
        while True:
            dt = rng.exponential(1.0 / rate)
            if t + dt > t_max:
                break
            t += dt
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
            if math.sqrt(y0 * y0 + y1 * y1 + y2 * y2) >= big_a:
                t_stop = t
                break
        r2 = y0 * y0 + y1 * y1 + y2 * y2
        out[i, 0] = r2
        out[i, 1] = r2 * r2
        out[i, 2] = t_stop


def stopped_u2u4_sample(
    rng: np.random.Generator,
    params: ModelParams,
    x: NDArray,
    big_a: float,
    t_max: float,
    replicas: int,
) -> NDArray:
    """(|Y|^2, |Y|^4, stop time) at T_A ^ t_max, one row per replica."""
    x = np.asarray(x, dtype=float)
    s = np.zeros(3)
    s[: params.d] = x
    out = np.empty((replicas, 3))
    _u2u4_kernel(rng, params.d, params.r, params.rate_pair,
                 s[0], s[1], s[2], big_a, t_max, replicas, out)
    return out


# ----------------------------------------------------------------------
# reflection-coupled pair (d = 2)
# ----------------------------------------------------------------------

@dataclass
class CoupledPair:
    """Two coupled rate-2rho|B_r| walks sharing one Poisson clock.

    path_x is the reflection of path_xp across {x1 = midpoint} until the
    coupling index, and identical to it afterwards.  n_couple counts
    single-uniform half-steps (0 for the degenerate equal-start case);
    couple_jump = ceil(n_couple / 2) is the pair-step index from which the
    stored paths agree.
    """

    path_xp: JumpPath
    path_x: JumpPath
    n_couple: Optional[int]
    couple_jump: Optional[int]
    t_couple: Optional[float]
    midpoint: float


@njit(cache=True)
def _coupled_kernel(rng, r, rate, xp, xo, horizon):
    cap = 16 + int(rate * horizon + 6.0 * math.sqrt(rate * horizon + 1.0))
    times = np.empty(cap)
    pos = np.empty((cap, 2))
    m = 0.5 * (xp + xo)
    # discrete single-uniform chain from x'
    s0, s1 = xp, 0.0
    n_c = -1
    n_disc = 0
    t = 0.0
    n = 0
    while True:
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        for _ in range(2):
            p0, p1 = s0, s1
            u0, u1 = _ball2_nb(rng, r)
            s0 += u0
            s1 += u1
            n_disc += 1
            if n_c < 0:
                # mark: new point lands within r of the reflected previous point
                q0 = 2.0 * m - p0
                dx = s0 - q0
                dy = s1 - p1
                if dx * dx + dy * dy <= r * r:
                    n_c = n_disc
        if n == cap:
            cap = 2 * cap
            tnew = np.empty(cap)
            pnew = np.empty((cap, 2))
            tnew[:n] = times[:n]
            pnew[:n] = pos[:n]
            times = tnew
            pos = pnew
        times[n] = t
        pos[n, 0] = s0
        pos[n, 1] = s1
        n += 1
    return times[:n].copy(), pos[:n].copy(), n_c


def simulate_coupled_pair(
    rng: np.random.Generator,
    params: ModelParams,
    K: float,
    x_offset: float,
    horizon: float,
) -> CoupledPair:
    """Reflection-coupled walks from x' = (K+2r, 0) and x = (K+x_offset, 0)."""
    if params.d != 2:
        raise ValueError("the reflection coupling is a d=2 construction")
    r = params.r
    if K <= 3.0 * r:
        raise ValueError("need K > 3r")
    if not 0.0 <= x_offset <= 2.0 * r:
        raise ValueError("x_offset must lie in [0, 2r]")
    xp = np.array([K + 2.0 * r, 0.0])
    xo = np.array([K + x_offset, 0.0])
    rate = params.rate_pair
    if x_offset == 2.0 * r:
        path = simulate_walk(rng, params, xp, rate, horizon)
        twin = JumpPath(path.start.copy(), path.times.copy(), path.positions.copy(), horizon)
        return CoupledPair(path, twin, 0, 0, 0.0, float(xp[0]))
    times, pos, n_c = _coupled_kernel(rng, r, rate, xp[0], xo[0], horizon)
    m = 0.5 * (xp[0] + xo[0])
    path_xp = JumpPath(xp, times, pos, horizon)
    coupled = n_c > 0
    couple_jump = -(-n_c // 2) if coupled else times.size + 1
    pos_x = pos.copy()
    # pair steps strictly before couple_jump are mirror images
    k_refl = min(max(couple_jump - 1, 0), pos_x.shape[0])
    pos_x[:k_refl, 0] = 2.0 * m - pos_x[:k_refl, 0]
    path_x = JumpPath(xo, times.copy(), pos_x, horizon)
    if coupled and couple_jump <= times.size:
        t_couple: Optional[float] = float(times[couple_jump - 1])
    else:
        t_couple = None
    return CoupledPair(path_xp, path_x, int(n_c) if coupled else None,
                       int(couple_jump) if coupled else None, t_couple, float(m))


@njit(cache=True)
def _coupling_tail_kernel(rng, r, half_sep, n_cap, replicas, out):
    # N_c law for starts (+-half_sep, 0); midpoint frame, reflection across x1=0
    for i in range(replicas):
        s0, s1 = half_sep, 0.0
        n_c = 0
        for n in range(1, n_cap + 1):
            p0, p1 = s0, s1
            u0, u1 = _ball2_nb(rng, r)
            s0 += u0
            s1 += u1
            dx = s0 + p0
            dy = s1 - p1
            if dx * dx + dy * dy <= r * r:
                n_c = n
                break
        out[i] = n_c if n_c > 0 else n_cap + 1


def coupling_step_tail(
    rng: np.random.Generator,
    params: ModelParams,
    separation: float,
    replicas: int,
    n_cap: int = 200_000,
) -> NDArray:
    """Samples of the discrete coupling step N_c for a given start separation.

    Values n_cap+1 denote replicas that had not coupled by the cap.
    """
    if params.d != 2:
        raise ValueError("the reflection coupling is a d=2 construction")
    if not 0.0 < separation <= 2.0 * params.r:
        raise ValueError("separation must lie in (0, 2r]")
    out = np.empty(replicas, dtype=np.int64)
    _coupling_tail_kernel(rng, params.r, 0.5 * separation, n_cap, replicas, out)
    return out


@njit(cache=True)
def _coupling_hit_kernel(rng, r, K, x_offset, delta, n_cap, replicas, out):
    # outcome 1: coupled strictly before entering B_delta or leaving B_2K
    xp0 = K + 2.0 * r
    xo0 = K + x_offset
    m = 0.5 * (xp0 + xo0)
    for i in range(replicas):
        s0, s1 = xp0, 0.0
        n_c_pair = -1
        n_disc = 0
        res = -1
        for n in range(1, n_cap + 1):
            coupled_now = False
            for _ in range(2):
                p0, p1 = s0, s1
                u0, u1 = _ball2_nb(rng, r)
                s0 += u0
                s1 += u1
                n_disc += 1
                if n_c_pair < 0:
                    q0 = 2.0 * m - p0
                    dx = s0 - q0
                    dy = s1 - p1
                    if dx * dx + dy * dy <= r * r:
                        n_c_pair = (n_disc + 1) // 2
            if n_c_pair == n:
                coupled_now = True
            # pair-step positions of both walks
            a0, a1 = s0, s1
            if n_c_pair < 0 or n < n_c_pair:
                b0, b1 = 2.0 * m - s0, s1
            else:
                b0, b1 = s0, s1
            ra = math.sqrt(a0 * a0 + a1 * a1)
            rb = math.sqrt(b0 * b0 + b1 * b1)
            hit = (ra <= delta) or (rb <= delta) or (ra >= 2.0 * K) or (rb >= 2.0 * K)
            if coupled_now and not hit:
                res = 1
                break
            if hit:
                res = 0
                break
        out[i] = res


def coupling_before_hitting(
    rng: np.random.Generator,
    params: ModelParams,
    K: float,
    x_offset: float,
    replicas: int,
    delta: Optional[float] = None,
    n_cap: int = 50_000_000,
) -> McEstimate:
    """P(coupling strictly before entering B_delta or leaving B_2K)."""
    if params.d != 2:
        raise ValueError("the reflection coupling is a d=2 construction")
    r = params.r
    if delta is None:
        delta = 3.0 * r
    if K <= max(delta, 3.0 * r):
        raise ValueError("need K > max(delta, 3r)")
    out = np.empty(replicas, dtype=np.int8)
    _coupling_hit_kernel(rng, r, K, x_offset, delta, n_cap, replicas, out)
    censored = int(np.sum(out < 0))
    wins = (out == 1).astype(float)
    st = RunningStat()
    st.add_moments(replicas, float(wins.sum()), float(wins.sum()))
    return st.estimate(censored=censored)


@njit(cache=True)
def _walk_end_kernel(rng, d, r, rate, x0, x1, x2, horizon, replicas, out):
    for i in range(replicas):
        y0, y1, y2 = x0, x1, x2
        t = 0.0
        while True:
            t += rng.exponential(1.0 / rate)
            if t > horizon:
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
        out[i, 0] = y0
        out[i, 1] = y1
        out[i, 2] = y2


def walk_end_sample(
    rng: np.random.Generator,
    params: ModelParams,
    start: NDArray,
    rate: float,
    horizon: float,
    replicas: int,
) -> NDArray:
    """End positions of `replicas` independent walks at the horizon."""
    s = np.zeros(3)
    s[: params.d] = np.asarray(start, dtype=float)
    out = np.empty((replicas, 3))
    _walk_end_kernel(rng, params.d, params.r, rate, s[0], s[1], s[2],
                     horizon, replicas, out)
    return out[:, : params.d]
