"""One- and two-particle dual lineages and their difference process.

Two jump laws are implemented for the pair.  Under the event law
(law="event"), a lone move's jump center is thinned by rho on the lens
toward the partner — the conditional law of a common event center given
that exactly one lineage was marked — which reproduces the forward
process's pair correlations exactly.  Under the plain law (law="plain"),
every move carries the unconditioned two-uniform-ball step.  Total rates,
the kill rate, the coalescence landing law, the one-particle marginals,
and all dynamics at separations beyond 2r agree between the laws.

The plain-law difference process is simulated three independent ways: as
the direct jump chain with state-dependent rates and a trap at 0, as a
time-changed free walk killed at rate k along the slowed clock, and as a
time change of a constant-rate pair of independent walks.  All three are
versions of one law, which the test suite checks pairwise; the forward-
facing duality checks use the event law.

Conventions: the free walk Y runs at rate 2*rho*|B_r|; "dual time" refers to
the slowed clock of the difference process, and I / I_inv map walk time to
dual time and back (I_inv(t) <= t <= I(t)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .geometry import (
    ModelParams,
    _ball2_nb,
    _ball3_nb,
    _lens_nb,
    _step_nb,
    ball_vol_nb,
    sample_lens_point,
    sample_uniform_ball,
    sample_step,
    lens_volume,
)
from .stats import McEstimate, RunningStat
from .walk import JumpPath, simulate_walk

_WEIGHT_FREEZE = 2.5  # carried weights freeze at exp(-2.5); see the weight kernels


# ----------------------------------------------------------------------
# single dual
# ----------------------------------------------------------------------

def simulate_single_dual(
    rng: np.random.Generator, params: ModelParams, start: NDArray, horizon: float
) -> JumpPath:
    """The one-particle dual: a rate rho|B_r| walk with two-ball steps."""
    return simulate_walk(rng, params, start, params.rate_single, horizon)


# ----------------------------------------------------------------------
# two-particle dual (exact CTMC)
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class DualPairState:
    pos1: NDArray
    pos2: NDArray
    coalesced: bool
    tau: Optional[float]

    def __post_init__(self) -> None:
        if self.coalesced and not np.array_equal(self.pos1, self.pos2):
            raise ValueError("coalesced state with distinct positions")


@dataclass
class DualPairPath:
    """Event-resolved trajectory of the two-particle dual."""

    x1: NDArray
    x2: NDArray
    times: NDArray
    pos1: NDArray
    pos2: NDArray
    tau: Optional[float]
    horizon: float

    def state_at(self, t: float) -> DualPairState:
        if t < 0.0 or t > self.horizon:
            raise ValueError("time outside [0, horizon]")
        k = int(np.searchsorted(self.times, t, side="right"))
        p1 = self.x1 if k == 0 else self.pos1[k - 1]
        p2 = self.x2 if k == 0 else self.pos2[k - 1]
        coal = self.tau is not None and t >= self.tau
        return DualPairState(p1, p2, coal, self.tau if coal else None)

    def separations(self) -> NDArray:
        return np.sqrt(np.sum((self.pos1 - self.pos2) ** 2, axis=1))


def _sample_lone_move(rng: np.random.Generator, params: ModelParams,
                      partner_offset: NDArray) -> NDArray:
    """Event-law lone-move displacement: tilted center plus a parental draw."""
    d, r, rho = params.d, params.r, params.rho
    while True:
        p = sample_uniform_ball(rng, d, r)
        if float(np.sum((p - partner_offset) ** 2)) <= r * r and rng.random() < rho:
            continue
        break
    return p + sample_uniform_ball(rng, d, r)


def simulate_two_particle(
    rng: np.random.Generator,
    params: ModelParams,
    x1: NDArray,
    x2: NDArray,
    horizon: float,
    law: str = "plain",
) -> Tuple[DualPairPath, Optional[float]]:
    """Exact CTMC of the two-particle dual; returns (path, tau).

    law="event": lone moves use the event-construction law (jump centers
    thinned on the lens toward the partner), which matches the forward
    process exactly.  law="plain": every move is an unconditioned two-ball
    step.  Rates, the coalescence landing law, and everything at
    separations beyond 2r coincide under both laws.
    """
    tilted = _law_flag(law)
    d, r, rho = params.d, params.r, params.rho
    vol = params.ball_vol
    y1 = np.asarray(x1, dtype=float).copy()
    y2 = np.asarray(x2, dtype=float).copy()
    tau: Optional[float] = 0.0 if np.array_equal(y1, y2) else None
    t = 0.0
    times: List[float] = []
    p1: List[NDArray] = []
    p2: List[NDArray] = []
    while True:
        if tau is not None:
            total = rho * vol
        else:
            lens = lens_volume(d, r, float(np.linalg.norm(y1 - y2)))
            move = rho * vol - rho * rho * lens
            coal = rho * rho * lens
            total = 2.0 * move + coal
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        if tau is not None:
            step = sample_step(rng, params)
            y1 = y1 + step
            y2 = y1.copy()
        else:
            u = rng.random() * total
            if u < move:
                step = (_sample_lone_move(rng, params, y2 - y1) if tilted
                        else sample_step(rng, params))
                y1 = y1 + step
            elif u < 2.0 * move:
                step = (_sample_lone_move(rng, params, y1 - y2) if tilted
                        else sample_step(rng, params))
                y2 = y2 + step
            else:
                land = sample_lens_point(rng, params, y1, y2) + sample_uniform_ball(rng, d, r)
                y1 = land.copy()
                y2 = land.copy()
                tau = t
        times.append(t)
        p1.append(y1.copy())
        p2.append(y2.copy())
    return (
        DualPairPath(
            np.asarray(x1, dtype=float),
            np.asarray(x2, dtype=float),
            np.array(times),
            np.array(p1).reshape(-1, d),
            np.array(p2).reshape(-1, d),
            tau,
            horizon,
        ),
        tau,
    )


# ----------------------------------------------------------------------
# difference process, direct jump chain
# ----------------------------------------------------------------------

@njit(cache=True)
def _diff_direct_path_kernel(rng, d, r, rho, s0, s1, s2, horizon):
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    cap = 16 + int(lam2 * horizon + 6.0 * math.sqrt(lam2 * horizon + 1.0))
    times = np.empty(cap)
    pos = np.empty((cap, 3))
    y0, y1, y2 = s0, s1, s2
    t = 0.0
    n = 0
    tau = math.inf
    while True:
        nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
        psi = rho * rho * _lens_nb(d, r, nrm)
        total = lam2 - psi
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        if psi > 0.0 and rng.random() * total < psi:
            y0 = 0.0
            y1 = 0.0
            y2 = 0.0
            tau = t
        else:
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
        if n == cap:
            cap = 2 * cap
            tnew = np.empty(cap)
            pnew = np.empty((cap, 3))
            tnew[:n] = times[:n]
            pnew[:n] = pos[:n]
            times = tnew
            pos = pnew
        times[n] = t
        pos[n, 0] = y0
        pos[n, 1] = y1
        pos[n, 2] = y2
        n += 1
        if tau < math.inf:
            break
    return times[:n].copy(), pos[:n].copy(), tau


def simulate_difference_direct(
    rng: np.random.Generator, params: ModelParams, x: NDArray, horizon: float
) -> Tuple[JumpPath, Optional[float]]:
    """Direct difference CTMC from x != 0; the trap at 0 ends the path."""
    x = np.asarray(x, dtype=float)
    if not np.any(x != 0.0):
        raise ValueError("difference process must start off the trap")
    s = np.zeros(3)
    s[: params.d] = x
    times, pos, tau = _diff_direct_path_kernel(
        rng, params.d, params.r, params.rho, s[0], s[1], s[2], horizon
    )
    path = JumpPath(start=x, times=times, positions=pos[:, : params.d], horizon=horizon)
    return path, (None if math.isinf(tau) else float(tau))


# ----------------------------------------------------------------------
# time change of the free walk
# ----------------------------------------------------------------------

@dataclass
class TimeChangedDifference:
    """The slowed-clock representation of the dual difference.

    clock_knots pairs walk times with dual times I(t); betas/psis/kills hold
    the piecewise-constant local functionals along the base walk's sojourns.
    """

    base_path: JumpPath
    knots_walk: NDArray
    knots_dual: NDArray
    betas: NDArray
    psis: NDArray
    kills: NDArray
    exp_mark: Optional[float] = None
    kappa: Optional[float] = None

    @property
    def clock_knots(self) -> NDArray:
        return np.column_stack([self.knots_walk, self.knots_dual])

    @property
    def dual_horizon(self) -> float:
        return float(self.knots_dual[-1])

    def I(self, t: float) -> float:
        """Dual time accrued by walk time t."""
        if t < 0.0 or t > self.base_path.horizon:
            raise ValueError("walk time outside [0, horizon]")
        k = int(np.searchsorted(self.knots_walk, t, side="right")) - 1
        k = min(k, self.betas.size - 1)
        return float(self.knots_dual[k] + (t - self.knots_walk[k]) / self.betas[k])

    def I_inv(self, t: float) -> float:
        """Walk time at dual time t."""
        if t < 0.0 or t > self.dual_horizon:
            raise ValueError("dual time outside [0, I(horizon)]")
        k = int(np.searchsorted(self.knots_dual, t, side="right")) - 1
        k = min(k, self.betas.size - 1)
        return float(self.knots_walk[k] + (t - self.knots_dual[k]) * self.betas[k])

    def xi_at(self, t: float) -> NDArray:
        """The dual difference at dual time t (0 after absorption)."""
        if self.kappa is not None and t >= self.kappa:
            return np.zeros(self.base_path.start.size)
        return self.base_path.value_at(self.I_inv(t))

    def kill_integral(self, t: float) -> float:
        """∫ k(Y_s) ds over walk time [0, I_inv(t)] (= ∫ psi along dual time)."""
        tw = self.I_inv(t)
        k = int(np.searchsorted(self.knots_walk, tw, side="right")) - 1
        k = min(k, self.betas.size - 1)
        acc = 0.0
        for j in range(k):
            acc += self.kills[j] * (self.knots_walk[j + 1] - self.knots_walk[j])
        acc += self.kills[k] * (tw - self.knots_walk[k])
        return acc


def build_time_change(path: JumpPath, params: ModelParams) -> TimeChangedDifference:
    """Exact clock knots of I along a free-walk path (no absorption mark)."""
    d, r, rho = params.d, params.r, params.rho
    vol = params.ball_vol
    starts = np.vstack([path.start, path.positions])
    n_soj = starts.shape[0]
    knots_walk = np.concatenate([[0.0], path.times, [path.horizon]])
    if knots_walk.size != n_soj + 1:
        raise ValueError("malformed path")
    betas = np.empty(n_soj)
    psis = np.empty(n_soj)
    kills = np.empty(n_soj)
    for k in range(n_soj):
        a = float(np.linalg.norm(starts[k]))
        if a <= 0.0:
            raise ValueError("time change undefined on the trap state")
        psi = rho * rho * lens_volume(d, r, a)
        psis[k] = psi
        betas[k] = 1.0 - psi / (rho * vol)
        kills[k] = rho * vol * psi / (rho * vol - psi) if psi > 0.0 else 0.0
    knots_dual = np.empty(n_soj + 1)
    knots_dual[0] = 0.0
    for k in range(n_soj):
        knots_dual[k + 1] = knots_dual[k] + (knots_walk[k + 1] - knots_walk[k]) / betas[k]
    return TimeChangedDifference(path, knots_walk, knots_dual, betas, psis, kills)


def attach_mark(tcd: TimeChangedDifference, exp_mark: float) -> TimeChangedDifference:
    """Set the exponential mark and locate the absorption time kappa."""
    c = 0.0
    kappa: Optional[float] = None
    for k in range(tcd.betas.size):
        dd = tcd.knots_dual[k + 1] - tcd.knots_dual[k]
        gain = tcd.psis[k] * dd
        if c + gain > exp_mark:
            kappa = float(tcd.knots_dual[k] + (exp_mark - c) / tcd.psis[k])
            break
        c += gain
    tcd.exp_mark = exp_mark
    tcd.kappa = kappa
    return tcd


def simulate_difference_timechange(
    rng: np.random.Generator, params: ModelParams, x: NDArray, horizon: float
) -> Tuple[TimeChangedDifference, Optional[float]]:
    """Time-changed construction of the dual difference on [0, horizon].

    Since I_inv(t) <= t, a base walk run to `horizon` always covers dual
    time `horizon`; kappa is reported only if it falls within the horizon.
    """
    x = np.asarray(x, dtype=float)
    if not np.any(x != 0.0):
        raise ValueError("difference process must start off the trap")
    base = simulate_walk(rng, params, x, params.rate_pair, horizon)
    tcd = build_time_change(base, params)
    attach_mark(tcd, float(rng.exponential(1.0)))
    if tcd.kappa is not None and tcd.kappa > horizon:
        tcd.kappa = None
    return tcd, tcd.kappa


def survival_weight(tcd: TimeChangedDifference, t: float) -> float:
    """exp(-∫_0^{I_inv(t)} k(Y_s) ds): the conditional survival P(kappa > t | Y)."""
    if t < 0.0 or t > tcd.base_path.horizon:
        raise ValueError("t beyond the base path horizon")
    return math.exp(-tcd.kill_integral(t))


# ----------------------------------------------------------------------
# replica kernels: tau / kappa / end-state observables
# ----------------------------------------------------------------------

@njit(cache=True, inline="always")
def _pair_start_nb(rng, d, r):
    if d == 2:
        a0, a1 = _ball2_nb(rng, r)
        b0, b1 = _ball2_nb(rng, r)
        return a0, a1, 0.0, b0, b1, 0.0
    a0, a1, a2 = _ball3_nb(rng, r)
    b0, b1, b2 = _ball3_nb(rng, r)
    return a0, a1, a2, b0, b1, b2


@njit(cache=True)
def _diff_direct_obs_kernel(rng, d, r, rho, horizon, t_obs, replicas, use_pair_start,
                            sx0, sx1, sx2, taus, robs):
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    for i in range(replicas):
        if use_pair_start:
            a0, a1, a2, b0, b1, b2 = _pair_start_nb(rng, d, r)
            y0, y1, y2 = a0 - b0, a1 - b1, a2 - b2
        else:
            y0, y1, y2 = sx0, sx1, sx2
        t = 0.0
        tau = math.inf
        seen_obs = False
        rob = 0.0
        while True:
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            psi = rho * rho * _lens_nb(d, r, nrm)
            total = lam2 - psi
            t_new = t + rng.exponential(1.0 / total)
            if not seen_obs and t_new > t_obs:
                rob = nrm
                seen_obs = True
            if t_new > horizon:
                break
            t = t_new
            if psi > 0.0 and rng.random() * total < psi:
                tau = t
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
        taus[i] = tau
        robs[i] = rob if (seen_obs and tau > t_obs) else (0.0 if tau <= t_obs else rob)


@njit(cache=True)
def _timechange_obs_kernel(rng, d, r, rho, horizon, t_obs, replicas, use_pair_start,
                           sx0, sx1, sx2, kappas, robs):
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    rhovol = rho * vol
    for i in range(replicas):
        if use_pair_start:
            a0, a1, a2, b0, b1, b2 = _pair_start_nb(rng, d, r)
            y0, y1, y2 = a0 - b0, a1 - b1, a2 - b2
        else:
            y0, y1, y2 = sx0, sx1, sx2
        e = rng.exponential(1.0)
        td = 0.0
        c = 0.0
        kappa = math.inf
        seen_obs = False
        rob = 0.0
        while True:
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            psi = rho * rho * _lens_nb(d, r, nrm)
            beta = 1.0 - psi / rhovol
            hold = rng.exponential(1.0 / lam2)
            dd = hold / beta
            # absorption inside this dual sojourn?
            t_kill = math.inf
            if psi > 0.0 and c + psi * dd > e:
                t_kill = td + (e - c) / psi
            if not seen_obs and td + dd > t_obs:
                if t_kill <= t_obs:
                    rob = 0.0
                else:
                    rob = nrm
                seen_obs = True
            if t_kill <= td + dd:
                kappa = t_kill
                break
            c += psi * dd
            td += dd
            if td > horizon:
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
        kappas[i] = kappa
        robs[i] = rob


@njit(cache=True)
def _const_pair_obs_kernel(rng, d, r, rho, horizon, t_obs, replicas, use_pair_start,
                           sx0, sx1, sx2, taus, robs):
    vol = ball_vol_nb(d, r)
    lam = rho * vol
    for i in range(replicas):
        if use_pair_start:
            a0, a1, a2, b0, b1, b2 = _pair_start_nb(rng, d, r)
        else:
            a0, a1, a2 = sx0, sx1, sx2
            b0, b1, b2 = 0.0, 0.0, 0.0
        e = rng.exponential(1.0)
        tw = 0.0
        td = 0.0
        dint = 0.0
        tau = math.inf
        seen_obs = False
        rob = 0.0
        while True:
            dx = a0 - b0
            dy = a1 - b1
            dz = a2 - b2
            sep = math.sqrt(dx * dx + dy * dy + dz * dz)
            psi = rho * rho * _lens_nb(d, r, sep)
            beta = 1.0 - psi / lam
            kk = lam * psi / (lam - psi) if psi > 0.0 else 0.0
            hold = rng.exponential(1.0 / (2.0 * lam))
            # kill crossing in constant-rate time
            t_kill_w = math.inf
            if kk > 0.0 and dint + kk * hold > e:
                t_kill_w = (e - dint) / kk
            dd = hold / beta
            td_kill = td + (t_kill_w / beta) if t_kill_w < math.inf else math.inf
            if not seen_obs and td + dd > t_obs:
                if td_kill <= t_obs:
                    rob = 0.0
                else:
                    rob = sep
                seen_obs = True
            if t_kill_w <= hold:
                tau = td_kill
                break
            dint += kk * hold
            td += dd
            tw += hold
            if td > horizon:
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            if rng.random() < 0.5:
                a0 += dx0
                a1 += dx1
                a2 += dx2
            else:
                b0 += dx0
                b1 += dx1
                b2 += dx2
        taus[i] = tau
        robs[i] = rob


def difference_samples(
    rng: np.random.Generator,
    params: ModelParams,
    horizon: float,
    t_obs: float,
    replicas: int,
    construction: str,
    start: Optional[NDArray] = None,
) -> Tuple[NDArray, NDArray]:
    """(tau, |xi| at t_obs) samples under one of the three constructions.

    tau is +inf when no coalescence occurred before the horizon; the start
    is the difference of two independent uniform-ball points unless `start`
    is given.  construction: "direct" | "timechange" | "pair".
    """
    use_pair = start is None
    s = np.zeros(3)
    if start is not None:
        s[: params.d] = np.asarray(start, dtype=float)
    taus = np.empty(replicas)
    robs = np.empty(replicas)
    args = (rng, params.d, params.r, params.rho, horizon, t_obs, replicas,
            use_pair, s[0], s[1], s[2], taus, robs)
    if construction == "direct":
        _diff_direct_obs_kernel(*args)
    elif construction == "timechange":
        _timechange_obs_kernel(*args)
    elif construction == "pair":
        _const_pair_obs_kernel(*args)
    else:
        raise ValueError(f"unknown construction {construction!r}")
    return taus, robs


# ----------------------------------------------------------------------
# non-coalescence probability gamma_e
# ----------------------------------------------------------------------

@njit(cache=True)
def _gamma_direct_kernel(rng, d, r, rho, t_grid, replicas, counts):
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    n = t_grid.size
    t_max = t_grid[n - 1]
    for i in range(replicas):
        a0, a1, a2, b0, b1, b2 = _pair_start_nb(rng, d, r)
        y0, y1, y2 = a0 - b0, a1 - b1, a2 - b2
        t = 0.0
        j = 0
        while j < n:
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            psi = rho * rho * _lens_nb(d, r, nrm)
            total = lam2 - psi
            t_new = t + rng.exponential(1.0 / total)
            while j < n and t_grid[j] < t_new:
                counts[j] += 1
                j += 1
            if j >= n or t_new > t_max:
                break
            t = t_new
            if psi > 0.0 and rng.random() * total < psi:
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2


@njit(cache=True)
def _gamma_weight_kernel(rng, d, r, rho, t_grid, replicas, sums, sumsqs, freeze):
    # Carried weight exp(-C) is frozen at exp(-freeze) once C crosses that
    # level; the residual kill is then raced against a fresh Exp(1), which
    # keeps E[recorded value | walk] = exp(-C_t) exactly while bounding the
    # kill budget per replica.
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    rhovol = rho * vol
    n = t_grid.size
    for i in range(replicas):
        a0, a1, a2, b0, b1, b2 = _pair_start_nb(rng, d, r)
        y0, y1, y2 = a0 - b0, a1 - b1, a2 - b2
        thresh = freeze + rng.exponential(1.0)
        td = 0.0
        c = 0.0
        j = 0
        while j < n:
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            psi = rho * rho * _lens_nb(d, r, nrm)
            beta = 1.0 - psi / rhovol
            hold = rng.exponential(1.0 / lam2)
            dd = hold / beta
            t_cross = td + (thresh - c) / psi if (psi > 0.0 and c + psi * dd > thresh) else math.inf
            while j < n and t_grid[j] < td + dd:
                if t_grid[j] >= t_cross:
                    j = n
                    break
                cj = c + psi * (t_grid[j] - td)
                w = math.exp(-min(cj, freeze))
                sums[j] += w
                sumsqs[j] += w * w
                j += 1
            if j >= n or t_cross <= td + dd:
                break
            c += psi * dd
            td += dd
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2


def gamma_e_grid(
    rng: np.random.Generator,
    params: ModelParams,
    t_grid: NDArray,
    replicas: int,
    method: str = "direct",
) -> List[McEstimate]:
    """gamma_e(t) on a time grid, one uniform ball pair per replica."""
    t_grid = np.asarray(sorted(float(t) for t in t_grid))
    if t_grid.size and t_grid[0] < 0.0:
        raise ValueError("t must be >= 0")
    out: List[McEstimate] = []
    if method in ("direct", "exact"):
        counts = np.zeros(t_grid.size, dtype=np.int64)
        kern = _gamma_direct_kernel if method == "direct" else _gamma_exact_kernel
        kern(rng, params.d, params.r, params.rho, t_grid, replicas, counts)
        for j in range(t_grid.size):
            st = RunningStat()
            st.add_moments(replicas, float(counts[j]), float(counts[j]))
            out.append(st.estimate())
    elif method == "weighted":
        sums = np.zeros(t_grid.size)
        sumsqs = np.zeros(t_grid.size)
        _gamma_weight_kernel(rng, params.d, params.r, params.rho, t_grid, replicas,
                             sums, sumsqs, _WEIGHT_FREEZE)
        for j in range(t_grid.size):
            st = RunningStat()
            st.add_moments(replicas, float(sums[j]), float(sumsqs[j]))
            out.append(st.estimate())
    else:
        raise ValueError(f"unknown method {method!r}")
    return out


def estimate_gamma_e(
    rng: np.random.Generator,
    params: ModelParams,
    t: float,
    replicas: int,
    method: str = "direct",
) -> McEstimate:
    """Non-coalescence probability over uniform starts in B_r, at one t."""
    if t < 0.0:
        raise ValueError("t must be >= 0")
    if t == 0.0:
        return McEstimate(1.0, 0.0, replicas)
    return gamma_e_grid(rng, params, np.array([t]), replicas, method)[0]


# ----------------------------------------------------------------------
# constant-rate pair (full object, for path-level checks)
# ----------------------------------------------------------------------

@dataclass
class ConstantRatePair:
    """Constant-rate representation of the two-particle dual.

    times/pos1/pos2 record the pair of independent walks (and the shared
    walk after the diagonal jump) in constant-rate time; bar_kappa is the
    diagonal-jump time on that clock, tau its image on the dual clock.
    """

    x1: NDArray
    x2: NDArray
    times: NDArray
    pos1: NDArray
    pos2: NDArray
    bar_kappa: Optional[float]
    landing: Optional[NDArray]
    knots_walk: NDArray
    knots_dual: NDArray
    betas: NDArray
    horizon: float
    sup_walks: NDArray  # per-walk sup of |W^i| over the simulated window

    @property
    def tau(self) -> Optional[float]:
        if self.bar_kappa is None:
            return None
        return self._dual_at(self.bar_kappa)

    def _dual_at(self, tw: float) -> float:
        k = int(np.searchsorted(self.knots_walk, tw, side="right")) - 1
        k = min(k, self.betas.size - 1)
        return float(self.knots_dual[k] + (tw - self.knots_walk[k]) / self.betas[k])

    def _walk_at(self, td: float) -> float:
        k = int(np.searchsorted(self.knots_dual, td, side="right")) - 1
        k = min(k, self.betas.size - 1)
        return float(self.knots_walk[k] + (td - self.knots_dual[k]) * self.betas[k])

    @property
    def dual_horizon(self) -> float:
        return float(self.knots_dual[-1])

    def state_at_dual(self, t: float) -> Tuple[NDArray, NDArray]:
        tw = self._walk_at(t)
        k = int(np.searchsorted(self.times, tw, side="right"))
        p1 = self.x1 if k == 0 else self.pos1[k - 1]
        p2 = self.x2 if k == 0 else self.pos2[k - 1]
        return p1, p2

    def sup_pair_norm_dual(self, t: float) -> float:
        """sup over dual times <= t of max(|xi1|, |xi2|)."""
        tw = self._walk_at(t)
        k = int(np.searchsorted(self.times, tw, side="right"))
        best = max(float(np.linalg.norm(self.x1)), float(np.linalg.norm(self.x2)))
        for j in range(k):
            best = max(best, float(np.linalg.norm(self.pos1[j])),
                       float(np.linalg.norm(self.pos2[j])))
        return best


def simulate_constant_rate_pair(
    rng: np.random.Generator,
    params: ModelParams,
    x1: NDArray,
    x2: NDArray,
    horizon: float,
) -> ConstantRatePair:
    """Two independent rate-rho|B_r| walks, killed onto the diagonal.

    Runs in constant-rate time up to `horizon`; the dual-time trajectory is
    recovered through the stored clock knots (dual horizon >= horizon).
    """
    d, r, rho = params.d, params.r, params.rho
    vol = params.ball_vol
    lam = rho * vol
    y1 = np.asarray(x1, dtype=float).copy()
    y2 = np.asarray(x2, dtype=float).copy()
    equal_start = bool(np.array_equal(y1, y2))
    e = float(rng.exponential(1.0))
    t = 0.0
    dint = 0.0
    bar_kappa: Optional[float] = 0.0 if equal_start else None
    landing: Optional[NDArray] = y1.copy() if equal_start else None
    times: List[float] = []
    p1: List[NDArray] = []
    p2: List[NDArray] = []
    kw: List[float] = [0.0]
    kd: List[float] = [0.0]
    betas: List[float] = []
    sup1 = float(np.linalg.norm(y1))
    sup2 = float(np.linalg.norm(y2))
    sup3 = 0.0
    w3 = np.zeros(d)
    coalesced = equal_start
    while True:
        if coalesced:
            beta = 1.0
            kk = 0.0
            rate = lam
        else:
            sep = float(np.linalg.norm(y1 - y2))
            lens = lens_volume(d, r, sep)
            psi = rho * rho * lens
            beta = 1.0 - psi / lam
            kk = lam * psi / (lam - psi) if psi > 0.0 else 0.0
            rate = 2.0 * lam
        hold = float(rng.exponential(1.0 / rate))
        t_kill = t + (e - dint) / kk if (not coalesced and kk > 0.0 and dint + kk * hold > e) else math.inf
        if t_kill <= t + hold and t_kill <= horizon:
            # diagonal jump at bar_kappa, before the next walk event
            betas.append(beta)
            kw.append(t_kill)
            kd.append(kd[-1] + (t_kill - kw[-2]) / beta)
            land = sample_lens_point(rng, params, y1, y2) + sample_uniform_ball(rng, d, r)
            y1 = land.copy()
            y2 = land.copy()
            bar_kappa = t_kill
            landing = land.copy()
            coalesced = True
            t = t_kill
            times.append(t)
            p1.append(y1.copy())
            p2.append(y2.copy())
            continue
        if t + hold > horizon:
            betas.append(beta)
            kw.append(horizon)
            kd.append(kd[-1] + (horizon - kw[-2]) / beta)
            break
        if not coalesced:
            dint += kk * hold
        betas.append(beta)
        t += hold
        kw.append(t)
        kd.append(kd[-1] + hold / beta)
        step = sample_step(rng, params)
        if coalesced:
            w3 = w3 + step
            sup3 = max(sup3, float(np.linalg.norm(w3)))
            y1 = y1 + step
            y2 = y1.copy()
        else:
            if rng.random() < 0.5:
                y1 = y1 + step
            else:
                y2 = y2 + step
        sup1 = max(sup1, float(np.linalg.norm(y1))) if not coalesced else sup1
        sup2 = max(sup2, float(np.linalg.norm(y2))) if not coalesced else sup2
        times.append(t)
        p1.append(y1.copy())
        p2.append(y2.copy())
    return ConstantRatePair(
        np.asarray(x1, dtype=float),
        np.asarray(x2, dtype=float),
        np.array(times),
        np.array(p1).reshape(-1, d),
        np.array(p2).reshape(-1, d),
        bar_kappa,
        landing,
        np.array(kw),
        np.array(kd),
        np.array(betas),
        horizon,
        np.array([sup1, sup2, sup3]),
    )


# ----------------------------------------------------------------------
# the exit functional Phi(x, A) and its log-scale limit
# ----------------------------------------------------------------------

@njit(cache=True)
def _phi_kernel(rng, d, r, rho, s0, s1, s2, big_a, replicas, freeze, weights):
    # Same weight-freezing device as the gamma_e kernel: exactly unbiased
    # for exp(-∫ k), with the kill budget per replica bounded by freeze+Exp(1).
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    for i in range(replicas):
        y0, y1, y2 = s0, s1, s2
        thresh = freeze + rng.exponential(1.0)
        acc = 0.0
        alive = True
        while True:
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            if nrm >= big_a:
                break
            psi = rho * rho * _lens_nb(d, r, nrm)
            kk = lam2 * 0.5 * psi / (0.5 * lam2 - psi) if psi > 0.0 else 0.0
            hold = rng.exponential(1.0 / lam2)
            acc += kk * hold
            if acc > thresh:
                alive = False
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
        weights[i] = math.exp(-min(acc, freeze)) if alive else 0.0


def estimate_phi(
    rng: np.random.Generator,
    params: ModelParams,
    x: NDArray,
    big_a: float,
    replicas: int,
    kill_fn=None,
) -> McEstimate:
    """E_x[exp(-∫_0^{T_A} kill(Y_s) ds)] for a radial kill function.

    kill_fn=None uses the coalescence kill rate k; any other radial callable
    takes the slower generic path.  |x| >= A returns the exact value 1.
    """
    x = np.asarray(x, dtype=float)
    if float(np.linalg.norm(x)) >= big_a:
        return McEstimate(1.0, 0.0, replicas)
    if kill_fn is None:
        s = np.zeros(3)
        s[: params.d] = x
        weights = np.empty(replicas)
        _phi_kernel(rng, params.d, params.r, params.rho, s[0], s[1], s[2],
                    big_a, replicas, _WEIGHT_FREEZE, weights)
    else:
        weights = np.empty(replicas)
        lam2 = params.rate_pair
        for i in range(replicas):
            y = x.copy()
            acc = 0.0
            while float(np.linalg.norm(y)) < big_a:
                hold = float(rng.exponential(1.0 / lam2))
                acc += float(kill_fn(float(np.linalg.norm(y)))) * hold
                y = y + sample_step(rng, params)
            weights[i] = math.exp(-acc)
    st = RunningStat()
    st.add_moments(replicas, float(weights.sum()), float(np.sum(weights * weights)))
    return st.estimate()


@njit(cache=True)
def _phi_ladder_kernel(rng, d, r, rho, s0, s1, s2, a_grid, replicas, freeze, out):
    # one walk per replica, recording the exit weight at every A in the
    # increasing grid (common random paths make successive differences tight)
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    n_a = a_grid.size
    a_max = a_grid[n_a - 1]
    for i in range(replicas):
        y0, y1, y2 = s0, s1, s2
        thresh = freeze + rng.exponential(1.0)
        acc = 0.0
        j = 0
        nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
        while j < n_a and nrm >= a_grid[j]:
            out[i, j] = 1.0
            j += 1
        while j < n_a:
            psi = rho * rho * _lens_nb(d, r, nrm)
            kk = lam2 * 0.5 * psi / (0.5 * lam2 - psi) if psi > 0.0 else 0.0
            hold = rng.exponential(1.0 / lam2)
            acc += kk * hold
            if acc > thresh:
                while j < n_a:
                    out[i, j] = 0.0
                    j += 1
                break
            dx0, dx1, dx2 = _step_nb(rng, d, r)
            y0 += dx0
            y1 += dx1
            y2 += dx2
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            while j < n_a and nrm >= a_grid[j]:
                out[i, j] = math.exp(-min(acc, freeze))
                j += 1


def phi_ladder_sample(
    rng: np.random.Generator,
    params: ModelParams,
    x: NDArray,
    a_grid: NDArray,
    replicas: int,
) -> NDArray:
    """Per-replica exit weights at every A of an increasing grid.

    Column j is an unbiased sample of Phi(x, A_j); columns share the walk,
    so successive differences are estimated with strong positive coupling.
    """
    a_grid = np.asarray([float(a) for a in a_grid])
    if np.any(np.diff(a_grid) <= 0.0):
        raise ValueError("A grid must increase")
    x = np.asarray(x, dtype=float)
    s = np.zeros(3)
    s[: params.d] = x
    out = np.empty((replicas, a_grid.size))
    _phi_ladder_kernel(rng, params.d, params.r, params.rho, s[0], s[1], s[2],
                       a_grid, replicas, _WEIGHT_FREEZE, out)
    return out


def extrapolate_c_phi(
    rng: np.random.Generator,
    params: ModelParams,
    x: NDArray,
    a_grid: NDArray,
    replicas: int,
    kill_fn=None,
) -> dict:
    """log(A^2) * Phi(x, A) along an increasing A grid, with a trend flag.

    The Cauchy trend (successive differences shrinking) is reported as a
    diagnostic, never asserted.  With the default kill rate the grid shares
    walks per replica; a custom kill_fn falls back to independent estimates.
    """
    a_list = [float(a) for a in a_grid]
    if any(b <= a for a, b in zip(a_list, a_list[1:])):
        raise ValueError("A grid must increase")
    rows = []
    diffs = []
    diff_ses = []
    if kill_fn is None:
        wts = phi_ladder_sample(rng, params, x, np.asarray(a_list), replicas)
        scales = np.array([math.log(a * a) for a in a_list])
        scaled = wts * scales
        for j, big_a in enumerate(a_list):
            st = RunningStat()
            st.add_moments(replicas, float(wts[:, j].sum()), float(np.sum(wts[:, j] ** 2)))
            est = st.estimate()
            rows.append({"A": big_a, "value": scales[j] * est.mean,
                         "se": scales[j] * est.se, "phi": est.mean, "phi_se": est.se})
        for j in range(len(a_list) - 1):
            dcol = scaled[:, j + 1] - scaled[:, j]
            diffs.append(abs(float(dcol.mean())))
            diff_ses.append(float(dcol.std(ddof=1) / math.sqrt(replicas)))
    else:
        for big_a in a_list:
            est = estimate_phi(rng, params, x, big_a, replicas, kill_fn=kill_fn)
            scale = math.log(big_a * big_a)
            rows.append({"A": big_a, "value": scale * est.mean, "se": scale * est.se,
                         "phi": est.mean, "phi_se": est.se})
        diffs = [abs(rows[i + 1]["value"] - rows[i]["value"]) for i in range(len(rows) - 1)]
        diff_ses = [math.hypot(rows[i + 1]["se"], rows[i]["se"]) for i in range(len(rows) - 1)]
    shrinking = all(d2 < d1 for d1, d2 in zip(diffs, diffs[1:])) if len(diffs) >= 2 else None
    return {"rows": rows, "diffs": diffs, "diff_ses": diff_ses, "cauchy_trend": shrinking}


# ----------------------------------------------------------------------
# raw accumulators and end-state kernels for the harness
# ----------------------------------------------------------------------

def gamma_e_raw(
    rng: np.random.Generator,
    params: ModelParams,
    t_grid: NDArray,
    replicas: int,
    method: str,
) -> Tuple[NDArray, NDArray]:
    """(sum, sum of squares) per grid time; mergeable across replica chunks."""
    t_grid = np.asarray(t_grid, dtype=float)
    if method in ("direct", "exact"):
        counts = np.zeros(t_grid.size, dtype=np.int64)
        kern = _gamma_direct_kernel if method == "direct" else _gamma_exact_kernel
        kern(rng, params.d, params.r, params.rho, t_grid, replicas, counts)
        s = counts.astype(float)
        return s, s.copy()
    if method == "weighted":
        sums = np.zeros(t_grid.size)
        sumsqs = np.zeros(t_grid.size)
        _gamma_weight_kernel(rng, params.d, params.r, params.rho, t_grid, replicas,
                             sums, sumsqs, _WEIGHT_FREEZE)
        return sums, sumsqs
    raise ValueError(f"unknown method {method!r}")


@njit(cache=True, inline="always")
def _tilted_move_nb(rng, d, r, rho, tx, ty, tz):
    """Lone-move displacement under the event law.

    The event center offset p is uniform on B_r thinned by rho on the lens
    toward the partner at offset (tx, ty, tz); the parental draw adds an
    independent uniform-ball point.
    """
    while True:
        if d == 2:
            px, py = _ball2_nb(rng, r)
            pz = 0.0
        else:
            px, py, pz = _ball3_nb(rng, r)
        ex = px - tx
        ey = py - ty
        ez = pz - tz
        if ex * ex + ey * ey + ez * ez <= r * r and rng.random() < rho:
            continue
        break
    if d == 2:
        qx, qy = _ball2_nb(rng, r)
        qz = 0.0
    else:
        qx, qy, qz = _ball3_nb(rng, r)
    return px + qx, py + qy, pz + qz


@njit(cache=True)
def _pair_end_kernel(rng, d, r, rho, u0, u1, u2, horizon, replicas, out1, out2, coal,
                     tilted):
    # two-particle dual from (u, 0); end positions of both coordinates
    vol = ball_vol_nb(d, r)
    lam = rho * vol
    for i in range(replicas):
        a0, a1, a2 = u0, u1, u2
        b0, b1, b2 = 0.0, 0.0, 0.0
        t = 0.0
        co = False
        while True:
            if co:
                total = lam
            else:
                dx = a0 - b0
                dy = a1 - b1
                dz = a2 - b2
                sep = math.sqrt(dx * dx + dy * dy + dz * dz)
                lens = _lens_nb(d, r, sep)
                move = lam - rho * rho * lens
                total = 2.0 * move + rho * rho * lens
            t += rng.exponential(1.0 / total)
            if t > horizon:
                break
            if co:
                s0, s1, s2 = _step_nb(rng, d, r)
                a0 += s0
                a1 += s1
                a2 += s2
                b0, b1, b2 = a0, a1, a2
            else:
                u = rng.random() * total
                if u < move:
                    if tilted:
                        s0, s1, s2 = _tilted_move_nb(rng, d, r, rho,
                                                     b0 - a0, b1 - a1, b2 - a2)
                    else:
                        s0, s1, s2 = _step_nb(rng, d, r)
                    a0 += s0
                    a1 += s1
                    a2 += s2
                elif u < 2.0 * move:
                    if tilted:
                        s0, s1, s2 = _tilted_move_nb(rng, d, r, rho,
                                                     a0 - b0, a1 - b1, a2 - b2)
                    else:
                        s0, s1, s2 = _step_nb(rng, d, r)
                    b0 += s0
                    b1 += s1
                    b2 += s2
                else:
                    # land at U + U_lens: rejection from B_r(a) into B_r(b)
                    while True:
                        if d == 2:
                            px, py = _ball2_nb(rng, r)
                            pz = 0.0
                        else:
                            px, py, pz = _ball3_nb(rng, r)
                        lx = a0 + px
                        ly = a1 + py
                        lz = a2 + pz
                        ddx = lx - b0
                        ddy = ly - b1
                        ddz = lz - b2
                        if ddx * ddx + ddy * ddy + ddz * ddz <= r * r:
                            break
                    if d == 2:
                        qx, qy = _ball2_nb(rng, r)
                        qz = 0.0
                    else:
                        qx, qy, qz = _ball3_nb(rng, r)
                    a0 = lx + qx
                    a1 = ly + qy
                    a2 = lz + qz
                    b0, b1, b2 = a0, a1, a2
                    co = True
        out1[i, 0] = a0
        out1[i, 1] = a1
        out1[i, 2] = a2
        out2[i, 0] = b0
        out2[i, 1] = b1
        out2[i, 2] = b2
        coal[i] = 1 if co else 0


def pair_end_sample(
    rng: np.random.Generator,
    params: ModelParams,
    separation: NDArray,
    horizon: float,
    replicas: int,
    law: str = "plain",
) -> Tuple[NDArray, NDArray, NDArray]:
    """End positions of the two-particle dual started at (u, 0).

    law="event" uses the event-construction jump law (lone moves tilted
    away from the partner), the one that makes the forward duality exact;
    law="plain" gives every move the unconditioned two-ball step.
    """
    u = np.zeros(3)
    u[: params.d] = np.asarray(separation, dtype=float)
    out1 = np.empty((replicas, 3))
    out2 = np.empty((replicas, 3))
    coal = np.empty(replicas, dtype=np.uint8)
    _pair_end_kernel(rng, params.d, params.r, params.rho, u[0], u[1], u[2],
                     horizon, replicas, out1, out2, coal, _law_flag(law))
    return out1[:, : params.d], out2[:, : params.d], coal.astype(bool)


def _law_flag(law: str) -> bool:
    if law == "event":
        return True
    if law == "plain":
        return False
    raise ValueError(f"unknown pair law {law!r}")


@njit(cache=True)
def _gamma_exact_kernel(rng, d, r, rho, t_grid, replicas, counts):
    # non-coalescence counts under the event-law difference process
    vol = ball_vol_nb(d, r)
    lam2 = 2.0 * rho * vol
    n = t_grid.size
    t_max = t_grid[n - 1]
    for i in range(replicas):
        a0, a1, a2, b0, b1, b2 = _pair_start_nb(rng, d, r)
        y0, y1, y2 = a0 - b0, a1 - b1, a2 - b2
        t = 0.0
        j = 0
        while j < n:
            nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
            psi = rho * rho * _lens_nb(d, r, nrm)
            total = lam2 - psi
            t_new = t + rng.exponential(1.0 / total)
            while j < n and t_grid[j] < t_new:
                counts[j] += 1
                j += 1
            if j >= n or t_new > t_max:
                break
            t = t_new
            if psi > 0.0 and rng.random() * total < psi:
                break
            dx0, dx1, dx2 = _tilted_move_nb(rng, d, r, rho, -y0, -y1, -y2)
            y0 += dx0
            y1 += dx1
            y2 += dx2
