"""Event-driven forward simulation of the SLFV field on a bounded grid.

The continuum field is discretized to a regular grid of cell centers;
reproduction events are Poisson in space-time, thinned to the active region
(the origin-centered ball of radius support_bound + 2r, which provably
contains every event that can change the field).  Events whose update ball
carries no mass are skipped after the center draw: both dynamics branches
fix w ≡ 0 there, so the parental draws are never needed.

Two engines share one algorithm and one RNG call sequence: a pure-Python
reference (next_event / apply_event / run) and fused numba kernels used by
the experiment harness; the test suite checks they produce identical
trajectories from identical streams.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from numpy.typing import NDArray

from .geometry import ModelParams, ball_volume


class SupportOverflowError(RuntimeError):
    """The field support grew into the box safety margin."""


@dataclass(frozen=True)
class EventRecord:
    """One reproduction event: center x, parent z, sampled type alpha.

    For provable no-ops (empty update ball) the parental draws are skipped;
    z is reported as the center and alpha as 0.
    """

    t: float
    x: NDArray
    z: NDArray
    parent_value: float
    alpha: int
    noop: bool = False


@dataclass
class GridField:
    """The field w on a symmetric box [-L, L]^d with spacing h.

    Cell centers sit at -L + (i + 1/2) h; support_bound is a radius
    containing every nonzero cell center (kept conservatively, never
    shrunk below the true support).
    """

    d: int
    h: float
    half_width: float
    w: NDArray
    time: float
    support_bound: float
    block_cells: int
    occ: NDArray

    @property
    def n(self) -> int:
        return int(self.w.shape[0])

    def axis_centers(self) -> NDArray:
        return -self.half_width + (np.arange(self.n) + 0.5) * self.h

    def cell_centers(self) -> NDArray:
        axes = [self.axis_centers()] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def cell_index(self, point: NDArray) -> Optional[Tuple[int, ...]]:
        idx = np.floor((np.asarray(point) + self.half_width) / self.h).astype(int)
        if np.any(idx < 0) or np.any(idx >= self.n):
            return None
        return tuple(int(i) for i in idx)

    def total_mass(self) -> float:
        return float(self.w.sum() * self.h ** self.d)

    def recompute_support_bound(self) -> float:
        nz = np.nonzero(self.w)
        if nz[0].size == 0:
            return 0.0
        c = self.axis_centers()
        rad2 = np.zeros(nz[0].size)
        for ax in range(self.d):
            rad2 += c[nz[ax]] ** 2
        return float(np.sqrt(rad2.max()))

    def check_consistency(self) -> None:
        if np.any(self.w < 0.0) or np.any(self.w > 1.0):
            raise ValueError("field values left [0, 1]")
        if self.recompute_support_bound() > self.support_bound + 1e-12:
            raise ValueError("nonzero cell outside support_bound")

    def copy(self) -> "GridField":
        return GridField(self.d, self.h, self.half_width, self.w.copy(), self.time,
                         self.support_bound, self.block_cells, self.occ.copy())


def _rebuild_occupancy(w: NDArray, block_cells: int) -> NDArray:
    n = w.shape[0]
    nb = -(-n // block_cells)
    occ = np.zeros((nb,) * w.ndim, dtype=np.uint8)
    nz = np.nonzero(w)
    for k in range(nz[0].size):
        idx = tuple(int(nz[ax][k]) // block_cells for ax in range(w.ndim))
        occ[idx] = 1
    return occ


def init_field(
    params: ModelParams,
    box: float,
    h: float,
    w0: Callable[[NDArray], NDArray],
) -> GridField:
    """Discretize w0 at cell centers on [-box, box]^d.

    w0 must map an (m, d) array of points to values in [0, 1] and be
    supported inside the box shrunk by the 2r safety margin.
    """
    if h <= 0.0:
        raise ValueError("grid spacing h must be positive")
    if h * math.sqrt(params.d) / 2.0 >= params.r:
        raise ValueError("grid too coarse: need h*sqrt(d)/2 < r")
    n = int(round(2.0 * box / h))
    if n < 2:
        raise ValueError("box too small")
    half = n * h / 2.0
    shape = (n,) * params.d
    field = GridField(params.d, h, half, np.zeros(shape), 0.0, 0.0,
                      max(1, int(math.ceil(2.0 * params.r / h))), np.zeros(1, dtype=np.uint8))
    vals = np.asarray(w0(field.cell_centers()), dtype=float).reshape(shape)
    if np.any(vals < 0.0) or np.any(vals > 1.0):
        raise ValueError("w0 takes values outside [0, 1]")
    field.w = vals
    field.support_bound = field.recompute_support_bound()
    if field.support_bound > half - 2.0 * params.r - 2.0 * h:
        raise SupportOverflowError("initial support touches the 2r safety margin")
    field.occ = _rebuild_occupancy(field.w, field.block_cells)
    return field


# canonical initial-condition families -------------------------------------

def indicator_block(half_widths: Sequence[float], value: float = 1.0,
                    center: Optional[Sequence[float]] = None) -> Callable[[NDArray], NDArray]:
    hw = np.asarray(half_widths, dtype=float)
    c = np.zeros(hw.size) if center is None else np.asarray(center, dtype=float)

    def w0(points: NDArray) -> NDArray:
        inside = np.all(np.abs(points - c) <= hw, axis=1)
        return np.where(inside, value, 0.0)

    return w0


def indicator_ball(radius: float, value: float = 1.0,
                   center: Optional[Sequence[float]] = None) -> Callable[[NDArray], NDArray]:
    def w0(points: NDArray) -> NDArray:
        c = np.zeros(points.shape[1]) if center is None else np.asarray(center, dtype=float)
        inside = np.sum((points - c) ** 2, axis=1) <= radius * radius
        return np.where(inside, value, 0.0)

    return w0


def gaussian_bump(width: float, value: float = 1.0, truncate: float = 4.0,
                  center: Optional[Sequence[float]] = None) -> Callable[[NDArray], NDArray]:
    """value * exp(-|x-c|^2 / (2 width^2)), truncated to compact support."""

    def w0(points: NDArray) -> NDArray:
        c = np.zeros(points.shape[1]) if center is None else np.asarray(center, dtype=float)
        r2 = np.sum((points - c) ** 2, axis=1)
        out = value * np.exp(-r2 / (2.0 * width * width))
        out[r2 > (truncate * width) ** 2] = 0.0
        return out

    return w0


# ---------------------------------------------------------------------------
# python reference engine
# ---------------------------------------------------------------------------

def _active_radius(field: GridField, params: ModelParams) -> float:
    r = params.r
    R = field.support_bound + 2.0 * r
    if R > field.half_width - params.r - field.h:
        raise SupportOverflowError(
            f"active region radius {R:.3f} exceeds the box capacity; "
            f"support_bound={field.support_bound:.3f}")
    return R


def _draw_in_ball(rng: np.random.Generator, d: int, radius: float) -> NDArray:
    # square/cube rejection with scalar draws; the numba engines make the
    # identical call sequence, so trajectories agree stream-for-stream
    p = np.empty(d)
    while True:
        q = 0.0
        for k in range(d):
            p[k] = radius * (2.0 * float(rng.random()) - 1.0)
            q += p[k] * p[k]
        if q <= radius * radius:
            return p


def _ball_blocks_empty(field: GridField, center: NDArray, params: ModelParams) -> bool:
    # blocks covering the update ball inflated by one cell (covers the
    # parent-cell lookup as well); empty blocks prove the event is a no-op
    n = field.n
    bc = field.block_cells
    lo = np.floor((center - params.r - field.h + field.half_width) / field.h).astype(int)
    hi = np.floor((center + params.r + field.h + field.half_width) / field.h).astype(int)
    lo = np.clip(lo // bc, 0, np.asarray(field.occ.shape) - 1)
    hi = np.clip(hi // bc, 0, np.asarray(field.occ.shape) - 1)
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
    return not bool(np.any(field.occ[sl]))


def next_event(rng: np.random.Generator, field: GridField, params: ModelParams) -> EventRecord:
    """Draw the next reproduction event for the current field state."""
    R = _active_radius(field, params)
    rate = ball_volume(params.d, R)
    t = field.time + float(rng.exponential(1.0 / rate))
    x = _draw_in_ball(rng, params.d, R)
    if _ball_blocks_empty(field, x, params):
        return EventRecord(t, x, x.copy(), 0.0, 0, noop=True)
    z = x + _draw_in_ball(rng, params.d, params.r)
    idx = field.cell_index(z)
    parent = float(field.w[idx]) if idx is not None else 0.0
    alpha = 1 if rng.random() < parent else 0
    return EventRecord(t, x, z, parent, alpha, noop=False)


def apply_event(field: GridField, event: EventRecord, params: ModelParams) -> GridField:
    """Apply the affine update on B_r(x) and advance the field time."""
    if event.t < field.time:
        raise ValueError("event time precedes field time")
    field.time = event.t
    if event.noop:
        return field
    r, rho = params.r, params.rho
    n = field.n
    c = field.axis_centers()
    lo = np.floor((event.x - r + field.half_width) / field.h - 0.5).astype(int)
    hi = np.ceil((event.x + r + field.half_width) / field.h - 0.5).astype(int)
    lo = np.clip(lo, 0, n - 1)
    hi = np.clip(hi, 0, n - 1)
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
    axes = np.meshgrid(*[c[s] for s in sl], indexing="ij")
    dist2 = sum((ax - xc) ** 2 for ax, xc in zip(axes, event.x))
    inside = dist2 <= r * r
    sub = field.w[sl]
    sub[inside] = (1.0 - rho) * sub[inside] + rho * event.alpha
    field.w[sl] = sub
    bc = field.block_cells
    blo = tuple(int(a) // bc for a in lo)
    bhi = tuple(int(b) // bc for b in hi)
    bsl = tuple(slice(a, b + 1) for a, b in zip(blo, bhi))
    if event.alpha == 1:
        field.occ[bsl] = 1
        field.support_bound = max(field.support_bound, float(np.linalg.norm(event.x)) + r)
    elif rho == 1.0:
        for bidx in np.ndindex(tuple(b - a + 1 for a, b in zip(blo, bhi))):
            bfull = tuple(a + i for a, i in zip(blo, bidx))
            cells = tuple(slice(b * bc, min((b + 1) * bc, n)) for b in bfull)
            field.occ[bfull] = 1 if np.any(field.w[cells]) else 0
    return field


@dataclass
class RunStats:
    events: int
    noops: int
    time: float
    sample_times: NDArray
    sample_mass: NDArray


def run(
    rng: np.random.Generator,
    field: GridField,
    params: ModelParams,
    horizon: float,
    observers: Sequence[Callable[[GridField, EventRecord], None]] = (),
    sample_times: Sequence[float] = (),
) -> RunStats:
    """Reference event loop: next_event/apply_event until the horizon."""
    sample_times = np.asarray(sorted(sample_times), dtype=float)
    sample_mass = np.empty(sample_times.size)
    si = 0
    end = field.time + horizon
    events = noops = 0
    while True:
        ev = next_event(rng, field, params)
        while si < sample_times.size and sample_times[si] <= min(ev.t, end):
            sample_mass[si] = field.total_mass()
            si += 1
        if ev.t > end:
            field.time = end
            break
        apply_event(field, ev, params)
        if ev.noop:
            noops += 1
        else:
            events += 1
        for obs in observers:
            obs(field, ev)
    return RunStats(events, noops, field.time, sample_times, sample_mass)


def observe_XN(field: GridField, N: float, phi) -> float:
    """The rescaled empirical measure X^N(phi) read off the unscaled field.

    X^N_t(phi) = (K'/N) * sum_cells w(y) phi(y / sqrt(N)) h^d with
    K' = log N in d=2 and K' = 1 in d >= 3 (N=1 means no scaling).
    """
    pts = field.cell_centers() / math.sqrt(N)
    vals = phi.values(pts) if hasattr(phi, "values") else np.asarray(phi(pts), dtype=float)
    kp = math.log(N) if field.d == 2 else 1.0
    if N == 1:
        kp = 1.0
    raw = float(np.sum(field.w.ravel() * vals) * field.h ** field.d)
    return kp / N * raw


# ---------------------------------------------------------------------------
# fused numba engines
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _blocks_empty_d2(occ, bc, nb0, nb1, h, L, cx, cy, r):
    i0 = int(math.floor((cx - r - h + L) / h)) // bc
    i1 = int(math.floor((cx + r + h + L) / h)) // bc
    j0 = int(math.floor((cy - r - h + L) / h)) // bc
    j1 = int(math.floor((cy + r + h + L) / h)) // bc
    i0 = min(max(i0, 0), nb0 - 1)
    i1 = min(max(i1, 0), nb0 - 1)
    j0 = min(max(j0, 0), nb1 - 1)
    j1 = min(max(j1, 0), nb1 - 1)
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            if occ[i, j]:
                return False
    return True


@njit(cache=True)
def _run_basic_d2(rng, w, occ, bc, h, L, r, rho, t0, bound0, horizon,
                  phi, obs_u, out, res):
    # res: [mass, xphi, maxdxphi, maxcnt, events, noops, status, t_end, bound]
    n = w.shape[0]
    nb0 = occ.shape[0]
    nb1 = occ.shape[1]
    om = 1.0 - rho
    h2 = h * h
    t = t0
    bound = bound0
    mass = res[0]
    xphi = res[1]
    maxdx = 0.0
    maxcnt = 0.0
    events = 0.0
    noops = 0.0
    status = 0.0
    iobs = 0
    nobs = obs_u.size
    while True:
        R = bound + 2.0 * r
        if R > L - r - h:
            status = 1.0
            break
        rate = math.pi * R * R
        t_next = t + rng.exponential(1.0 / rate)
        while iobs < nobs and obs_u[iobs] <= t_next and obs_u[iobs] <= horizon:
            out[iobs, 0] = mass
            out[iobs, 1] = xphi
            iobs += 1
        if t_next > horizon:
            t = horizon
            break
        t = t_next
        while True:
            cx = R * (2.0 * rng.random() - 1.0)
            cy = R * (2.0 * rng.random() - 1.0)
            if cx * cx + cy * cy <= R * R:
                break
        if _blocks_empty_d2(occ, bc, nb0, nb1, h, L, cx, cy, r):
            noops += 1.0
            continue
        while True:
            zx = r * (2.0 * rng.random() - 1.0)
            zy = r * (2.0 * rng.random() - 1.0)
            if zx * zx + zy * zy <= r * r:
                break
        zx += cx
        zy += cy
        parent = 0.0
        iz = int(math.floor((zx + L) / h))
        jz = int(math.floor((zy + L) / h))
        if 0 <= iz < n and 0 <= jz < n:
            parent = w[iz, jz]
        alpha = 1.0 if rng.random() < parent else 0.0
        ra = rho * alpha
        i_lo = max(int(math.ceil((cx - r + L) / h - 0.5)), 0)
        i_hi = min(int(math.floor((cx + r + L) / h - 0.5)), n - 1)
        j_lo = max(int(math.ceil((cy - r + L) / h - 0.5)), 0)
        j_hi = min(int(math.floor((cy + r + L) / h - 0.5)), n - 1)
        dxphi = 0.0
        cnt = 0.0
        for i in range(i_lo, i_hi + 1):
            ci = -L + (i + 0.5) * h
            dx2 = (ci - cx) * (ci - cx)
            for j in range(j_lo, j_hi + 1):
                cj = -L + (j + 0.5) * h
                if dx2 + (cj - cy) * (cj - cy) <= r * r:
                    cnt += 1.0
                    old = w[i, j]
                    new = om * old + ra
                    dw = new - old
                    if dw != 0.0:
                        w[i, j] = new
                        dm = dw * h2
                        mass += dm
                        dxphi += phi[i, j] * dm
        xphi += dxphi
        if abs(dxphi) > maxdx:
            maxdx = abs(dxphi)
        if cnt > maxcnt:
            maxcnt = cnt
        events += 1.0
        if alpha == 1.0:
            dist = math.sqrt(cx * cx + cy * cy) + r
            if dist > bound:
                bound = dist
            for bi in range(i_lo // bc, i_hi // bc + 1):
                for bj in range(j_lo // bc, j_hi // bc + 1):
                    occ[bi, bj] = 1
        elif rho == 1.0:
            for bi in range(i_lo // bc, i_hi // bc + 1):
                for bj in range(j_lo // bc, j_hi // bc + 1):
                    any_nz = False
                    for i in range(bi * bc, min((bi + 1) * bc, n)):
                        for j in range(bj * bc, min((bj + 1) * bc, n)):
                            if w[i, j] != 0.0:
                                any_nz = True
                                break
                        if any_nz:
                            break
                    occ[bi, bj] = 1 if any_nz else 0
    res[0] = mass
    res[1] = xphi
    res[2] = maxdx
    res[3] = maxcnt
    res[4] = events
    res[5] = noops
    res[6] = status
    res[7] = t
    res[8] = bound


@njit(cache=True, inline="always")
def _blocks_empty_d3(occ, bc, nb, h, L, cx, cy, cz, r):
    i0 = min(max(int(math.floor((cx - r - h + L) / h)) // bc, 0), nb - 1)
    i1 = min(max(int(math.floor((cx + r + h + L) / h)) // bc, 0), nb - 1)
    j0 = min(max(int(math.floor((cy - r - h + L) / h)) // bc, 0), nb - 1)
    j1 = min(max(int(math.floor((cy + r + h + L) / h)) // bc, 0), nb - 1)
    k0 = min(max(int(math.floor((cz - r - h + L) / h)) // bc, 0), nb - 1)
    k1 = min(max(int(math.floor((cz + r + h + L) / h)) // bc, 0), nb - 1)
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            for k in range(k0, k1 + 1):
                if occ[i, j, k]:
                    return False
    return True


@njit(cache=True)
def _run_basic_d3(rng, w, occ, bc, h, L, r, rho, t0, bound0, horizon,
                  phi, obs_u, out, res):
    n = w.shape[0]
    nb = occ.shape[0]
    om = 1.0 - rho
    h3 = h * h * h
    t = t0
    bound = bound0
    mass = res[0]
    xphi = res[1]
    maxdx = 0.0
    maxcnt = 0.0
    events = 0.0
    noops = 0.0
    status = 0.0
    iobs = 0
    nobs = obs_u.size
    while True:
        R = bound + 2.0 * r
        if R > L - r - h:
            status = 1.0
            break
        rate = 4.0 * math.pi * R * R * R / 3.0
        t_next = t + rng.exponential(1.0 / rate)
        while iobs < nobs and obs_u[iobs] <= t_next and obs_u[iobs] <= horizon:
            out[iobs, 0] = mass
            out[iobs, 1] = xphi
            iobs += 1
        if t_next > horizon:
            t = horizon
            break
        t = t_next
        while True:
            cx = R * (2.0 * rng.random() - 1.0)
            cy = R * (2.0 * rng.random() - 1.0)
            cz = R * (2.0 * rng.random() - 1.0)
            if cx * cx + cy * cy + cz * cz <= R * R:
                break
        if _blocks_empty_d3(occ, bc, nb, h, L, cx, cy, cz, r):
            noops += 1.0
            continue
        while True:
            zx = r * (2.0 * rng.random() - 1.0)
            zy = r * (2.0 * rng.random() - 1.0)
            zz = r * (2.0 * rng.random() - 1.0)
            if zx * zx + zy * zy + zz * zz <= r * r:
                break
        zx += cx
        zy += cy
        zz += cz
        parent = 0.0
        iz = int(math.floor((zx + L) / h))
        jz = int(math.floor((zy + L) / h))
        kz = int(math.floor((zz + L) / h))
        if 0 <= iz < n and 0 <= jz < n and 0 <= kz < n:
            parent = w[iz, jz, kz]
        alpha = 1.0 if rng.random() < parent else 0.0
        ra = rho * alpha
        i_lo = max(int(math.ceil((cx - r + L) / h - 0.5)), 0)
        i_hi = min(int(math.floor((cx + r + L) / h - 0.5)), n - 1)
        j_lo = max(int(math.ceil((cy - r + L) / h - 0.5)), 0)
        j_hi = min(int(math.floor((cy + r + L) / h - 0.5)), n - 1)
        k_lo = max(int(math.ceil((cz - r + L) / h - 0.5)), 0)
        k_hi = min(int(math.floor((cz + r + L) / h - 0.5)), n - 1)
        dxphi = 0.0
        cnt = 0.0
        for i in range(i_lo, i_hi + 1):
            ci = -L + (i + 0.5) * h
            dx2 = (ci - cx) * (ci - cx)
            for j in range(j_lo, j_hi + 1):
                cj = -L + (j + 0.5) * h
                dy2 = (cj - cy) * (cj - cy)
                for k in range(k_lo, k_hi + 1):
                    ck = -L + (k + 0.5) * h
                    if dx2 + dy2 + (ck - cz) * (ck - cz) <= r * r:
                        cnt += 1.0
                        old = w[i, j, k]
                        new = om * old + ra
                        dw = new - old
                        if dw != 0.0:
                            w[i, j, k] = new
                            dm = dw * h3
                            mass += dm
                            dxphi += phi[i, j, k] * dm
        xphi += dxphi
        if abs(dxphi) > maxdx:
            maxdx = abs(dxphi)
        if cnt > maxcnt:
            maxcnt = cnt
        events += 1.0
        if alpha == 1.0:
            dist = math.sqrt(cx * cx + cy * cy + cz * cz) + r
            if dist > bound:
                bound = dist
            for bi in range(i_lo // bc, i_hi // bc + 1):
                for bj in range(j_lo // bc, j_hi // bc + 1):
                    for bk in range(k_lo // bc, k_hi // bc + 1):
                        occ[bi, bj, bk] = 1
        elif rho == 1.0:
            for bi in range(i_lo // bc, i_hi // bc + 1):
                for bj in range(j_lo // bc, j_hi // bc + 1):
                    for bk in range(k_lo // bc, k_hi // bc + 1):
                        any_nz = False
                        for i in range(bi * bc, min((bi + 1) * bc, n)):
                            for j in range(bj * bc, min((bj + 1) * bc, n)):
                                for k in range(bk * bc, min((bk + 1) * bc, n)):
                                    if w[i, j, k] != 0.0:
                                        any_nz = True
                                        break
                                if any_nz:
                                    break
                            if any_nz:
                                break
                        occ[bi, bj, bk] = 1 if any_nz else 0
    res[0] = mass
    res[1] = xphi
    res[2] = maxdx
    res[3] = maxcnt
    res[4] = events
    res[5] = noops
    res[6] = status
    res[7] = t
    res[8] = bound


@njit(cache=True)
def _run_tracked_d2(rng, w, occ, bc, h, L, r, rho, t0, bound0, horizon,
                    phi, PHI, S, PSI, offs, V, obs_u, out,
                    win0, win1, ev_out, res):
    # res in/out: [mass, xphi, xphi2, sig_d, sig_m, sig_mbar,
    #              D_raw, BR_raw, XP2_raw, maxdxphi, maxcnt,
    #              events, noops, status, t_end, bound, n_win]
    n = w.shape[0]
    nb0 = occ.shape[0]
    nb1 = occ.shape[1]
    om = 1.0 - rho
    h2 = h * h
    t = t0
    bound = bound0
    mass = res[0]
    xphi = res[1]
    xphi2 = res[2]
    sig_d = res[3]
    sig_m = res[4]
    sig_mbar = res[5]
    d_raw = res[6]
    br_raw = res[7]
    xp2_raw = res[8]
    maxdx = 0.0
    maxcnt = 0.0
    events = 0.0
    noops = 0.0
    status = 0.0
    n_win = 0
    cap_win = ev_out.shape[0]
    iobs = 0
    nobs = obs_u.size
    nofs = offs.shape[0]
    while True:
        R = bound + 2.0 * r
        if R > L - r - h:
            status = 1.0
            break
        rate = math.pi * R * R
        t_next = t + rng.exponential(1.0 / rate)
        while iobs < nobs and obs_u[iobs] <= t_next and obs_u[iobs] <= horizon:
            ddt = obs_u[iobs] - t
            d_raw += sig_d * ddt
            br_raw += sig_m * ddt
            xp2_raw += xphi2 * ddt
            t = obs_u[iobs]
            out[iobs, 0] = mass
            out[iobs, 1] = xphi
            out[iobs, 2] = xphi2
            out[iobs, 3] = d_raw
            out[iobs, 4] = br_raw
            out[iobs, 5] = xp2_raw
            out[iobs, 6] = sig_m
            out[iobs, 7] = sig_mbar
            out[iobs, 8] = sig_d
            iobs += 1
        if t_next > horizon:
            ddt = horizon - t
            d_raw += sig_d * ddt
            br_raw += sig_m * ddt
            xp2_raw += xphi2 * ddt
            t = horizon
            break
        ddt = t_next - t
        d_raw += sig_d * ddt
        br_raw += sig_m * ddt
        xp2_raw += xphi2 * ddt
        t = t_next
        while True:
            cx = R * (2.0 * rng.random() - 1.0)
            cy = R * (2.0 * rng.random() - 1.0)
            if cx * cx + cy * cy <= R * R:
                break
        if _blocks_empty_d2(occ, bc, nb0, nb1, h, L, cx, cy, r):
            noops += 1.0
            continue
        while True:
            zx = r * (2.0 * rng.random() - 1.0)
            zy = r * (2.0 * rng.random() - 1.0)
            if zx * zx + zy * zy <= r * r:
                break
        zx += cx
        zy += cy
        parent = 0.0
        iz = int(math.floor((zx + L) / h))
        jz = int(math.floor((zy + L) / h))
        if 0 <= iz < n and 0 <= jz < n:
            parent = w[iz, jz]
        alpha = 1.0 if rng.random() < parent else 0.0
        ra = rho * alpha
        i_lo = max(int(math.ceil((cx - r + L) / h - 0.5)), 0)
        i_hi = min(int(math.floor((cx + r + L) / h - 0.5)), n - 1)
        j_lo = max(int(math.ceil((cy - r + L) / h - 0.5)), 0)
        j_hi = min(int(math.floor((cy + r + L) / h - 0.5)), n - 1)
        dxphi = 0.0
        cnt = 0.0
        for i in range(i_lo, i_hi + 1):
            ci = -L + (i + 0.5) * h
            dx2 = (ci - cx) * (ci - cx)
            for j in range(j_lo, j_hi + 1):
                cj = -L + (j + 0.5) * h
                if dx2 + (cj - cy) * (cj - cy) > r * r:
                    continue
                cnt += 1.0
                old = w[i, j]
                new = om * old + ra
                dw = new - old
                if dw == 0.0:
                    continue
                w[i, j] = new
                dm = dw * h2
                pij = phi[i, j]
                mass += dm
                dxphi += pij * dm
                xphi2 += pij * pij * dm
                for q in range(nofs):
                    a = i + offs[q, 0]
                    b = j + offs[q, 1]
                    if a < 0 or a >= n or b < 0 or b >= n:
                        continue
                    s_old = S[a, b]
                    p_old = PSI[a, b]
                    phf = PHI[a, b]
                    pa = phi[a, b]
                    sig_m -= ((V - s_old) * p_old * p_old
                              + s_old * (phf - p_old) * (phf - p_old)) * h2
                    sig_mbar -= pa * pa * s_old * (V - s_old) * h2
                    s_new = s_old + dm
                    p_new = p_old + pij * dm
                    S[a, b] = s_new
                    PSI[a, b] = p_new
                    sig_d += (dm * phf - V * pij * dm) * h2
                    sig_m += ((V - s_new) * p_new * p_new
                              + s_new * (phf - p_new) * (phf - p_new)) * h2
                    sig_mbar += pa * pa * s_new * (V - s_new) * h2
        xphi += dxphi
        if abs(dxphi) > maxdx:
            maxdx = abs(dxphi)
        if cnt > maxcnt:
            maxcnt = cnt
        events += 1.0
        if alpha == 1.0:
            dist = math.sqrt(cx * cx + cy * cy) + r
            if dist > bound:
                bound = dist
            for bi in range(i_lo // bc, i_hi // bc + 1):
                for bj in range(j_lo // bc, j_hi // bc + 1):
                    occ[bi, bj] = 1
        elif rho == 1.0:
            for bi in range(i_lo // bc, i_hi // bc + 1):
                for bj in range(j_lo // bc, j_hi // bc + 1):
                    any_nz = False
                    for i in range(bi * bc, min((bi + 1) * bc, n)):
                        for j in range(bj * bc, min((bj + 1) * bc, n)):
                            if w[i, j] != 0.0:
                                any_nz = True
                                break
                        if any_nz:
                            break
                    occ[bi, bj] = 1 if any_nz else 0
        if win0 <= t <= win1 and n_win < cap_win:
            ev_out[n_win, 0] = t
            ev_out[n_win, 1] = xphi
            ev_out[n_win, 2] = d_raw
            ev_out[n_win, 3] = br_raw
            ev_out[n_win, 4] = xp2_raw
            n_win += 1
    res[0] = mass
    res[1] = xphi
    res[2] = xphi2
    res[3] = sig_d
    res[4] = sig_m
    res[5] = sig_mbar
    res[6] = d_raw
    res[7] = br_raw
    res[8] = xp2_raw
    res[9] = maxdx
    res[10] = maxcnt
    res[11] = events
    res[12] = noops
    res[13] = status
    res[14] = t
    res[15] = bound
    res[16] = n_win


# ---------------------------------------------------------------------------
# engine wrappers
# ---------------------------------------------------------------------------

def ball_stencil(d: int, h: float, r: float) -> NDArray:
    """Integer cell offsets whose centers lie within r: the grid ball."""
    m = int(math.floor(r / h))
    rng1 = np.arange(-m, m + 1)
    mesh = np.meshgrid(*([rng1] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    keep = np.sum((pts * h) ** 2, axis=1) <= r * r
    return pts[keep].astype(np.int64)


def discrete_ball_volume(d: int, h: float, r: float) -> float:
    return float(ball_stencil(d, h, r).shape[0]) * h ** d


def _ball_convolve(arr: NDArray, offs: NDArray, h: float) -> NDArray:
    """Sum of arr over the grid ball around each cell, times h^d."""
    from scipy.ndimage import convolve

    d = arr.ndim
    m = int(np.max(np.abs(offs)))
    kshape = (2 * m + 1,) * d
    kernel = np.zeros(kshape)
    for q in range(offs.shape[0]):
        kernel[tuple(int(o) + m for o in offs[q])] = 1.0
    return convolve(arr, kernel, mode="constant", cval=0.0) * h ** d


@dataclass
class BasicTrajectory:
    """Raw output of the basic engine at the requested unscaled times."""

    obs_times: NDArray
    mass: NDArray
    xphi_raw: NDArray
    max_dxphi: float
    max_cells: int
    events: int
    noops: int
    t_end: float
    support_bound: float


def run_fast(
    rng: np.random.Generator,
    field: GridField,
    params: ModelParams,
    horizon: float,
    phi_cell: Optional[NDArray] = None,
    obs_times: Sequence[float] = (),
) -> BasicTrajectory:
    """Fused event loop tracking total mass and one field functional."""
    obs_u = np.asarray(sorted(obs_times), dtype=float)
    if obs_u.size and obs_u[-1] > horizon:
        raise ValueError("observation times beyond horizon")
    if phi_cell is None:
        phi_cell = np.ones_like(field.w)
    out = np.zeros((obs_u.size, 2))
    res = np.zeros(9)
    hd = field.h ** params.d
    res[0] = field.total_mass()
    res[1] = float(np.sum(field.w * phi_cell) * hd)
    kern = _run_basic_d2 if params.d == 2 else _run_basic_d3
    kern(rng, field.w, field.occ, field.block_cells, field.h, field.half_width,
         params.r, params.rho, field.time, field.support_bound, field.time + horizon,
         phi_cell, obs_u + field.time, out, res)
    if res[6] != 0.0:
        raise SupportOverflowError(
            f"support overflow at t={res[7]:.4f} after {int(res[4])} events")
    field.time = res[7]
    field.support_bound = res[8]
    return BasicTrajectory(obs_u, out[:, 0].copy(), out[:, 1].copy(),
                           float(res[2]), int(res[3]), int(res[4]), int(res[5]),
                           float(res[7]), float(res[8]))


@dataclass
class TrackedTrajectory:
    """Raw output of the functional-tracking engine (unscaled clocks).

    Columns of obs rows: mass, xphi, xphi2, D_raw, BR_raw, XP2_raw, sig_m,
    sig_mbar, sig_d; the drift/bracket coefficients are applied downstream.
    """

    obs_times: NDArray
    rows: NDArray
    window_rows: NDArray
    v_disc: float
    max_dxphi: float
    max_cells: int
    events: int
    noops: int
    t_end: float
    support_bound: float
    x0_mass: float
    x0_xphi: float
    x0_xphi2: float


def run_tracked(
    rng: np.random.Generator,
    field: GridField,
    params: ModelParams,
    horizon: float,
    phi_cell: NDArray,
    obs_times: Sequence[float],
    window: Optional[Tuple[float, float]] = None,
    window_cap: int = 8192,
) -> TrackedTrajectory:
    """Event loop with online drift/square-function accumulation (d=2)."""
    if params.d != 2:
        raise ValueError("functional tracking is implemented for d=2 runs")
    obs_u = np.asarray(sorted(obs_times), dtype=float)
    if obs_u.size and obs_u[-1] > horizon:
        raise ValueError("observation times beyond horizon")
    offs = ball_stencil(2, field.h, params.r)
    v_disc = discrete_ball_volume(2, field.h, params.r)
    h2 = field.h ** 2
    S = _ball_convolve(field.w, offs, field.h)
    PSI = _ball_convolve(field.w * phi_cell, offs, field.h)
    PHI = _ball_convolve(phi_cell, offs, field.h)
    res = np.zeros(17)
    res[0] = field.total_mass()
    res[1] = float(np.sum(field.w * phi_cell) * h2)
    res[2] = float(np.sum(field.w * phi_cell ** 2) * h2)
    res[3] = float(np.sum((S * PHI - v_disc * PSI)) * h2)
    res[4] = float(np.sum((v_disc - S) * PSI ** 2 + S * (PHI - PSI) ** 2) * h2)
    res[5] = float(np.sum(phi_cell ** 2 * S * (v_disc - S)) * h2)
    out = np.zeros((obs_u.size, 9))
    if window is None:
        win0, win1 = 1.0, 0.0
        ev_out = np.zeros((1, 5))
    else:
        win0, win1 = float(window[0]), float(window[1])
        ev_out = np.zeros((window_cap, 5))
    x0_mass, x0_xphi, x0_xphi2 = float(res[0]), float(res[1]), float(res[2])
    _run_tracked_d2(rng, field.w, field.occ, field.block_cells, field.h,
                    field.half_width, params.r, params.rho, field.time,
                    field.support_bound, field.time + horizon,
                    phi_cell, PHI, S, PSI, offs, v_disc,
                    obs_u + field.time, out, win0, win1, ev_out, res)
    if res[13] != 0.0:
        raise SupportOverflowError(
            f"support overflow at t={res[14]:.4f} after {int(res[11])} events")
    field.time = res[14]
    field.support_bound = res[15]
    return TrackedTrajectory(obs_u, out, ev_out[: int(res[16])].copy(), v_disc,
                             float(res[9]), int(res[10]), int(res[11]), int(res[12]),
                             float(res[14]), float(res[15]),
                             x0_mass, x0_xphi, x0_xphi2)
