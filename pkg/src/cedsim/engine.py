"""Exact continuous-time kinetic Monte Carlo driver for the lattice gas.

The process has three homogeneous event classes (hop at rate 1 per particle,
evaporate at rate p per particle, deposit at rate q per site), so each jump
is sampled exactly in O(1): an exponential holding time at the total rate
N*(1+p) + S*q, a class draw, and a uniform draw within the class.  No
approximation (tau-leaping etc.) is involved anywhere.

Statistics are integrated against holding times while the trajectory runs,
using per-site last-touch timestamps so the per-mass histogram costs O(1)
per event instead of O(occupied sites).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .model import (
    DEPOSIT,
    EVAPORATE,
    HOP,
    MASS_LIMIT,
    Event,
    Geometry,
    LatticeState,
    MassOverflowError,
    Params,
    neighbor_table,
    new_lattice,
    total_rate,
)
from .stats import StatAccumulator, merge_accumulators

_MASK64 = (1 << 64) - 1
_RNG_BLOCK = 3 * 4096  # uniforms are consumed three per event


def mix_seed(seed: int, k: int) -> int:
    """Derived seed for replica k: a SplitMix64 finalizer over seed and k.

    Replica 0 keeps the master seed unchanged, so a single-replica ensemble
    reproduces a plain run exactly; higher replicas get well-separated
    streams from the 64-bit avalanche.
    """
    if k == 0:
        return seed & _MASK64
    z = (seed + k * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass
class EventSample:
    """One sampled transition and its exponential waiting time."""

    event: Event
    dt: float


@dataclass
class RecordHook:
    """Observer callback.

    period == 0.0: fn(state, weight) fires for every holding interval whose
    recorded (post-burn-in, clipped) weight is positive -- the exact stream a
    time-weighted accumulator needs.  period > 0.0: fn(state, t) fires at
    each crossing of a multiple of the period.
    """

    fn: Callable
    period: float = 0.0


@dataclass
class EngineConfig:
    geom: Geometry
    params: Params
    t_end: float
    seed: int
    max_events: int | None = None
    burn_in: float | None = None  # absolute; default burn_in_fraction * t_end
    burn_in_fraction: float = 0.5
    series_samples: int = 1024  # 0 disables the total-mass time series
    hooks: tuple[RecordHook, ...] = ()
    initial_state: LatticeState | None = None
    trace: bool = False

    def __post_init__(self):
        if not self.t_end > 0.0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if not (0.0 <= self.burn_in_fraction < 1.0):
            raise ValueError("burn_in_fraction must lie in [0, 1)")
        if self.burn_in is not None and not (0.0 <= self.burn_in < self.t_end):
            raise ValueError("burn_in must lie in [0, t_end)")

    @property
    def burn_in_time(self) -> float:
        if self.burn_in is not None:
            return self.burn_in
        return self.burn_in_fraction * self.t_end


@dataclass
class RunStats:
    seed: int
    n_events: int = 0
    n_hops: int = 0
    n_evaporations: int = 0
    n_deposits: int = 0
    n_coalescences: int = 0
    t_final: float = 0.0
    final_total_mass: int = 0
    final_particle_count: int = 0
    absorbed: bool = False
    absorption_time: float | None = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "events": self.n_events,
            "hops": self.n_hops,
            "evaporations": self.n_evaporations,
            "deposits": self.n_deposits,
            "coalescences": self.n_coalescences,
            "t_final": self.t_final,
            "final_total_mass": self.final_total_mass,
            "final_particle_count": self.final_particle_count,
            "absorbed": self.absorbed,
            "absorption_time": self.absorption_time,
        }


@dataclass
class RunResult:
    state: LatticeState
    stats: RunStats
    acc: StatAccumulator
    trace: list[EventSample] = field(default_factory=list)


def step(state: LatticeState, params: Params, rng: np.random.Generator):
    """Sample (but do not apply) the next transition; None when absorbed.

    The holding time is Exponential(R) with R = N*(1+p) + S*q; the event
    class is chosen with probabilities N/R, N*p/R, S*q/R, and the target is
    uniform within its class (particle and neighbour slot jointly uniform
    for hops).
    """
    R = total_rate(state, params)
    if R <= 0.0:
        return None
    u0 = rng.random()
    if u0 <= 0.0:
        u0 = 1e-300
    dt = -math.log(u0) / R
    n = len(state.occupied)
    two_d = state.geom.n_directions
    v = rng.random() * R
    u2 = rng.random()
    if v < n:
        cells = n * two_d
        idx = int(u2 * cells)
        if idx >= cells:
            idx = cells - 1
        ev = Event(HOP, state.occupied[idx // two_d], idx % two_d)
    elif v < n * (1.0 + params.p):
        idx = int(u2 * n)
        if idx >= n:
            idx = n - 1
        ev = Event(EVAPORATE, state.occupied[idx])
    else:
        sites = state.geom.n_sites
        idx = int(u2 * sites)
        if idx >= sites:
            idx = sites - 1
        ev = Event(DEPOSIT, idx)
    return EventSample(ev, dt)


def run(config: EngineConfig) -> RunResult:
    """Simulate one trajectory to t_end (or the event cap / absorption).

    Fully deterministic given (seed, config).  Returns the final state, the
    event bookkeeping, and a StatAccumulator of exact time-weighted
    observables collected after the burn-in period.
    """
    geom = config.geom
    params = config.params
    S = geom.n_sites
    two_d = geom.n_directions
    p = params.p
    q = params.q
    pp1 = 1.0 + p
    Sq = S * q
    t_end = config.t_end
    burn = config.burn_in_time
    max_events = config.max_events if config.max_events is not None else -1

    state = config.initial_state.copy() if config.initial_state else new_lattice(geom)
    mass = state.mass
    occ = state.occupied
    slot = state.slot_of
    nbr_rows = neighbor_table(geom)
    nbr = [t for row in nbr_rows for t in row]  # flat: nbr[site*2d + dir]
    N = len(occ)
    M = state.total_mass

    rng = np.random.Generator(np.random.PCG64(config.seed))
    block = rng.random(_RNG_BLOCK).tolist()
    bi = 0

    # per-site last-touch timestamps; a site's mass contributes to the
    # histogram only for the stretch of time it sits unchanged after burn-in
    site_last = [burn] * S
    site_int = [0.0] * S
    hist = [0.0] * 64
    hist_len = 64
    mass_T = 0.0
    count_T = 0.0

    n_series = config.series_samples
    period = t_end / n_series if n_series > 0 else math.inf
    next_s = period
    series: list[float] = []

    interval_hooks = [h.fn for h in config.hooks if h.period == 0.0]
    sample_hooks = [[h.period, h.period, h.fn] for h in config.hooks if h.period > 0.0]

    trace: list[EventSample] = []
    do_trace = config.trace

    stats = RunStats(seed=config.seed)
    n_events = n_hops = n_evap = n_dep = n_coal = 0
    absorbed = False
    absorption_time = None

    log = math.log
    t = 0.0

    while True:
        R = N * pp1 + Sq
        if R <= 0.0:
            absorbed = True
            absorption_time = t
            while len(series) < n_series:
                series.append(float(M))
            t = t_end
            break

        if bi >= _RNG_BLOCK:
            block = rng.random(_RNG_BLOCK).tolist()
            bi = 0
        u0 = block[bi]
        u1 = block[bi + 1]
        u2 = block[bi + 2]
        bi += 3
        if u0 <= 0.0:
            u0 = 1e-300
        dt = -log(u0) / R
        t_next = t + dt

        # time-weighted scalars for the state being left
        if t_next > burn:
            hi = t_next if t_next < t_end else t_end
            lo = t if t > burn else burn
            w = hi - lo
            if w > 0.0:
                mass_T += M * w
                count_T += N * w
                if interval_hooks:
                    state.total_mass = M
                    for fn in interval_hooks:
                        fn(state, w)

        if next_s <= t_next:
            while next_s <= t_next and len(series) < n_series:
                series.append(float(M))
                next_s += period
        if sample_hooks:
            state.total_mass = M
            for h in sample_hooks:
                while h[0] <= t_next and h[0] <= t_end:
                    h[2](state, h[0])
                    h[0] += h[1]

        tau = 0.0
        if t_next > burn:
            tau = t_next if t_next < t_end else t_end

        v = u1 * R
        if v < N:
            # hop: particle and neighbour slot from one joint uniform
            cells = N * two_d
            idx = int(u2 * cells)
            if idx >= cells:
                idx = cells - 1
            pi = idx // two_d
            dr = idx - pi * two_d
            src = occ[pi]
            tgt = nbr[src * two_d + dr]
            n_hops += 1
            if do_trace:
                trace.append(EventSample(Event(HOP, src, dr), dt))
            if tgt != src:
                m = mass[src]
                mt = mass[tgt]
                if tau > 0.0:
                    last = site_last[src]
                    if tau > last:
                        wx = tau - last
                        if m >= hist_len:
                            hist.extend([0.0] * (max(m + 1, 2 * hist_len) - hist_len))
                            hist_len = len(hist)
                        hist[m] += wx
                        site_int[src] += m * wx
                    site_last[src] = tau
                    last = site_last[tgt]
                    if tau > last:
                        wx = tau - last
                        if mt >= hist_len:
                            hist.extend([0.0] * (max(mt + 1, 2 * hist_len) - hist_len))
                            hist_len = len(hist)
                        hist[mt] += wx
                        site_int[tgt] += mt * wx
                    site_last[tgt] = tau
                if mt > 0:
                    merged = mt + m
                    if merged > MASS_LIMIT:
                        raise MassOverflowError(
                            f"coalescence at site {tgt} would produce mass "
                            f"{merged} (t={t_next:.6g}, event {n_events + 1})"
                        )
                    mass[tgt] = merged
                    mass[src] = 0
                    i = slot[src]
                    last_site = occ.pop()
                    if last_site != src:
                        occ[i] = last_site
                        slot[last_site] = i
                    slot[src] = -1
                    N -= 1
                    n_coal += 1
                else:
                    mass[tgt] = m
                    mass[src] = 0
                    i = slot[src]
                    occ[i] = tgt
                    slot[tgt] = i
                    slot[src] = -1
        elif v < N * pp1:
            idx = int(u2 * N)
            if idx >= N:
                idx = N - 1
            site = occ[idx]
            m = mass[site]
            n_evap += 1
            if do_trace:
                trace.append(EventSample(Event(EVAPORATE, site), dt))
            if tau > 0.0:
                last = site_last[site]
                if tau > last:
                    wx = tau - last
                    if m >= hist_len:
                        hist.extend([0.0] * (max(m + 1, 2 * hist_len) - hist_len))
                        hist_len = len(hist)
                    hist[m] += wx
                    site_int[site] += m * wx
                site_last[site] = tau
            mass[site] = m - 1
            M -= 1
            if m == 1:
                i = slot[site]
                last_site = occ.pop()
                if last_site != site:
                    occ[i] = last_site
                    slot[last_site] = i
                slot[site] = -1
                N -= 1
        else:
            idx = int(u2 * S)
            if idx >= S:
                idx = S - 1
            site = idx
            m = mass[site]
            n_dep += 1
            if do_trace:
                trace.append(EventSample(Event(DEPOSIT, site), dt))
            if tau > 0.0:
                last = site_last[site]
                if tau > last:
                    wx = tau - last
                    if m >= hist_len:
                        hist.extend([0.0] * (max(m + 1, 2 * hist_len) - hist_len))
                        hist_len = len(hist)
                    hist[m] += wx
                    site_int[site] += m * wx
                site_last[site] = tau
            if m == 0:
                mass[site] = 1
                slot[site] = N
                occ.append(site)
                N += 1
            else:
                if m + 1 > MASS_LIMIT:
                    raise MassOverflowError(
                        f"deposition at site {site} would produce mass {m + 1} "
                        f"(t={t_next:.6g}, event {n_events + 1})"
                    )
                mass[site] = m + 1
            M += 1

        t = t_next
        n_events += 1
        if t >= t_end:
            break
        if n_events == max_events:
            break

    # close every site's open measurement interval at the stop time
    t_stop = t if t < t_end else t_end
    if t_stop > burn:
        for x in range(S):
            last = site_last[x]
            if t_stop > last:
                wx = t_stop - last
                m = mass[x]
                if m >= hist_len:
                    hist.extend([0.0] * (max(m + 1, 2 * hist_len) - hist_len))
                    hist_len = len(hist)
                hist[m] += wx
                site_int[x] += m * wx

    state.total_mass = M
    stats.n_events = n_events
    stats.n_hops = n_hops
    stats.n_evaporations = n_evap
    stats.n_deposits = n_dep
    stats.n_coalescences = n_coal
    stats.t_final = t
    stats.final_total_mass = M
    stats.final_particle_count = N
    stats.absorbed = absorbed
    stats.absorption_time = absorption_time

    acc = StatAccumulator(S, series_period=period if n_series > 0 else None)
    acc.T = max(0.0, t_stop - burn)
    acc.mass_time = mass_T
    acc.count_time = count_T
    hw = len(hist)
    while hw > 1 and hist[hw - 1] == 0.0:
        hw -= 1
    acc.hist = hist[:hw]
    acc.site_mass_time = site_int
    acc.n_records = n_events
    acc.series = series
    return RunResult(state=state, stats=stats, acc=acc, trace=trace)


def _worker_count(requested: int | None) -> int:
    cap = os.environ.get("CED_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is None:
        return 1
    return max(1, min(requested, limit))


def _run_for_pool(config: EngineConfig) -> RunResult:
    return run(config)


@dataclass
class ReplicaSet:
    results: list[RunResult]
    acc: StatAccumulator

    @property
    def stats(self) -> list[RunStats]:
        return [r.stats for r in self.results]


def run_replicas(
    config: EngineConfig, n_replicas: int, workers: int | None = None
) -> ReplicaSet:
    """Independent replicas with derived seeds, merged in replica order.

    Replica k runs with seed mix_seed(config.seed, k); the merge is performed
    in index order whatever the execution order, so serial and parallel
    execution produce identical output.
    """
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    configs = [
        replace(config, seed=mix_seed(config.seed, k)) for k in range(n_replicas)
    ]
    nworkers = _worker_count(workers)
    if nworkers > 1 and config.hooks:
        raise ValueError("observer hooks are not picklable; run hooks serially")
    if nworkers > 1 and n_replicas > 1:
        with ProcessPoolExecutor(max_workers=min(nworkers, n_replicas)) as pool:
            results = list(pool.map(_run_for_pool, configs))
    else:
        results = [run(c) for c in configs]
    acc = results[0].acc
    for r in results[1:]:
        acc = merge_accumulators(acc, r.acc)
    return ReplicaSet(results=results, acc=acc)
