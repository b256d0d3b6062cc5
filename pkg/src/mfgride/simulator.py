"""Discrete-event simulation of instant two-radius nearest-neighbour matching in one square region.

Customers arrive as a Poisson process at uniform locations and abandon after an
exponential patience unless matched. A closed pool of drivers alternates
between idling at a location and serving a match (straight-line pickup at
constant speed, then an exponential trip). After a drop-off the driver is
available immediately at a fresh uniform location.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .model import RegionParams
from .radius_opt import optimal_radius

ARRIVAL, ABANDON, DROPOFF = 0, 1, 2

TABLE3_COLUMNS = [
    "Matching radius R (km)",
    "Total number of arrival customers",
    "Mean waiting time for customers (min)",
    "Mean pick-up time (min)",
    "Mean waiting time for drivers (min)",
    "Mean total waiting time for customers (min)",
    "Mean total waiting time for drivers (min)",
    "Completion rate",
]


@dataclass
class SimConfig:
    world_size: float = 10.0
    horizon: float = 1440.0
    arrival_rate: float = 10.0
    patience_mean: float = 10.0
    n_drivers: int = 200
    speed: float = 0.4
    trip_mean: float = 20.0
    policy: str = "fixed"  # "fixed" | "dynamic"
    radius_c: float = 1.0
    radius_d: float = 1.0
    window: float = 60.0
    seed: int = 0
    warmup: float = 120.0
    bootstrap_radius: float = 1.6
    quantum: float = 0.005

    def violations(self) -> list[str]:
        out = []
        for name in ("world_size", "horizon", "patience_mean", "speed", "trip_mean", "window",
                     "bootstrap_radius", "quantum"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if self.arrival_rate < 0:
            out.append("arrival_rate must be nonnegative")
        if self.n_drivers < 0:
            out.append("n_drivers must be nonnegative")
        if self.policy not in ("fixed", "dynamic"):
            out.append(f"unknown policy {self.policy!r}")
        if self.policy == "fixed" and not (self.radius_c > 0 and self.radius_d > 0):
            out.append("fixed radii must be positive")
        if not 0 <= self.warmup < self.horizon:
            out.append("warmup must lie in [0, horizon)")
        return out

    @property
    def area(self) -> float:
        return self.world_size ** 2

    def region(self) -> RegionParams:
        """Mean-field parameters of the simulated region (per-area rates)."""
        return RegionParams(area=self.area, demand_rate=self.arrival_rate / self.area,
                            abandonment_rate=1.0 / self.patience_mean, speed=self.speed)

    @property
    def label(self) -> str:
        if self.policy == "dynamic":
            return "dynamic"
        if self.radius_c == self.radius_d:
            return f"{self.radius_c:g}"
        return f"{self.radius_c:g}/{self.radius_d:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SimMetrics:
    arrivals: int
    completed: int
    abandoned: int
    in_flight: int
    customer_wait: float  # over all resolved customers; abandoners count their patience
    pickup_time: float
    driver_wait: float
    completion_rate: float
    mean_radius: float
    radius_std: float
    matched_customer_wait: float = 0.0
    trace_hash: str = ""
    seed: int = 0
    policy: str = ""

    @property
    def total_customer_wait(self) -> float:
        return self.customer_wait + self.pickup_time

    @property
    def total_driver_wait(self) -> float:
        return self.driver_wait + self.pickup_time

    def table_row(self) -> list:
        return [self.policy, self.arrivals, self.customer_wait, self.pickup_time, self.driver_wait,
                self.total_customer_wait, self.total_driver_wait, self.completion_rate]


class GridIndex:
    """Uniform-grid point index over the square; cell size equals the active radius."""

    def __init__(self, world: float, cell: float):
        self.world = world
        self.pos: dict[int, tuple[float, float]] = {}
        self._rebuild(cell)

    def _rebuild(self, cell: float) -> None:
        self.cell = cell
        self.ncell = max(1, int(math.ceil(self.world / cell)))
        self.cells: dict[tuple[int, int], set[int]] = {}
        for k, (x, y) in self.pos.items():
            self.cells.setdefault(self._key(x, y), set()).add(k)

    def _key(self, x: float, y: float) -> tuple[int, int]:
        n = self.ncell - 1
        return min(int(x / self.cell), n), min(int(y / self.cell), n)

    def set_cell(self, cell: float) -> None:
        if cell != self.cell:
            self._rebuild(cell)

    def __len__(self) -> int:
        return len(self.pos)

    def add(self, k: int, x: float, y: float) -> None:
        self.pos[k] = (x, y)
        self.cells.setdefault(self._key(x, y), set()).add(k)

    def remove(self, k: int) -> None:
        x, y = self.pos.pop(k)
        self.cells[self._key(x, y)].discard(k)

    def nearest(self, x: float, y: float, radius: float) -> tuple[int, float] | None:
        """Closest point within ``radius`` (ties by lowest id), or None."""
        if not self.pos:
            return None
        reach = int(math.ceil(radius / self.cell))
        cx, cy = self._key(x, y)
        best = None
        for i in range(max(0, cx - reach), min(self.ncell, cx + reach + 1)):
            for j in range(max(0, cy - reach), min(self.ncell, cy + reach + 1)):
                for k in self.cells.get((i, j), ()):
                    px, py = self.pos[k]
                    dist = math.hypot(px - x, py - y)
                    if dist <= radius and (best is None or (dist, k) < best):
                        best = (dist, k)
        return None if best is None else (best[1], best[0])


class DynamicRadius:
    """Optimal common radius at the supply rate estimated over a trailing window."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.region = config.region()
        self.matches: deque[float] = deque()
        self._memo: dict[float, float] = {}

    def record_match(self, t: float) -> None:
        self.matches.append(t)

    def supply_estimate(self, t: float) -> float | None:
        cfg = self.config
        while self.matches and self.matches[0] < t - cfg.window:
            self.matches.popleft()
        span = min(t, cfg.window)
        if not self.matches or span <= 0:
            return None
        return len(self.matches) / (span * cfg.area)

    def radius_for(self, x_hat: float) -> float:
        b = self.region.demand_rate
        q = self.config.quantum
        x = min(max(x_hat, 0.01 * b), 0.99 * b)
        xq = min(max(round(x / q) * q, 0.01 * b), 0.99 * b)
        if xq not in self._memo:
            self._memo[xq] = optimal_radius(self.region, xq).R_star
        return self._memo[xq]

    def __call__(self, t: float) -> tuple[float, float]:
        x_hat = self.supply_estimate(t)
        if x_hat is None:
            r = self.config.bootstrap_radius
        else:
            r = self.radius_for(x_hat)
        return r, r


def dynamic_radius_hook(state: DynamicRadius, t: float) -> tuple[float, float]:
    """(R_c, R_d) for the dynamic policy at time t."""
    return state(t)


def run(config: SimConfig) -> SimMetrics:
    bad = config.violations()
    if bad:
        raise ValueError("; ".join(bad))
    cfg = config
    L = cfg.world_size
    cust_ss, drv_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    crng = np.random.default_rng(cust_ss)
    drng = np.random.default_rng(drv_ss)

    # customers are generated up front so every policy sees the same demand for a seed
    if cfg.arrival_rate > 0:
        n_guess = int(cfg.arrival_rate * cfg.horizon + 10 * math.sqrt(cfg.arrival_rate * cfg.horizon) + 10)
        gaps = crng.exponential(1.0 / cfg.arrival_rate, n_guess)
        times = np.cumsum(gaps)
        while times[-1] < cfg.horizon:
            more = np.cumsum(crng.exponential(1.0 / cfg.arrival_rate, n_guess)) + times[-1]
            times = np.concatenate([times, more])
        times = times[times < cfg.horizon]
    else:
        times = np.empty(0)
    n_c = times.size
    cpos = crng.uniform(0.0, L, (n_c, 2))
    patience = crng.exponential(cfg.patience_mean, n_c)

    hook = DynamicRadius(cfg) if cfg.policy == "dynamic" else None

    def radii(t: float) -> tuple[float, float]:
        return hook(t) if hook is not None else (cfg.radius_c, cfg.radius_d)

    r0 = radii(0.0)
    idle = GridIndex(L, max(r0[0], 1e-3))
    waiting = GridIndex(L, max(r0[1], 1e-3))
    idle_since = {}
    dpos = drng.uniform(0.0, L, (cfg.n_drivers, 2))
    for k in range(cfg.n_drivers):
        idle.add(k, dpos[k, 0], dpos[k, 1])
        idle_since[k] = 0.0

    events: list[tuple[float, int, int, int]] = []  # (time, kind, seq, id)
    seq = 0
    for i in range(n_c):
        heapq.heappush(events, (times[i], ARRIVAL, seq, i))
        seq += 1

    matched = np.zeros(n_c, dtype=bool)
    abandoned = np.zeros(n_c, dtype=bool)
    c_wait, c_pick, d_wait, radius_log = [], [], [], []
    trace = hashlib.blake2b(digest_size=16)

    def note(*vals):
        trace.update(struct.pack(f"<{len(vals)}d", *vals))

    def match(t: float, cust: int, drv: int, dist: float, radius: float) -> None:
        nonlocal seq
        assert dist <= radius + 1e-12, "match beyond the active radius"
        matched[cust] = True
        pick = dist / cfg.speed
        trip = drng.exponential(cfg.trip_mean)
        heapq.heappush(events, (t + pick + trip, DROPOFF, seq, drv))
        seq += 1
        if hook is not None:
            hook.record_match(t)
        if times[cust] >= cfg.warmup:
            c_wait.append(t - times[cust])
            c_pick.append(pick)
        if t >= cfg.warmup:
            d_wait.append(t - idle_since.pop(drv))
        else:
            idle_since.pop(drv)
        note(t, cust, drv, dist)

    while events:
        t, kind, _, ident = heapq.heappop(events)
        if t >= cfg.horizon:
            break
        rc, rd = radii(t)
        if t >= cfg.warmup:
            radius_log.append(rc)
        if kind == ARRIVAL:
            x, y = cpos[ident]
            idle.set_cell(rc)
            hit = idle.nearest(x, y, rc)
            if hit is not None:
                drv, dist = hit
                idle.remove(drv)
                match(t, ident, drv, dist, rc)
            else:
                waiting.add(ident, x, y)
                heapq.heappush(events, (t + patience[ident], ABANDON, seq, ident))
                seq += 1
        elif kind == ABANDON:
            if not matched[ident]:
                abandoned[ident] = True
                waiting.remove(ident)
                note(t, -1.0, ident, 0.0)
        else:
            x, y = drng.uniform(0.0, L, 2)
            waiting.set_cell(rd)
            hit = waiting.nearest(x, y, rd)
            idle_since[ident] = t
            if hit is not None:
                cust, dist = hit
                waiting.remove(cust)
                match(t, cust, ident, dist, rd)
            else:
                idle.add(ident, x, y)
                note(t, -2.0, ident, 0.0)

    window = times >= cfg.warmup
    arrivals = int(window.sum())
    done = int((matched & window).sum())
    gone = int((abandoned & window).sum())

    def mean(v):
        return float(np.mean(v)) if len(v) else 0.0

    all_waits = list(c_wait) + list(patience[abandoned & window])

    rl = np.array(radius_log) if radius_log else np.array([rc_ for rc_ in radii(cfg.horizon)[:1]])
    return SimMetrics(
        arrivals=arrivals,
        completed=done,
        abandoned=gone,
        in_flight=arrivals - done - gone,
        customer_wait=mean(all_waits),
        pickup_time=mean(c_pick),
        driver_wait=mean(d_wait),
        completion_rate=done / arrivals if arrivals else 1.0,
        mean_radius=float(rl.mean()),
        radius_std=float(rl.std()),
        matched_customer_wait=mean(c_wait),
        trace_hash=trace.hexdigest(),
        seed=cfg.seed,
        policy=cfg.label,
    )


@dataclass
class Aggregate:
    mean: dict
    std: dict
    ci95: dict
    n: int
    policy: str = ""


AGG_FIELDS = ("arrivals", "customer_wait", "pickup_time", "driver_wait", "total_customer_wait",
              "total_driver_wait", "completion_rate", "mean_radius")


def aggregate(runs: Sequence[SimMetrics]) -> Aggregate:
    from scipy import stats

    n = len(runs)
    mean, std, ci = {}, {}, {}
    for name in AGG_FIELDS:
        v = np.array([getattr(r, name) for r in runs], dtype=float)
        mean[name] = float(v.mean())
        std[name] = float(v.std(ddof=1)) if n > 1 else 0.0
        half = stats.t.ppf(0.975, n - 1) * std[name] / math.sqrt(n) if n > 1 else float("nan")
        ci[name] = (mean[name] - half, mean[name] + half)
    return Aggregate(mean, std, ci, n, runs[0].policy if runs else "")


def replication_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-replication seeds derived from one master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in ss.spawn(n)]


def _run_one(args):
    return run(args)


def replicate(config: SimConfig, n: int, seeds: Sequence[int] | None = None,
              workers: int = 1) -> tuple[list[SimMetrics], Aggregate]:
    if n < 1:
        raise ValueError("n must be at least 1")
    seeds = list(seeds) if seeds is not None else replication_seeds(config.seed, n)
    if len(seeds) != n:
        raise ValueError("need exactly n seeds")
    cfgs = [replace_config(config, seed=s) for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_run_one, cfgs))
    else:
        runs = [run(c) for c in cfgs]
    return runs, aggregate(runs)


def replace_config(config: SimConfig, **changes) -> SimConfig:
    d = config.to_dict()
    d.update(changes)
    return SimConfig(**d)


def table3_policies(base: SimConfig, radii: Sequence[float] = tuple(np.arange(1, 11) * 0.5)) -> list[SimConfig]:
    """Fixed common radii 0.5..5 km plus the dynamic policy."""
    out = [replace_config(base, policy="fixed", radius_c=float(r), radius_d=float(r)) for r in radii]
    out.append(replace_config(base, policy="dynamic"))
    return out
