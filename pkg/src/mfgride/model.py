"""Game primitives: regions, the demand/travel network and mass-rate helpers.

All masses and rates are per unit area (veh/km^2, veh/(min km^2)); times are
in minutes and distances in km.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

ROW_SUM_TOL = 1e-12
# Supply rates are kept below the demand rate by this fraction of b.
EPS_SUPPLY = 1e-9


@dataclass(frozen=True)
class RegionParams:
    """Scalar parameters of one region.

    ``reward_rate`` defaults to 1 $/min; the numerical experiments never
    pin it down and equilibria do not depend on a common scale of it.
    """

    area: float
    demand_rate: float
    abandonment_rate: float
    speed: float
    reward_rate: float = 1.0

    @property
    def max_radius(self) -> float:
        """Radius of the disk with the region's area."""
        return float(np.sqrt(self.area / np.pi))

    def violations(self, prefix: str = "region") -> list[str]:
        out = []
        for name in ("area", "demand_rate", "abandonment_rate", "speed", "reward_rate"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                out.append(f"{prefix}.{name} must be positive (got {val!r})")
        return out


@dataclass(frozen=True)
class MatchingRadii:
    """Customer-side radius (used at customer arrival) and driver-side radius."""

    customer: float
    driver: float

    @classmethod
    def equal(cls, r: float) -> "MatchingRadii":
        return cls(r, r)


def _frozen(a: Any) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NetworkModel:
    regions: tuple[RegionParams, ...]
    demand_matrix: np.ndarray
    travel_time: np.ndarray
    total_mass: float
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "demand_matrix", _frozen(self.demand_matrix))
        object.__setattr__(self, "travel_time", _frozen(self.travel_time))
        object.__setattr__(self, "total_mass", float(self.total_mass))

    @property
    def n(self) -> int:
        return len(self.regions)

    @property
    def trip_times(self) -> np.ndarray:
        """Mean trip time of a customer picked up in each region."""
        return np.sum(self.travel_time * self.demand_matrix, axis=1)

    @property
    def demand_rates(self) -> np.ndarray:
        return np.array([r.demand_rate for r in self.regions])

    @property
    def reward_rates(self) -> np.ndarray:
        return np.array([r.reward_rate for r in self.regions])

    @classmethod
    def single_region(cls, region: RegionParams, trip_time: float, total_mass: float) -> "NetworkModel":
        return cls((region,), [[1.0]], [[trip_time]], total_mass)

    # ---------------------------------------------------------------- JSON
    def to_dict(self) -> dict:
        d = {
            "regions": [
                {
                    "area": r.area,
                    "demand_rate": r.demand_rate,
                    "abandonment_rate": r.abandonment_rate,
                    "speed": r.speed,
                    "reward_rate": r.reward_rate,
                }
                for r in self.regions
            ],
            "demand_matrix": self.demand_matrix.tolist(),
            "travel_time": self.travel_time.tolist(),
            "total_mass": self.total_mass,
        }
        d.update(self.extras)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkModel":
        known = {"regions", "demand_matrix", "travel_time", "total_mass"}
        missing = known - set(d)
        if missing:
            raise KeyError(f"scenario is missing keys: {sorted(missing)}")
        regions = tuple(RegionParams(**r) for r in d["regions"])
        extras = {k: v for k, v in d.items() if k not in known}
        return cls(regions, d["demand_matrix"], d["travel_time"], d["total_mass"], extras)

    @classmethod
    def load(cls, path: str | Path) -> "NetworkModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def validate(network: NetworkModel) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    out: list[str] = []
    n = network.n
    if n == 0:
        return ["regions must be non-empty"]
    for i, r in enumerate(network.regions):
        out.extend(r.violations(f"regions.{i}"))
    q = network.demand_matrix
    t = network.travel_time
    if q.shape != (n, n):
        out.append(f"demand_matrix must be {n}x{n} (got {q.shape})")
    else:
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            out.append("demand_matrix entries must be finite and nonnegative")
        for i, s in enumerate(q.sum(axis=1)):
            if abs(s - 1.0) > ROW_SUM_TOL:
                out.append(f"demand_matrix row {i} not stochastic (sums to {s!r})")
    if t.shape != (n, n):
        out.append(f"travel_time must be {n}x{n} (got {t.shape})")
    elif np.any(~(t > 0)) or not np.all(np.isfinite(t)):
        out.append("travel_time entries must be positive and finite")
    if not (np.isfinite(network.total_mass) and network.total_mass > 0):
        out.append("total_mass must be positive")
    return out


def rate_violations(network: NetworkModel, x: np.ndarray) -> list[str]:
    """Invariant check for a mass-rate matrix."""
    x = np.asarray(x, dtype=float)
    n = network.n
    if x.shape != (n, n):
        return [f"rate matrix must be {n}x{n} (got {x.shape})"]
    out = []
    if np.any(x < 0):
        out.append("rate matrix entries must be nonnegative")
    for i, b in enumerate(network.demand_rates):
        if not x[i, i] < b:
            out.append(f"supply rate x[{i}][{i}]={x[i, i]!r} must be below demand rate {b!r}")
    return out


def strategy_from_rates(x: np.ndarray) -> np.ndarray:
    """Row-normalise a rate matrix into the aggregate strategy; zero rows stay zero."""
    x = np.asarray(x, dtype=float)
    s = x.sum(axis=1, keepdims=True)
    out = np.zeros_like(x)
    pos = s[:, 0] > 0
    out[pos] = x[pos] / s[pos]
    return out


def average_reward(network: NetworkModel, x: np.ndarray) -> float:
    """Average reward per unit mass, (1/m) sum_i x_ii c_i t_i."""
    x = np.asarray(x, dtype=float)
    return float(np.sum(np.diag(x) * network.reward_rates * network.trip_times) / network.total_mass)


def balance_residual(network: NetworkModel, x: np.ndarray) -> np.ndarray:
    """Outflow minus inflow for each region; zero for a stationary rate matrix."""
    x = np.asarray(x, dtype=float)
    q = network.demand_matrix
    diag = np.diag(x)
    off = x - np.diag(diag)
    outflow = x.sum(axis=1)
    inflow = off.sum(axis=0) + diag @ q
    return outflow - inflow


def mass_distribution(x: np.ndarray, sojourn: np.ndarray) -> np.ndarray:
    """Little's law per state-action pair: mu_ik = x_ik T_ik."""
    return np.asarray(x, dtype=float) * np.asarray(sojourn, dtype=float)
