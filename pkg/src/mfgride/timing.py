"""Waiting-driver density, driver waiting time and pickup time as functions of supply.

Three formula families are provided:

* ``exact``: bounded disk of area ``a``; no-match probabilities are powers
  ``(1 - pi R^2 / a) ** (mu a)``.
* ``approx``: unbounded plane, spatial Poisson waiting populations; powers
  become ``exp(-mu pi R^2)`` and the pickup integrals have erf closed forms.
* ``sqrt_law``: the large-radius limit, pickup ``1 / (2 v sqrt(mu))``.

Every function accepts an optional ``deficit = b - x``. Near ``x -> b`` the
interesting behaviour happens at deficits far below the spacing of floats
around ``b``, so callers that track the deficit directly keep full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import EPS_SUPPLY, MatchingRadii, RegionParams
from .special_math import erf_tail_gap, integrate

TINY_DEFICIT = 1e-300


class DomainError(ValueError):
    pass


class FormulaMode(str, Enum):
    EXACT = "exact"
    APPROX = "approx"
    SQRT_LAW = "sqrt_law"

    @classmethod
    def parse(cls, value: "str | FormulaMode") -> "FormulaMode":
        if isinstance(value, cls):
            return value
        aliases = {"sqrt": cls.SQRT_LAW}
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class SojournBreakdown:
    waiting: float
    pickup: float
    trip: float
    clamped: bool = False

    @property
    def total(self) -> float:
        return self.waiting + self.pickup + self.trip

    def to_dict(self) -> dict:
        return {"waiting": self.waiting, "pickup": self.pickup, "trip": self.trip,
                "total": self.total, "clamped": self.clamped}


# ----------------------------------------------------------------- radius maps


def effective_area(radius, area: float | None = None):
    """pi R^2 on the plane, or -a log(1 - pi R^2 / a) for a bounded disk of area a."""
    z = np.pi * np.square(radius)
    if area is None:
        return z
    return -area * np.log1p(-z / area)


def to_effective_radius(radius, area: float):
    """Map a bounded-disk radius to the plane radius with the same no-match probability."""
    return np.sqrt(effective_area(radius, area) / np.pi)


def to_bounded_radius(radius, area: float):
    """Inverse of :func:`to_effective_radius`."""
    return np.sqrt(-area / np.pi * np.expm1(-np.pi * np.square(radius) / area))


# ------------------------------------------------------------------ validation


def _supply(region: RegionParams, x: float, deficit: float | None) -> tuple[float, float]:
    b = region.demand_rate
    d = b - x if deficit is None else deficit
    if not (x > 0 and d > 0):
        raise DomainError(f"supply rate must lie strictly inside (0, {b}) (x={x!r}, b-x={d!r})")
    return x, d


def _check_radii(region: RegionParams, radii: MatchingRadii, bounded: bool) -> None:
    for r in (radii.customer, radii.driver):
        if not r > 0 or not math.isfinite(r):
            raise DomainError(f"matching radius must be positive and finite (got {r!r})")
        if bounded and not r < region.max_radius:
            raise DomainError(f"matching radius {r!r} must be below sqrt(a/pi)={region.max_radius!r}")


def mu_c(region: RegionParams, x: float) -> float:
    """Waiting-customer density from the abandonment balance theta mu_c + x = b."""
    b = region.demand_rate
    if x > b or x < 0:
        raise DomainError(f"supply rate {x!r} outside [0, {b}]")
    return (b - x) / region.abandonment_rate


def _driver_density(region: RegionParams, x, d, zc, zd):
    """Waiting-driver density solving the steady-state matching balance.

    zc, zd are the effective disk areas of the two radii. Vectorised.
    """
    b = region.demand_rate
    muc = d / region.abandonment_rate
    a2 = muc * zc
    # 1 - (x/b) exp(-a2) written without cancellation as x -> b and a2 -> 0
    inner = (d / b) * np.exp(-a2) - np.expm1(-a2)
    beta2 = -np.log(inner)
    return muc, a2, beta2, beta2 / zd


# ----------------------------------------------------------------------- exact


def mu_d_exact(region: RegionParams, x: float, radii: MatchingRadii, *, deficit: float | None = None) -> float:
    x, d = _supply(region, x, deficit)
    _check_radii(region, radii, bounded=True)
    a = region.area
    zc = effective_area(radii.customer, a)
    zd = effective_area(radii.driver, a)
    return float(_driver_density(region, x, d, zc, zd)[3])


def waiting_time_exact(region: RegionParams, x: float, radii: MatchingRadii, *,
                       deficit: float | None = None) -> float:
    return mu_d_exact(region, x, radii, deficit=deficit) / x


def _disk_pickup_integral(k: float, radius: float, area: float, tol: float) -> float:
    """int_0^R (1 - pi r^2/a)^k - (1 - pi R^2/a)^k dr."""
    if k == 0:
        return 0.0
    end = math.exp(k * math.log1p(-math.pi * radius * radius / area))

    def f(r):
        return math.exp(k * math.log1p(-math.pi * r * r / area)) - end

    return integrate(f, 0.0, radius, tol)


def pickup_time_exact_from_densities(region: RegionParams, x: float, mu_c_: float, mu_d_: float,
                                     radii: MatchingRadii, tol: float = 1e-10) -> float:
    """Bounded-disk pickup time for given waiting densities (no balance imposed).

    Allows the boundary states x = b (mu_c = 0) and mu_d = 0 used in the
    square-root-law limits.
    """
    _check_radii(region, radii, bounded=False)
    if max(radii.customer, radii.driver) > region.max_radius:
        raise DomainError("radii must not exceed sqrt(a/pi) in the bounded-disk formula")
    a, v, b = region.area, region.speed, region.demand_rate
    first = _disk_pickup_integral(mu_c_ * a, radii.customer, a, tol)
    ratio = b / x
    second = _disk_pickup_integral(mu_d_ * a, radii.driver, a, tol / max(ratio, 1.0))
    return (first + ratio * second) / v


def pickup_time_exact(region: RegionParams, x: float, radii: MatchingRadii, *,
                      deficit: float | None = None, tol: float = 1e-10) -> float:
    x, d = _supply(region, x, deficit)
    mud = mu_d_exact(region, x, radii, deficit=d)
    muc = d / region.abandonment_rate
    return pickup_time_exact_from_densities(region, x, muc, mud, radii, tol)


# ---------------------------------------------------------------------- approx


def _approx_terms(region: RegionParams, x, d, zc, zd):
    """(waiting time, pickup time) on the plane; broadcasts over array inputs."""
    b, v = region.demand_rate, region.speed
    muc, a2, beta2, mud = _driver_density(region, x, d, zc, zd)
    w = mud / x
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.sqrt(a2)
        first = np.where(muc > 0, erf_tail_gap(alpha) / (2 * v * np.sqrt(muc)), 0.0)
        beta = np.sqrt(beta2)
        second = np.where(beta > 0, (b / x) * np.sqrt(zd) * erf_tail_gap(beta) / (2 * v * beta), 0.0)
    return w, first + second


def mu_d_approx(region: RegionParams, x: float, radii: MatchingRadii, *, deficit: float | None = None) -> float:
    x, d = _supply(region, x, deficit)
    _check_radii(region, radii, bounded=False)
    return float(_driver_density(region, x, d, effective_area(radii.customer),
                                 effective_area(radii.driver))[3])


def waiting_time_approx(region: RegionParams, x: float, radii: MatchingRadii, *,
                        deficit: float | None = None) -> float:
    return mu_d_approx(region, x, radii, deficit=deficit) / x


def pickup_time_approx(region: RegionParams, x: float, radii: MatchingRadii, *,
                       deficit: float | None = None) -> float:
    x, d = _supply(region, x, deficit)
    _check_radii(region, radii, bounded=False)
    return float(_approx_terms(region, x, d, effective_area(radii.customer),
                               effective_area(radii.driver))[1])


def approx_total(region: RegionParams, x: float, rc, rd, *, deficit: float | None = None):
    """w + tau on the plane for (arrays of) radii; used by grid searches."""
    d = region.demand_rate - x if deficit is None else deficit
    w, tau = _approx_terms(region, x, d, effective_area(rc), effective_area(rd))
    return w + tau


# -------------------------------------------------------------------- sqrt law


def sqrt_law_pickup(region: RegionParams, mu: float) -> float:
    if not mu > 0:
        raise DomainError(f"density must be positive (got {mu!r})")
    return 1.0 / (2.0 * region.speed * math.sqrt(mu))


# --------------------------------------------------------------------- sojourn


def sojourn(region: RegionParams, x: float, radii: MatchingRadii | None, mode="approx",
            trip_time: float = 0.0, *, deficit: float | None = None,
            mu_d: float | None = None) -> SojournBreakdown:
    """Driver sojourn when serving locally: waiting + pickup + trip.

    Supply rates at or beyond the endpoints are clamped to
    ``[eps b, b - eps b]`` and the result is flagged. In ``sqrt_law`` mode the
    oversupply state ``x = b`` needs the waiting-driver density ``mu_d``.
    """
    mode = FormulaMode.parse(mode)
    b = region.demand_rate
    if mode is FormulaMode.SQRT_LAW:
        d = b - x if deficit is None else deficit
        if d <= 0 or mu_d is not None:
            if mu_d is None:
                raise DomainError("sqrt_law at x = b needs the waiting-driver density mu_d")
            return SojournBreakdown(mu_d / x, sqrt_law_pickup(region, mu_d), trip_time)
        return SojournBreakdown(0.0, sqrt_law_pickup(region, d / region.abandonment_rate), trip_time)

    if radii is None:
        raise ValueError("radii are required for exact/approx modes")
    clamped = False
    d = b - x if deficit is None else deficit
    if x < EPS_SUPPLY * b:
        x, d, clamped = EPS_SUPPLY * b, b - EPS_SUPPLY * b, True
    if d < TINY_DEFICIT:
        d, clamped = (EPS_SUPPLY * b if deficit is None else TINY_DEFICIT), True
        x = min(x, b - d)
    if mode is FormulaMode.EXACT:
        w = waiting_time_exact(region, x, radii, deficit=d)
        tau = pickup_time_exact(region, x, radii, deficit=d)
    else:
        w = waiting_time_approx(region, x, radii, deficit=d)
        tau = pickup_time_approx(region, x, radii, deficit=d)
    return SojournBreakdown(w, tau, trip_time, clamped)
