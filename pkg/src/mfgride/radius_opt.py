"""Dynamic optimal matching radius and the resulting monotone sojourn function.

For a supply rate x the plane-approximation waiting + pickup time is
minimised over both radii. The minimiser has equal radii, and the common
radius is the unique root of a scalar equation in the disk area z = pi R^2:

    (b / 4v)^(2/3) * G(beta)^(2/3) = beta^2 / z,
    beta^2 = -log(1 - (x/b) exp(-(b - x) z / theta)),
    G(beta) = erf(beta) - (2/sqrt(pi)) beta exp(-beta^2).

The left side is the waiting-driver density that balances waiting against
pickup at the driver-side radius; the right side is the density implied by
the matching balance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import RegionParams
from .special_math import RootBracket, erf, erf_tail_gap, find_root
from .timing import DomainError, TINY_DEFICIT, _approx_terms

Z_LO = 1e-8
_LOG_G_SMALL = math.log(4.0 / (3.0 * math.sqrt(math.pi)))


@dataclass(frozen=True)
class OptimalRadiusResult:
    R_star: float
    beta_star: float
    f_value: float
    residual: float
    waiting: float
    pickup: float

    @property
    def z_star(self) -> float:
        return math.pi * self.R_star ** 2


def _deficit(region: RegionParams, x: float, deficit: float | None) -> float:
    b = region.demand_rate
    d = b - x if deficit is None else deficit
    if not (x > 0 and d > 0):
        raise DomainError(f"supply rate must lie strictly inside (0, {b}) (x={x!r})")
    return max(d, TINY_DEFICIT)


def _log_beta2(region: RegionParams, x: float, d: float, z: float) -> float:
    b = region.demand_rate
    a2 = d * z / region.abandonment_rate
    t = (x / b) * math.exp(-a2) if a2 < 700 else 0.0
    if t > 1e-8:
        inner = (d / b) * math.exp(-a2) - math.expm1(-a2)
        return math.log(-math.log(inner))
    # -log(1 - t) = t (1 + t/2 + ...), evaluated in logs to survive underflow
    return math.log(x / b) - a2 + math.log1p(t / 2)


def _log_g(log_beta2: float) -> float:
    beta2 = math.exp(log_beta2)
    if beta2 > 1e-6:
        return math.log(erf_tail_gap(math.sqrt(beta2)))
    return _LOG_G_SMALL + 1.5 * log_beta2 + math.log1p(-0.6 * beta2)


def _log_gap(region: RegionParams, x: float, d: float, u: float) -> float:
    """log(lhs) - log(rhs) of the optimality equation at z = exp(u)."""
    lb2 = _log_beta2(region, x, d, math.exp(u))
    lhs = (2.0 / 3.0) * (math.log(region.demand_rate / (4.0 * region.speed)) + _log_g(lb2))
    return lhs - (lb2 - u)


def optimality_residual(region: RegionParams, x: float, R: float, *, deficit: float | None = None) -> float:
    """lhs - rhs of the optimal-radius equation at radius R (original, unscaled form)."""
    d = _deficit(region, x, deficit)
    z = math.pi * R * R
    lb2 = _log_beta2(region, x, d, z)
    beta = math.exp(0.5 * lb2)
    lhs = (region.demand_rate / (4 * region.speed)) ** (2 / 3) * erf_tail_gap(beta) ** (2 / 3)
    return lhs - math.exp(lb2) / z


def optimal_radius(region: RegionParams, x: float, *, deficit: float | None = None) -> OptimalRadiusResult:
    """Solve for the optimal common radius at supply rate x."""
    d = _deficit(region, x, deficit)
    return _optimal_radius_cached(region, float(x), float(d))


@lru_cache(maxsize=65536)
def _optimal_radius_cached(region: RegionParams, x: float, d: float) -> OptimalRadiusResult:
    u_lo = math.log(Z_LO)
    if _log_gap(region, x, d, u_lo) >= 0:
        raise DomainError(f"optimal-radius equation has no sign change above z={Z_LO} (x={x!r})")
    u_hi = u_lo
    for _ in range(200):
        u_hi += math.log(4.0)
        if _log_gap(region, x, d, u_hi) > 0:
            break
    else:
        raise DomainError(f"bracket expansion failed for x={x!r}, b={region.demand_rate!r}")
    u = find_root(lambda s: _log_gap(region, x, d, s), RootBracket(u_hi - math.log(4.0), u_hi, tol_x=1e-15))
    z = math.exp(u)
    R = math.sqrt(z / math.pi)
    w, tau = _approx_terms(region, x, d, z, z)
    beta = math.exp(0.5 * _log_beta2(region, x, d, z))
    return OptimalRadiusResult(
        R_star=R,
        beta_star=beta,
        f_value=float(w + tau),
        residual=optimality_residual(region, x, R, deficit=d),
        waiting=float(w),
        pickup=float(tau),
    )


def optimal_sojourn(region: RegionParams, x: float, *, deficit: float | None = None) -> float:
    """f(x): minimal waiting + pickup time over both radii."""
    return optimal_radius(region, x, deficit=deficit).f_value


def _gap_over_cube(y: float) -> float:
    """G(y) / y^3, finite as y -> 0."""
    if y > 1e-3:
        return erf_tail_gap(y) / y ** 3
    return 4.0 / (3.0 * math.sqrt(math.pi)) * (1.0 - 0.6 * y * y)


def _numerator_series(beta: float) -> float:
    """(2/sqrt(pi)) beta e^{-beta^2} - 3 erf(beta) + (4/sqrt(pi)) beta for small beta.

    The leading beta and beta^3 terms cancel, so the direct form loses all
    digits as beta -> 0.
    """
    total = 0.0
    term_pow = beta ** 5
    fact = 2.0
    for n in range(2, 30):
        c = (2 * n - 2) / ((2 * n + 1) * fact)
        total += (-1) ** n * c * term_pow
        term_pow *= beta * beta
        fact *= n + 1
        if abs(c * term_pow) < 1e-18 * abs(total):
            break
    return 2.0 / math.sqrt(math.pi) * total


def optimal_sojourn_derivative(region: RegionParams, x: float, *, deficit: float | None = None) -> float:
    """df/dx by the envelope theorem, evaluated in closed form at the optimal radius."""
    res = optimal_radius(region, x, deficit=deficit)
    d = _deficit(region, x, deficit)
    b, v, theta = region.demand_rate, region.speed, region.abandonment_rate
    alpha = math.sqrt(math.pi * d / theta) * res.R_star
    beta = res.beta_star
    sp = 2.0 / math.sqrt(math.pi)
    # sqrt(theta) G(alpha) / (4 v d^1.5) with G(alpha) / d^1.5 = (G / alpha^3) (pi/theta)^1.5 R^3
    first = math.sqrt(theta) / (4 * v) * _gap_over_cube(alpha) * (math.pi / theta) ** 1.5 * res.R_star ** 3
    if beta < 0.5:
        numer = _numerator_series(beta)
    else:
        numer = sp * beta * math.exp(-beta * beta) - 3 * erf(beta) + 2 * sp * beta
    second = b ** (2 / 3) * numer / ((4 * v) ** (2 / 3) * x * x * erf_tail_gap(beta) ** (1 / 3))
    return first + second


@dataclass(frozen=True)
class MonotonicityReport:
    grid: np.ndarray
    values: np.ndarray
    min_derivative: float
    min_forward_difference: float

    @property
    def passed(self) -> bool:
        return self.min_forward_difference > 0 and self.min_derivative > 0


def monotonicity_certificate(region: RegionParams, grid_size: int = 1000, *, lo: float = 0.01,
                             hi: float = 0.99, sojourn_fn=None, derivative_fn=None) -> MonotonicityReport:
    """Check f on a uniform grid over (lo b, hi b).

    ``sojourn_fn`` replaces the optimal sojourn (for example with a fixed-radius
    curve); its derivative is then taken by central differences unless
    ``derivative_fn`` is given.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    b = region.demand_rate
    xs = np.linspace(lo * b, hi * b, grid_size)
    f = sojourn_fn or (lambda x: optimal_sojourn(region, x))
    if derivative_fn is None:
        if sojourn_fn is None:
            derivative_fn = lambda x: optimal_sojourn_derivative(region, x)  # noqa: E731
        else:
            h = 1e-6 * b
            derivative_fn = lambda x: (f(x + h) - f(x - h)) / (2 * h)  # noqa: E731
    vals = np.array([f(x) for x in xs])
    ders = np.array([derivative_fn(x) for x in xs])
    return MonotonicityReport(xs, vals, float(ders.min()), float(np.diff(vals).min()))
