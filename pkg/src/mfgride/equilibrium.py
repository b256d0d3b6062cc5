"""Stationary equilibria: single-region root enumeration, square-root-law regimes,
multi-region KKT points and best-response verification.

Equilibria are the KKT points of

    J(x) = m log(sum_i x_ii c_i t_i) - sum_i x_ii t_i - sum_{i!=j} x_ij t_ij
           - sum_i int_0^{x_ii} f_i(s) ds

over the balance polytope, where f_i = w_i + tau_i is the local waiting plus
pickup time. Only f_i enters the optimality conditions, so the solvers never
need the integrals; ``potential`` evaluates them for diagnostics.

Supply rates near the demand rate are tracked by their deficit d = b - x,
because the interesting roots with fixed radii sit at deficits far below
float spacing around b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize as _optimize

from .model import (EPS_SUPPLY, MatchingRadii, NetworkModel, RegionParams, average_reward,
                    balance_residual)
from .radius_opt import optimal_radius
from .special_math import (LinearProgram, RootBracket, find_root, integrate, minimax_multipliers,
                           solve_lp)
from .timing import (TINY_DEFICIT, FormulaMode, SojournBreakdown, pickup_time_approx,
                     pickup_time_exact, waiting_time_approx, waiting_time_exact)

DYNAMIC = "dynamic"
KKT_TOL = 1e-6
DEDUP_TOL = 1e-4
SCAN_POINTS = 2000
LOG_SCAN_POINTS = 600
REFINE = 10


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ------------------------------------------------------------------ sojourn models


@dataclass(frozen=True)
class SojournModel:
    """Local waiting + pickup time of one region as a function of supply.

    ``radii`` is None for the dynamic optimal radius (always evaluated with the
    plane formulas).
    """

    region: RegionParams
    mode: FormulaMode = FormulaMode.APPROX
    radii: MatchingRadii | None = None

    @property
    def dynamic(self) -> bool:
        return self.radii is None and self.mode is not FormulaMode.SQRT_LAW

    def full_service_density(self) -> float:
        """Waiting-driver density minimising mu/b + 1/(2 v sqrt(mu)), the dynamic limit at x = b."""
        return (self.region.demand_rate / (4.0 * self.region.speed)) ** (2.0 / 3.0)

    def full_service_terms(self, extra: float = 0.0) -> tuple[float, float, float]:
        """(waiting, pickup, mu_d) at x = b with local time f(b-) + extra.

        The local time mu/b + 1/(2 v sqrt(mu)) is minimal at the dynamic limit; a
        larger value is realised by the larger root, i.e. more drivers waiting.
        """
        b, v = self.region.demand_rate, self.region.speed
        mu = self.full_service_density()
        if extra > 0:
            target = mu / b + 1 / (2 * v * math.sqrt(mu)) + extra
            h = lambda u: u / b + 1 / (2 * v * math.sqrt(u)) - target  # noqa: E731
            hi = mu
            while h(hi) <= 0:
                hi *= 2.0
            mu = find_root(h, RootBracket(mu, hi, tol_x=1e-15 * hi))
        return mu / b, 1 / (2 * v * math.sqrt(mu)), mu

    @property
    def supply_cap(self) -> float:
        """Largest admissible supply: b under dynamic radii (finite limit), else b (1 - eps)."""
        b = self.region.demand_rate
        return b if self.dynamic else b * (1 - EPS_SUPPLY)

    def _clamp(self, x: float, d: float) -> tuple[float, float]:
        b = self.region.demand_rate
        if x < EPS_SUPPLY * b:
            return EPS_SUPPLY * b, b - EPS_SUPPLY * b
        return x, max(d, TINY_DEFICIT)

    def terms(self, x: float, d: float | None = None) -> tuple[float, float]:
        """(waiting, pickup) at supply x with deficit d = b - x."""
        b = self.region.demand_rate
        d = b - x if d is None else d
        if self.dynamic and d <= 0:
            return self.full_service_terms()[:2]
        x, d = self._clamp(x, d)
        if self.mode is FormulaMode.SQRT_LAW:
            return 0.0, 1.0 / (2 * self.region.speed * math.sqrt(d / self.region.abandonment_rate))
        if self.radii is None:
            res = optimal_radius(self.region, x, deficit=d)
            return res.waiting, res.pickup
        if self.mode is FormulaMode.EXACT:
            return (waiting_time_exact(self.region, x, self.radii, deficit=d),
                    pickup_time_exact(self.region, x, self.radii, deficit=d))
        return (waiting_time_approx(self.region, x, self.radii, deficit=d),
                pickup_time_approx(self.region, x, self.radii, deficit=d))

    def f(self, x: float, d: float | None = None) -> float:
        w, tau = self.terms(x, d)
        return w + tau

    def integral(self, x: float, d: float | None = None) -> float:
        """int_0^x f(s) ds, splitting at b/2 and integrating the upper part in log-deficit."""
        b = self.region.demand_rate
        d = b - x if d is None else d
        lo = EPS_SUPPLY * b
        mid = 0.5 * b
        if x <= mid:
            return integrate(lambda s: self.f(s), lo, x, tol=1e-9, limit=500) if x > lo else 0.0
        first = integrate(lambda s: self.f(s), lo, mid, tol=1e-9, limit=500)
        lu_lo, lu_hi = math.log(max(d, TINY_DEFICIT)), math.log(b - mid)
        second = integrate(lambda v: self.f(b - math.exp(v), math.exp(v)) * math.exp(v),
                           lu_lo, lu_hi, tol=1e-9, limit=500)
        return first + second


def _radii_list(radii, n: int) -> list[MatchingRadii | None]:
    if radii is None or (isinstance(radii, str) and radii == DYNAMIC):
        return [None] * n
    if isinstance(radii, MatchingRadii):
        return [radii] * n
    if isinstance(radii, (int, float)):
        return [MatchingRadii.equal(float(radii))] * n
    out = []
    for r in radii:
        if r is None or (isinstance(r, str) and r == DYNAMIC):
            out.append(None)
        elif isinstance(r, MatchingRadii):
            out.append(r)
        else:
            out.append(MatchingRadii.equal(float(r)))
    if len(out) != n:
        raise ValueError(f"expected {n} radii, got {len(out)}")
    return out


def sojourn_models(network: NetworkModel, mode="approx", radii=DYNAMIC) -> list[SojournModel]:
    """One SojournModel per region. ``radii`` is "dynamic", a radius, MatchingRadii or a per-region list."""
    mode = FormulaMode.parse(mode)
    return [SojournModel(reg, mode, r) for reg, r in zip(network.regions, _radii_list(radii, network.n))]


# ----------------------------------------------------------------------- results


@dataclass
class EquilibriumResult:
    x: np.ndarray
    deficits: np.ndarray
    mu: np.ndarray
    lam: float
    nu: np.ndarray
    sojourns: list[SojournBreakdown]
    kkt_residual: float
    conservation_residual: float
    balance_residual: float
    classification: str
    region_tags: list[str]
    objective: float = float("nan")
    extras: dict = field(default_factory=dict)

    @property
    def supply(self) -> np.ndarray:
        return np.diag(self.x).copy()

    @property
    def verified(self) -> bool:
        return (self.kkt_residual <= KKT_TOL and abs(self.lam - 1.0) <= KKT_TOL
                and self.conservation_residual <= KKT_TOL and self.balance_residual <= 1e-9)

    def sojourn_matrix(self, network: NetworkModel) -> np.ndarray:
        T = network.travel_time.copy()
        for i, s in enumerate(self.sojourns):
            T[i, i] = s.total
        return T

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "deficits": self.deficits.tolist(),
            "mu": self.mu.tolist(),
            "lambda": self.lam,
            "nu": self.nu.tolist(),
            "sojourns": [s.to_dict() for s in self.sojourns],
            "kkt_residual": self.kkt_residual,
            "conservation_residual": self.conservation_residual,
            "balance_residual": self.balance_residual,
            "classification": self.classification,
            "region_tags": list(self.region_tags),
            "objective": self.objective,
            "verified": self.verified,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EquilibriumResult":
        soj = [SojournBreakdown(s["waiting"], s["pickup"], s["trip"], s.get("clamped", False))
               for s in d["sojourns"]]
        num = lambda v: float("nan") if v is None else float(v)  # noqa: E731  (JSON null is NaN)
        return cls(np.array(d["x"], dtype=float), np.array(d["deficits"], dtype=float),
                   np.array(d["mu"], dtype=float), num(d["lambda"]), np.array(d["nu"], dtype=float),
                   soj, num(d["kkt_residual"]), num(d["conservation_residual"]),
                   num(d["balance_residual"]), d["classification"], list(d["region_tags"]),
                   num(d.get("objective")), dict(d.get("extras", {})))


def _region_tag(region: RegionParams, d: float, w: float, tau: float) -> str:
    b = region.demand_rate
    mu_c = d / region.abandonment_rate
    mu_d = w * (b - d)
    if d <= 1e-6 * b:
        return "oversupply"
    if mu_d <= 1e-6 * mu_c:
        return "undersupply"
    return "interior"


# ------------------------------------------------------------------- KKT machinery


def balance_matrix(network: NetworkModel) -> np.ndarray:
    """Jacobian of balance_residual with respect to the flattened rate matrix."""
    n = network.n
    q = network.demand_matrix
    A = np.zeros((n, n * n))
    for i in range(n):
        for j in range(n):
            k = i * n + j
            A[i, k] += 1.0
            if j != i:
                A[j, k] -= 1.0
            else:
                A[:, k] -= q[i]
    return A


class _Problem:
    """Gradient, KKT and potential evaluations for one network and sojourn model set."""

    def __init__(self, network: NetworkModel, models: Sequence[SojournModel]):
        self.net = network
        self.models = list(models)
        self.n = network.n
        self.b = network.demand_rates
        self.c = network.reward_rates
        self.ti = network.trip_times
        self.t = network.travel_time
        self.m = network.total_mass
        self.A = balance_matrix(network)
        diag = np.eye(self.n, dtype=bool).ravel()
        self.diag_mask = diag
        up = (self.m / self.t).ravel()
        up[diag] = [mod.supply_cap for mod in self.models]
        self.upper = up

    def deficits(self, x: np.ndarray) -> np.ndarray:
        return self.b - np.diag(x)

    def f_values(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        return np.array([mod.f(x[i, i], d[i]) for i, mod in enumerate(self.models)])

    def reward_sum(self, x: np.ndarray) -> float:
        return float(np.sum(np.diag(x) * self.c * self.ti))

    def gradient(self, x: np.ndarray, d: np.ndarray | None = None) -> np.ndarray:
        d = self.deficits(x) if d is None else d
        s = self.reward_sum(x)
        g = -self.t.copy()
        lead = self.m * self.c * self.ti / s if s > 0 else np.full(self.n, 1e300)
        g[np.diag_indices(self.n)] = lead - self.ti - self.f_values(x, d)
        return g

    def potential(self, x: np.ndarray, d: np.ndarray | None = None) -> float:
        d = self.deficits(x) if d is None else d
        s = self.reward_sum(x)
        if s <= 0:
            return -math.inf
        off = x.copy()
        np.fill_diagonal(off, 0.0)
        val = self.m * math.log(s) - float(np.sum(np.diag(x) * self.ti)) - float(np.sum(off * self.t))
        return val - sum(mod.integral(x[i, i], d[i]) for i, mod in enumerate(self.models))

    def support(self, x: np.ndarray) -> np.ndarray:
        thr = 1e-10 * self.upper
        return x.ravel() > thr

    def capped(self, d: np.ndarray) -> np.ndarray:
        """Regions at full service (x_ii = b), possible only under dynamic radii."""
        return np.array([mod.dynamic and d[i] <= 0 for i, mod in enumerate(self.models)])

    def kkt(self, x: np.ndarray, d: np.ndarray) -> tuple[float, np.ndarray, float, np.ndarray]:
        """(max KKT violation with lambda = 1, nu, lambda from a free fit, eta).

        eta_i >= 0 is the multiplier of the full-service bound of a capped region;
        it is realised as extra local waiting, which makes its row an equality.
        """
        g = self.gradient(x, d).ravel()
        sup = self.support(x)
        cap = np.zeros(self.n * self.n, dtype=bool)
        cap[self.diag_mask] = self.capped(d)
        nu, viol = minimax_multipliers(self.A.T, g, sup, fixed=0, reverse=cap)
        e = g + self.A.T @ nu
        eta = np.maximum(e[self.diag_mask], 0.0) * self.capped(d)
        # free lambda: rows a_k - lam cost_k + (A^T nu)_k = 0 on the support
        a = np.zeros(self.n * self.n)
        s = self.reward_sum(x)
        a[self.diag_mask] = self.m * self.c * self.ti / s
        cost = a - g
        cost[self.diag_mask] += eta
        M = np.hstack([-cost[sup, None], self.A.T[sup][:, 1:]])
        sol = np.linalg.lstsq(M, -a[sup], rcond=None)[0]
        return viol, nu, float(sol[0]), eta


def _make_result(prob: _Problem, x: np.ndarray, d: np.ndarray, extras: dict | None = None,
                 with_objective: bool = False) -> EquilibriumResult:
    x = np.array(x, dtype=float)
    d = np.array(d, dtype=float)
    viol, nu, lam, eta = prob.kkt(x, d)
    sojourns, tags = [], []
    parked = {}
    for i, mod in enumerate(prob.models):
        if prob.capped(d)[i]:
            w, tau, mu_d = mod.full_service_terms(float(eta[i]))
            parked[i] = mu_d
        else:
            w, tau = mod.terms(x[i, i], d[i])
        sojourns.append(SojournBreakdown(w, tau, float(prob.ti[i])))
        tags.append(_region_tag(mod.region, d[i], w, tau))
    T = prob.t.copy()
    for i, s in enumerate(sojourns):
        T[i, i] = s.total
    mu = x * T
    if parked:
        extras = dict(extras or {}, full_service_mu_d={str(k): v for k, v in parked.items()})
    cons = abs(float(mu.sum()) - prob.m) / prob.m
    bal = float(np.max(np.abs(balance_residual(prob.net, x))))
    active = [t for t, xi in zip(tags, np.diag(x)) if xi > 0] or tags
    cls = active[0] if all(t == active[0] for t in active) else "interior"
    obj = prob.potential(x, d) if with_objective else float("nan")
    return EquilibriumResult(x, d, mu, lam, nu, sojourns, float(viol), cons, bal, cls, tags, obj,
                             dict(extras or {}))


# ------------------------------------------------------------- single region (Eq. 17 form)


@dataclass(frozen=True)
class SupplyCurve:
    """m(x) = x (w + tau + t) sampled on a grid that is uniform in x and log-uniform in b - x."""

    x: np.ndarray
    deficit: np.ndarray
    m: np.ndarray


def _scan_grid(b: float, n: int, n_log: int) -> tuple[np.ndarray, np.ndarray]:
    xs = b * np.arange(1, n + 1) / (n + 1)
    d_top = b - xs[-1]
    ds_log = np.geomspace(d_top, TINY_DEFICIT, n_log + 1)[1:]
    x = np.concatenate([xs, b - ds_log])
    d = np.concatenate([b - xs, ds_log])
    return x, d


def supply_curve(region: RegionParams, radii, t_trip: float, mode="approx",
                 n: int = SCAN_POINTS, n_log: int = LOG_SCAN_POINTS) -> SupplyCurve:
    mod = SojournModel(region, FormulaMode.parse(mode), _radii_list(radii, 1)[0])
    x, d = _scan_grid(region.demand_rate, n, n_log)
    m = np.array([xi * (mod.f(xi, di) + t_trip) for xi, di in zip(x, d)])
    return SupplyCurve(x, d, m)


def _curve_point(mod: SojournModel, t_trip: float, param: float, log_space: bool) -> tuple[float, float, float]:
    b = mod.region.demand_rate
    if log_space:
        d = math.exp(param)
        x = b - d
    else:
        x, d = param, b - param
    return x, d, x * (mod.f(x, d) + t_trip)


def single_region_equilibria(region: RegionParams, radii, t_trip: float, m: float, mode="approx",
                             *, curve: SupplyCurve | None = None,
                             with_objective: bool = False) -> list[EquilibriumResult]:
    """All roots of x (w(x) + tau(x) + t) = m on (0, b), each as an EquilibriumResult.

    ``radii`` is "dynamic" or a fixed radius / MatchingRadii. A precomputed
    ``curve`` (same region, radii, trip time and mode) skips the scan.
    """
    if not m > 0:
        raise ValueError("total mass must be positive")
    mode = FormulaMode.parse(mode)
    mod = SojournModel(region, mode, _radii_list(radii, 1)[0])
    if curve is None:
        curve = supply_curve(region, radii, t_trip, mode)
    b = region.demand_rate
    if mod.dynamic and m >= sqrt_threshold(region, t_trip):
        # with optimal radii m(x) increases to this threshold as x -> b, so larger
        # masses park as waiting drivers at full service
        mu_d = max(oversupply_densities(region, t_trip, m))
        return [sqrt_equilibrium_result(region, t_trip, m, b, mu_d)]
    pos = curve.m >= m
    net = NetworkModel.single_region(region, t_trip, m)
    prob = _Problem(net, [mod])
    roots: list[tuple[float, float]] = []
    for k in np.nonzero(pos[:-1] != pos[1:])[0]:
        log_space = curve.x[k + 1] > 0.5 * b
        if log_space:
            p0, p1 = math.log(curve.deficit[k]), math.log(curve.deficit[k + 1])
        else:
            p0, p1 = curve.x[k], curve.x[k + 1]
        ps = np.linspace(p0, p1, REFINE + 1)
        hs = np.array([_curve_point(mod, t_trip, p, log_space)[2] - m for p in ps])
        hs[0], hs[-1] = curve.m[k] - m, curve.m[k + 1] - m
        for j in range(REFINE):
            if (hs[j] >= 0) == (hs[j + 1] >= 0):
                continue
            if hs[j + 1] == 0:
                roots.append(_curve_point(mod, t_trip, ps[j + 1], log_space)[:2])
                continue
            lo, hi = sorted((ps[j], ps[j + 1]))
            fn = lambda p: _curve_point(mod, t_trip, p, log_space)[2] - m  # noqa: E731
            p = find_root(fn, RootBracket(lo, hi, tol_x=1e-15 if not log_space else 1e-13))
            roots.append(_curve_point(mod, t_trip, p, log_space)[:2])
    if not roots:
        raise ConvergenceError("no root of the single-region equilibrium equation found on the scan grid",
                               {"m": m, "curve_min": float(curve.m.min()), "curve_max": float(curve.m.max())})
    roots.sort(key=lambda r: -r[1])
    out = []
    for x, d in roots:
        out.append(_make_result(prob, np.array([[x]]), np.array([d]), with_objective=with_objective))
    return out


def count_roots(curve: SupplyCurve, m: float) -> int:
    """Sign changes of m(x) - m on a precomputed curve (a fast proxy for the root count)."""
    pos = curve.m >= m
    return int(np.sum(pos[:-1] != pos[1:]))


# --------------------------------------------------------------- square-root-law regime


def sqrt_threshold(region: RegionParams, t_trip: float) -> float:
    """Smallest driver mass admitting an oversupply equilibrium under the square-root law.

    The oversupply condition mu + b / (2 v sqrt(mu)) + b t = m has its minimum
    over mu at mu* = (b / 4v)^(2/3), where the left side equals 3 mu* + b t.
    """
    b, v = region.demand_rate, region.speed
    return 3.0 * (b / (4.0 * v)) ** (2.0 / 3.0) + b * t_trip


def oversupply_densities(region: RegionParams, t_trip: float, m: float,
                         band: float = 1e-6) -> list[float]:
    """Waiting-driver densities solving mu + b/(2 v sqrt(mu)) = m - b t (0, 1 or 2 of them)."""
    b, v = region.demand_rate, region.speed
    mu_star = (b / (4.0 * v)) ** (2.0 / 3.0)
    target = m - b * t_trip
    m_star = sqrt_threshold(region, t_trip)
    if abs(m - m_star) <= band:
        return [mu_star]
    if m < m_star:
        return []

    def h(mu):
        return mu + b / (2 * v * math.sqrt(mu)) - target

    lo = mu_star
    while h(lo) <= 0:
        lo *= 0.5
    hi = mu_star
    while h(hi) <= 0:
        hi *= 2.0
    small = find_root(h, RootBracket(lo, mu_star, tol_x=1e-15))
    large = find_root(h, RootBracket(mu_star, hi, tol_x=1e-13))
    return [small, large]


def undersupply_rate(region: RegionParams, t_trip: float, m: float) -> float:
    """Unique x solving (x / 2v) sqrt(theta / (b - x)) + x t = m."""
    b, v, th = region.demand_rate, region.speed, region.abandonment_rate

    def h_d(d):
        x = b - d
        return x / (2 * v) * math.sqrt(th / d) + x * t_trip - m

    d_hi = b * (1 - 1e-12)
    if h_d(d_hi) >= 0:
        return b - d_hi
    split = 1e-6 * b
    if h_d(split) > 0:
        fn = lambda x: h_d(b - x)  # noqa: E731
        return find_root(fn, RootBracket(b - d_hi, b - split, tol_x=1e-15))
    lu = find_root(lambda u: h_d(math.exp(u)), RootBracket(math.log(TINY_DEFICIT), math.log(split)))
    return b - math.exp(lu)


@dataclass(frozen=True)
class RegimeReport:
    m_threshold: float
    case: int
    equilibria: list[tuple[float, float]]  # (x, mu_d)
    poa_ratio: float

    def to_dict(self) -> dict:
        return {"m_threshold": self.m_threshold, "case": self.case,
                "equilibria": [list(e) for e in self.equilibria], "poa_ratio": self.poa_ratio}


def sqrt_regime_classify(region: RegionParams, t_trip: float, m: float, band: float = 1e-6) -> RegimeReport:
    if not m > 0:
        raise ValueError("total mass must be positive")
    b = region.demand_rate
    xu = undersupply_rate(region, t_trip, m)
    eqs = [(xu, 0.0)] + [(b, mu) for mu in oversupply_densities(region, t_trip, m, band)]
    return RegimeReport(sqrt_threshold(region, t_trip), len(eqs), eqs, xu / b)


def sqrt_equilibrium_result(region: RegionParams, t_trip: float, m: float, x: float,
                            mu_d: float) -> EquilibriumResult:
    """Embed a square-root-law equilibrium as a single-region EquilibriumResult."""
    b, v, th = region.demand_rate, region.speed, region.abandonment_rate
    if mu_d > 0:
        w, tau, d, tag = mu_d / b, 1 / (2 * v * math.sqrt(mu_d)), 0.0, "oversupply"
        x = float(b)
    else:
        d = b - x
        w, tau, tag = 0.0, 1 / (2 * v * math.sqrt(d / th)), "undersupply"
    T = w + tau + t_trip
    xm = np.array([[x]])
    mu = xm * T
    lead = m * region.reward_rate * t_trip / (x * region.reward_rate * t_trip)
    kkt = abs(lead - t_trip - w - tau)
    return EquilibriumResult(xm, np.array([d]), mu, float(m / (x * T)), np.zeros(1),
                             [SojournBreakdown(w, tau, t_trip)], kkt,
                             abs(float(mu.sum()) - m) / m, 0.0, tag, [tag],
                             extras={"mu_d": mu_d})


def poa_probe(region: RegionParams, t_trip: float, thetas: Sequence[float]) -> np.ndarray:
    """x^u / x^o at m pinned to the oversupply threshold, for each abandonment rate."""
    out = []
    for th in thetas:
        reg = replace(region, abandonment_rate=float(th))
        m = sqrt_threshold(reg, t_trip)
        out.append(undersupply_rate(reg, t_trip, m) / reg.demand_rate)
    return np.array(out)


# ---------------------------------------------------------------- multi-region solver


def _line_search(prob: _Problem, x: np.ndarray, dirn: np.ndarray) -> float:
    """First zero of the directional derivative along x + s dirn, s in [0, 1]."""

    def dphi(s):
        xs = x + s * dirn
        return float(np.sum(prob.gradient(xs) * dirn))

    prev_s, prev = 0.0, dphi(0.0)
    if prev <= 0:
        return 0.0
    for s in np.linspace(0.125, 1.0, 8):
        cur = dphi(s)
        if cur <= 0:
            return find_root(dphi, RootBracket(prev_s, s, tol_x=1e-13)) if cur < 0 else float(s)
        prev_s, prev = s, cur
    return 1.0


def frank_wolfe(prob: _Problem, x0: np.ndarray, max_iter: int = 60,
                gap_tol: float = 1e-9) -> tuple[np.ndarray, list[float]]:
    """Conditional-gradient ascent on the boxed balance polytope; returns (x, gap history)."""
    x = np.array(x0, dtype=float)
    gaps = []
    zeros = np.zeros(prob.n)
    for _ in range(max_iter):
        g = prob.gradient(x).ravel()
        res = solve_lp(LinearProgram(g, prob.A, zeros, prob.upper))
        if not res.ok:
            raise ConvergenceError(f"direction LP {res.status}")
        dirn = (res.x - x.ravel()).reshape(x.shape)
        gap = float(g @ dirn.ravel())
        gaps.append(gap)
        if gap <= gap_tol:
            break
        s = _line_search(prob, x, dirn)
        if s <= 0:
            break
        x = x + s * dirn
        x[x < 0] = 0.0
    return x, gaps


def _polish(prob: _Problem, x: np.ndarray, d: np.ndarray, rounds: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Newton-type solve of the KKT equalities on the support, in (log-deficit, x_ij, nu).

    Capped regions stay at full service; their rows are inequalities.
    """
    n = prob.n
    b = prob.b
    diag_of = {i * n + i: i for i in range(n)}
    for _ in range(rounds):
        cap = prob.capped(d)
        sup = prob.support(x)
        idx = np.array([k for k in np.nonzero(sup)[0] if not (k in diag_of and cap[diag_of[k]])], dtype=int)
        log_vars = [k in diag_of and x.ravel()[k] > 0.5 * b[diag_of[k]] for k in idx]

        def unpack(z):
            xv = x.ravel().copy()
            xv[~sup] = 0.0
            dv = d.copy()
            for pos, k in enumerate(idx):
                if log_vars[pos]:
                    i = diag_of[k]
                    dv[i] = math.exp(min(z[pos], math.log(b[i])))
                    xv[k] = b[i] - dv[i]
                else:
                    xv[k] = z[pos]
                    if k in diag_of:
                        dv[diag_of[k]] = b[diag_of[k]] - z[pos]
            nu = np.concatenate([[0.0], z[len(idx):]])
            return xv.reshape(n, n), dv, nu

        def eqs(z):
            xv, dv, nu = unpack(z)
            if np.any((dv <= 0) & ~cap) or prob.reward_sum(xv) <= 0:
                return np.full(len(z), 1e6)
            g = prob.gradient(xv, dv).ravel() + prob.A.T @ nu
            bal = prob.A @ xv.ravel()
            return np.concatenate([g[idx], bal[1:]])

        z0 = [math.log(max(d[diag_of[k]], TINY_DEFICIT)) if lv else x.ravel()[k]
              for k, lv in zip(idx, log_vars)]
        nu0 = prob.kkt(x, d)[1]
        z0 = np.array(z0 + list(nu0[1:]))
        sol = _optimize.root(eqs, z0, method="hybr", options={"xtol": 1e-14})
        xv, dv, _ = unpack(sol.x)
        neg = xv < 0
        xv[neg] = 0.0
        for i in range(n):
            if neg[i, i]:
                dv[i] = b[i]
        before = _merit(prob, x, d)
        after = _merit(prob, xv, dv)
        if after < before:
            x, d = xv, dv
        if after <= 0.1 * KKT_TOL or not np.any(neg):
            break
    return x, d


def _complementarity_solve(prob: _Problem, x: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the full KKT system as x = clip(x + sigma e(x, nu), 0, cap) plus balance.

    The natural residual needs no guess of the support, which the
    conditional-gradient iterate identifies only slowly.
    """
    n = prob.n
    nn = n * n
    sigma = 0.01 * prob.upper
    cap = prob.upper

    def split(z):
        xv = z[:nn].reshape(n, n)
        return xv, prob.b - np.diag(xv), np.concatenate([[0.0], z[nn:]])

    def eqs(z):
        xv, dv, nu = split(z)
        xc = np.clip(xv, 0.0, cap.reshape(n, n))
        dc = prob.b - np.diag(xc)
        if prob.reward_sum(xc) <= 0:
            return np.full(z.size, 1e6)
        e = prob.gradient(xc, dc).ravel() + prob.A.T @ nu
        nat = z[:nn] - np.clip(z[:nn] + sigma * e, 0.0, cap)
        return np.concatenate([nat, (prob.A @ z[:nn])[1:]])

    z0 = np.concatenate([x.ravel(), prob.kkt(x, d)[1][1:]])
    sol = _optimize.root(eqs, z0, method="lm", options={"xtol": 1e-15, "ftol": 1e-15, "maxiter": 4000})
    xv = np.clip(sol.x[:nn], 0.0, cap).reshape(n, n)
    xv[xv < 1e-14 * cap.reshape(n, n)] = 0.0
    return xv, prob.b - np.diag(xv)


def _merit(prob: _Problem, x: np.ndarray, d: np.ndarray) -> float:
    """KKT violation, or infinity when balance is broken beyond round-off."""
    bal = float(np.max(np.abs(prob.A @ x.ravel())))
    if bal > 1e-11 * max(1.0, float(np.max(x))):
        return math.inf
    return prob.kkt(x, d)[0]


def _snap_to_cap(prob: _Problem, x: np.ndarray, d: np.ndarray, rel: float = 1e-6):
    x = x.copy()
    d = d.copy()
    for i, mod in enumerate(prob.models):
        if mod.dynamic and d[i] <= rel * prob.b[i]:
            x[i, i] = prob.b[i]
            d[i] = 0.0
    return x, d


def _diag_deficits(prob: _Problem, x: np.ndarray) -> np.ndarray:
    return prob.b - np.diag(x)


def _past_cap(prob: _Problem, x: np.ndarray, d: np.ndarray, n_scan: int = 240):
    """Start below the supply cap for fixed-radius regions stuck against it.

    With fixed radii the reduced gradient of such a region is not monotone in
    log-deficit, so Newton from the cap walks away from the root; a scan down
    to the smallest representable deficit locates its sign change first.
    Returns None when no region qualifies.
    """
    stuck = [i for i, mod in enumerate(prob.models)
             if not mod.dynamic and d[i] <= 2 * EPS_SUPPLY * prob.b[i]]
    if not stuck:
        return None
    nu = prob.kkt(x, d)[1]
    shift = (prob.A.T @ nu).reshape(prob.n, prob.n)
    x, d = x.copy(), d.copy()
    for i in stuck:
        def e(ld):
            dd = d.copy()
            dd[i] = math.exp(ld)
            xx = x.copy()
            xx[i, i] = prob.b[i] - dd[i]
            return prob.gradient(xx, dd)[i, i] + shift[i, i]

        grid = np.linspace(math.log(d[i]), math.log(TINY_DEFICIT), n_scan)
        vals = [e(ld) for ld in grid]
        for k in range(n_scan - 1):
            if vals[k] > 0 >= vals[k + 1]:
                ld = find_root(e, RootBracket(grid[k + 1], grid[k], tol_x=1e-12))
                d[i] = math.exp(ld)
                x[i, i] = prob.b[i] - d[i]
                break
    return x, d


def _local_solve(prob: _Problem, x0: np.ndarray, max_iter: int) -> EquilibriumResult:
    x, gaps = frank_wolfe(prob, x0, max_iter=max_iter)
    d = _diag_deficits(prob, x)
    starts = [(x, d)]
    if _merit(prob, x, d) > 0.1 * KKT_TOL:
        starts.append(_complementarity_solve(prob, x, d))
        below = _past_cap(prob, *starts[-1])
        if below is not None:
            starts.append(below)
    candidates = []
    for xs, ds in starts:
        candidates.append(_polish(prob, xs, ds))
        xc, dc = _snap_to_cap(prob, xs, ds)
        if np.any(dc != ds):
            candidates.append(_polish(prob, xc, dc))
        if _merit(prob, *candidates[-1]) <= 0.1 * KKT_TOL:
            break
    x, d = min(candidates, key=lambda c: _merit(prob, c[0], c[1]))
    res = _make_result(prob, x, d, extras={"fw_iterations": len(gaps),
                                          "fw_gap": gaps[-1] if gaps else float("nan")})
    return res


def feasible_start(network: NetworkModel, rng: np.random.Generator) -> np.ndarray:
    """Random diagonal supply, then the cheapest off-diagonal flows restoring balance."""
    n = network.n
    b = network.demand_rates
    x = np.zeros((n, n))
    x[np.diag_indices(n)] = rng.uniform(0.05, 0.95, n) * b
    if n == 1:
        return x
    r = balance_residual(network, x)
    A = balance_matrix(network)
    off = ~np.eye(n, dtype=bool).ravel()
    lp = LinearProgram(-network.travel_time.ravel()[off], A[:, off], -r)
    res = solve_lp(lp)
    if not res.ok:
        raise ConvergenceError(f"start LP {res.status}")
    x.ravel()[off] = res.x
    return x


def solve_mfg(network: NetworkModel, mode="approx", radii=DYNAMIC, *, x0: np.ndarray | None = None,
              seed: int = 0, max_iter: int = 60, strict: bool = True) -> EquilibriumResult:
    """Maximise the potential from one start; with dynamic radii the maximiser is unique."""
    prob = _Problem(network, sojourn_models(network, mode, radii))
    if x0 is None:
        x0 = feasible_start(network, np.random.default_rng(seed))
    res = _local_solve(prob, x0, max_iter)
    if strict and not res.verified:
        diag = {"kkt_residual": res.kkt_residual, "lambda": res.lam, "best_x": res.x.tolist()}
        saturated = [i for i in range(network.n) if res.deficits[i] <= 1e-6 * prob.b[i]]
        msg = "equilibrium solve did not reach the KKT tolerance"
        if saturated:
            diag["saturated_regions"] = saturated
            msg += f"; regions {saturated} run at full service (surplus drivers would wait there)"
        raise ConvergenceError(msg, diag)
    return res


def find_multiple_kkt(network: NetworkModel, radii=DYNAMIC, n_starts: int = 10, seed: int = 0,
                      mode="approx", max_iter: int = 60) -> list[EquilibriumResult]:
    """Multi-start local ascent; distinct verified KKT points (1e-4 in x), best potential first."""
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    prob = _Problem(network, sojourn_models(network, mode, radii))
    rng = np.random.default_rng(seed)
    found: list[EquilibriumResult] = []
    for _ in range(n_starts):
        x0 = feasible_start(network, rng)
        try:
            res = _local_solve(prob, x0, max_iter)
        except ConvergenceError:
            continue
        if not res.verified:
            continue
        res.objective = prob.potential(res.x, res.deficits)
        for k, other in enumerate(found):
            if np.max(np.abs(other.x - res.x)) <= DEDUP_TOL:
                if res.objective > other.objective:
                    found[k] = res
                break
        else:
            found.append(res)
    found.sort(key=lambda r: -r.objective)
    return found


# ------------------------------------------------------------------- verification


@dataclass(frozen=True)
class BestResponseReport:
    passed: bool
    status: str
    lp_objective: float
    phi: float
    gap: float
    balance_residual: float
    best_response: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {"passed": self.passed, "status": self.status, "lp_objective": self.lp_objective,
                "phi": self.phi, "gap": self.gap, "balance_residual": self.balance_residual}


def verify_best_response(network: NetworkModel, candidate: EquilibriumResult,
                         tol: float = 1e-6) -> BestResponseReport:
    """Solve the representative driver's LP with sojourn times frozen at the candidate."""
    n = network.n
    T = candidate.sojourn_matrix(network)
    A = np.vstack([T.ravel()[None, :], balance_matrix(network)])
    rhs = np.concatenate([[1.0], np.zeros(n)])
    c = np.zeros((n, n))
    c[np.diag_indices(n)] = network.reward_rates * network.trip_times
    res = solve_lp(LinearProgram(c.ravel(), A, rhs))
    phi = average_reward(network, candidate.x)
    bal = float(np.max(np.abs(balance_residual(network, candidate.x))))
    if not res.ok:
        return BestResponseReport(False, res.status, float("nan"), phi, float("nan"), bal)
    gap = res.objective - phi
    # the candidate is feasible for its own LP only if its sojourns conserve mass, so a
    # negative gap flags inconsistent sojourns rather than a better-than-optimal point
    return BestResponseReport(bool(abs(gap) <= tol and bal <= 1e-9), "optimal", res.objective, phi, gap, bal,
                              res.x.reshape(n, n))


def kkt_residual(network: NetworkModel, x: np.ndarray, mode="approx", radii=DYNAMIC,
                 deficits: np.ndarray | None = None) -> float:
    prob = _Problem(network, sojourn_models(network, mode, radii))
    x = np.asarray(x, dtype=float)
    d = prob.b - np.diag(x) if deficits is None else np.asarray(deficits, dtype=float)
    return prob.kkt(x, d)[0]


def potential(network: NetworkModel, x: np.ndarray, mode="approx", radii=DYNAMIC,
              deficits: np.ndarray | None = None) -> float:
    prob = _Problem(network, sojourn_models(network, mode, radii))
    x = np.asarray(x, dtype=float)
    d = prob.b - np.diag(x) if deficits is None else np.asarray(deficits, dtype=float)
    return prob.potential(x, d)


def evaluate_point(network: NetworkModel, x: np.ndarray, mode="approx", radii=DYNAMIC,
                   deficits: np.ndarray | None = None) -> EquilibriumResult:
    """Recompute sojourns, multipliers and all residuals at a given rate matrix."""
    prob = _Problem(network, sojourn_models(network, mode, radii))
    x = np.asarray(x, dtype=float)
    if x.shape != (network.n, network.n):
        raise ValueError(f"rate matrix must be {network.n}x{network.n}")
    d = prob.b - np.diag(x) if deficits is None else np.asarray(deficits, dtype=float)
    return _make_result(prob, x, d, with_objective=True)


# -------------------------------------------------------------------- test networks


def random_network(rng: np.random.Generator, n: int) -> NetworkModel:
    """A random valid network with Table-2-like magnitudes."""
    regions = tuple(
        RegionParams(area=float(rng.uniform(50, 150)), demand_rate=float(rng.uniform(0.5, 3.0)),
                     abandonment_rate=float(rng.uniform(0.5, 2.0)), speed=float(rng.uniform(0.3, 0.8)))
        for _ in range(n))
    q = rng.dirichlet(np.ones(n) * 2.0, size=n)
    t = rng.uniform(10.0, 30.0, size=(n, n))
    t = 0.5 * (t + t.T)
    t[np.diag_indices(n)] = rng.uniform(5.0, 15.0, n)
    net = NetworkModel(regions, q, t, 1.0)
    # a fraction of the mass that would keep every region at full service, so the
    # equilibrium stays inside the supply box
    m = float(rng.uniform(0.3, 0.7) * np.sum(net.demand_rates * net.trip_times))
    return replace(net, total_mass=m)
