"""Numeric kernels: erf, quadrature, bracketed root finding and a small LP solver.

These are thin contracts over scipy. The wrappers pin tolerances, convert
library warnings into exceptions, and report LP duals in the form the
equilibrium checks need.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate as _integrate
from scipy import optimize as _optimize
from scipy import special as _special


class IntegrationError(RuntimeError):
    pass


class RootFindingError(ValueError):
    pass


def erf(y):
    """Error function; float in, float out (arrays are mapped elementwise)."""
    out = _special.erf(y)
    return float(out) if np.ndim(out) == 0 else out


def erf_tail_gap(y):
    """erf(y) - (2/sqrt(pi)) y exp(-y^2), without cancellation for small y.

    Equals the regularised lower incomplete gamma P(3/2, y^2).
    """
    out = _special.gammainc(1.5, np.square(y))
    return float(out) if np.ndim(out) == 0 else out


def integrate(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-10,
              limit: int = 200) -> float:
    """Adaptive quadrature of ``f`` over [lo, hi] to absolute tolerance ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if lo == hi:
        return 0.0
    val, err, info = _integrate.quad(f, lo, hi, epsabs=tol, epsrel=0.0, limit=limit,
                                     full_output=True)[:3]
    if err > tol and info.get("last", 0) >= limit:
        raise IntegrationError(f"max-subdivisions exceeded (estimate {val!r}, error {err:.3g})")
    return float(val)


@dataclass(frozen=True)
class RootBracket:
    lo: float
    hi: float
    tol_x: float = 1e-14
    tol_f: float = 0.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"bracket needs lo < hi (got {self.lo}, {self.hi})")
        if self.tol_x <= 0 or self.tol_f < 0:
            raise ValueError("tolerances must be positive")


def find_root(f: Callable[[float], float], bracket: RootBracket) -> float:
    """Brent's method on a sign-changing bracket."""
    flo, fhi = f(bracket.lo), f(bracket.hi)
    if flo == 0:
        return bracket.lo
    if fhi == 0:
        return bracket.hi
    if np.sign(flo) == np.sign(fhi):
        raise RootFindingError(f"no sign change on [{bracket.lo}, {bracket.hi}] "
                               f"(f = {flo!r}, {fhi!r})")
    return float(_optimize.brentq(f, bracket.lo, bracket.hi, xtol=bracket.tol_x,
                                  rtol=4 * np.finfo(float).eps, maxiter=500))


# ----------------------------------------------------------------------------- LP


@dataclass(frozen=True)
class LinearProgram:
    """maximize c @ x  s.t.  A_eq @ x = b_eq,  lower <= x <= upper.

    ``upper`` may be None (no upper bounds); lower bounds default to 0.
    """

    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    upper: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        A = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        b = np.asarray(self.b_eq, dtype=float).ravel()
        if A.shape != (b.size, c.size):
            raise ValueError(f"inconsistent LP shapes: A {A.shape}, b {b.shape}, c {c.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("b_eq must be finite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "A_eq", A)
        object.__setattr__(self, "b_eq", b)
        if self.upper is not None:
            object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None = None
    objective: float = float("nan")
    duals: np.ndarray | None = None  # multipliers y of A_eq x = b_eq (maximisation sign)
    reduced_costs: np.ndarray | None = None
    primal_residual: float = float("nan")
    complementarity: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def solve_lp(lp: LinearProgram) -> LPResult:
    """Solve a small dense LP with the HiGHS simplex."""
    bounds = [(0.0, None if lp.upper is None else float(u))
              for u in (lp.upper if lp.upper is not None else [None] * lp.c.size)]
    res = _optimize.linprog(-lp.c, A_eq=lp.A_eq, b_eq=lp.b_eq, bounds=bounds,
                            method="highs-ds")
    if res.status == 2:
        return LPResult("infeasible")
    if res.status == 3:
        return LPResult("unbounded")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    x = np.asarray(res.x)
    y = -np.asarray(res.eqlin.marginals)
    # reduced cost of x_j in the max problem: c_j - A_j^T y (<= 0 at an optimum for x_j at 0)
    rc = lp.c - lp.A_eq.T @ y
    at_upper = np.zeros(x.size, dtype=bool)
    if lp.upper is not None:
        at_upper = np.isclose(x, lp.upper)
    comp = np.where(at_upper, 0.0, np.abs(rc * x))
    return LPResult(
        "optimal",
        x=x,
        objective=float(lp.c @ x),
        duals=y,
        reduced_costs=rc,
        primal_residual=float(np.max(np.abs(lp.A_eq @ x - lp.b_eq), initial=0.0)),
        complementarity=float(np.max(comp, initial=0.0)),
    )


def minimax_multipliers(G: np.ndarray, r: np.ndarray, equality: np.ndarray,
                        fixed: int | None = 0, reverse: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Find y minimising the worst violation of ``r + G y``.

    Rows flagged in ``equality`` must vanish, rows flagged in ``reverse`` must be
    >= 0 and the rest must be <= 0. Returns
    (y, s) with s the smallest achievable maximum violation. ``fixed`` pins
    one coordinate of y to zero (a gauge when only differences matter).
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    r = np.asarray(r, dtype=float)
    eq = np.asarray(equality, dtype=bool)
    k, n = G.shape
    rev = np.zeros(k, dtype=bool) if reverse is None else np.asarray(reverse, dtype=bool)
    eq = eq & ~rev
    # variables (y, s); minimise s
    c = np.zeros(n + 1)
    c[-1] = 1.0
    ones = -np.ones((k, 1))
    up = ~rev
    lo = eq | rev
    A_up = np.hstack([G[up], ones[up]])  # r + G y <= s
    A_lo = np.hstack([-G[lo], ones[lo]])  # -(r + G y) <= s
    A_ub = np.vstack([A_up, A_lo])
    b_ub = np.concatenate([-r[up], r[lo]])
    bounds = [(None, None)] * n + [(0.0, None)]
    if fixed is not None:
        bounds[fixed] = (0.0, 0.0)
    res = _optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"multiplier LP failed: {res.message}")
    return np.asarray(res.x[:n]), float(res.x[-1])
