import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from itertools import combinations

from mfgride.special_math import (IntegrationError, LinearProgram, RootBracket, RootFindingError, erf,
                                  erf_tail_gap, find_root, integrate, minimax_multipliers, solve_lp)

mpmath.mp.dps = 40


@given(st.floats(-6, 6, allow_nan=False))
def test_erf_matches_mpmath(y):
    assert erf(y) == pytest.approx(float(mpmath.erf(y)), rel=1e-14, abs=1e-300)


@given(st.floats(1e-8, 8.0))
def test_tail_gap_matches_high_precision_difference(y):
    ref = mpmath.erf(y) - 2 / mpmath.sqrt(mpmath.pi) * y * mpmath.exp(-y * y)
    assert erf_tail_gap(y) == pytest.approx(float(ref), rel=1e-12)


def test_tail_gap_vectorised():
    ys = np.array([1e-4, 0.5, 3.0])
    assert np.allclose(erf_tail_gap(ys), [erf_tail_gap(float(y)) for y in ys], rtol=0, atol=0)


@pytest.mark.parametrize("y", [0.5, 3.0, 100.0, 1e4])
def test_integrate_beta_integral(y):
    # int_0^1 (1 - s^2)^y ds = B(1/2, y + 1) / 2
    ref = float(mpmath.beta(0.5, y + 1) / 2)
    assert integrate(lambda s: (1 - s * s) ** y, 0.0, 1.0, tol=1e-13) == pytest.approx(ref, rel=1e-9)


def test_integrate_reports_subdivision_exhaustion():
    with pytest.raises(IntegrationError, match="max-subdivisions"):
        integrate(lambda s: math.sin(1e4 * s) * s, 0.0, 10.0, tol=1e-14, limit=5)


def test_integrate_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        integrate(math.exp, 0.0, 1.0, tol=0.0)


def test_find_root_and_missing_sign_change():
    r = find_root(lambda x: math.cos(x) - x, RootBracket(0.0, 1.0))
    assert r == pytest.approx(0.7390851332151607, abs=1e-13)
    with pytest.raises(RootFindingError, match="no sign change"):
        find_root(lambda x: x * x + 1, RootBracket(-1.0, 1.0))


def vertex_oracle(c, A, b):
    """Best basic feasible solution of max c x, A x = b, x >= 0 by enumeration."""
    m, n = A.shape
    best = -math.inf
    for cols in combinations(range(n), m):
        B = A[:, cols]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xb = np.linalg.solve(B, b)
        if np.all(xb >= -1e-12):
            best = max(best, float(c[list(cols)] @ xb))
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 8), st.integers(1, 3))
def test_lp_matches_vertex_enumeration(seed, n, m):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n))
    A[0] = rng.uniform(0.5, 1.5, n)  # positive row keeps the polytope bounded
    x_feas = rng.uniform(0.1, 1.0, n)
    b = A @ x_feas
    c = rng.normal(size=n)
    res = solve_lp(LinearProgram(c, A, b))
    assert res.ok
    assert res.objective == pytest.approx(vertex_oracle(c, A, b), rel=1e-8, abs=1e-9)
    # strong duality and dual feasibility of the reported multipliers
    assert float(b @ res.duals) == pytest.approx(res.objective, rel=1e-7, abs=1e-8)
    assert np.all(res.reduced_costs <= 1e-8)


def test_lp_infeasible_and_unbounded():
    assert solve_lp(LinearProgram([1.0, 1.0], [[1.0, 1.0]], [-1.0])).status == "infeasible"
    assert solve_lp(LinearProgram([1.0, 0.0], [[1.0, -1.0]], [0.0])).status == "unbounded"
    with pytest.raises(ValueError):
        LinearProgram([1.0], [[1.0, 2.0]], [1.0])


def test_minimax_multipliers_exact_and_gauge():
    rng = np.random.default_rng(0)
    r = rng.normal(size=4)
    y, s = minimax_multipliers(np.eye(4), r, np.ones(4, bool), fixed=None)
    assert s == pytest.approx(0.0, abs=1e-12) and np.allclose(y, -r)
    y, s = minimax_multipliers(np.eye(4), r, np.ones(4, bool), fixed=0)
    assert y[0] == 0.0 and s == pytest.approx(abs(r[0]))
    # one-sided rows: r + y <= s is satisfiable with s = 0 by any small y
    y, s = minimax_multipliers(np.eye(2), np.array([1.0, -1.0]), np.zeros(2, bool), fixed=None)
    assert s == pytest.approx(0.0, abs=1e-12) and y[0] <= -1 + 1e-12
    # reverse rows are one-sided the other way: r + G y >= -s; the pinned row forces s = 2
    y, s = minimax_multipliers(np.eye(2), np.array([-1.0, 2.0]), np.zeros(2, bool), fixed=1,
                               reverse=np.array([True, False]))
    assert s == pytest.approx(2.0) and -1.0 + y[0] >= -s - 1e-12
