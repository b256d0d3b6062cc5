import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgride.equilibrium import (DYNAMIC, EquilibriumResult, balance_matrix, evaluate_point,
                                 feasible_start, find_multiple_kkt, kkt_residual, oversupply_densities,
                                 poa_probe, potential, random_network, single_region_equilibria, solve_mfg,
                                 sqrt_regime_classify, sqrt_threshold, undersupply_rate, verify_best_response)
from mfgride.model import MatchingRadii, NetworkModel, balance_residual, validate
from mfgride.timing import pickup_time_approx, waiting_time_approx


def assert_equilibrium(net, res):
    assert res.verified, (res.kkt_residual, res.lam, res.conservation_residual, res.balance_residual)
    br = verify_best_response(net, res)
    assert br.passed, br


def test_fixed_radius_three_roots(table2_region):
    reg, t, m = table2_region, 10.0, 23.5
    roots = single_region_equilibria(reg, 2.0, t, m)
    assert len(roots) == 3
    net = NetworkModel.single_region(reg, t, m)
    radii = MatchingRadii.equal(2.0)
    for r in roots:
        x, d = float(r.x[0, 0]), float(r.deficits[0])
        w = waiting_time_approx(reg, x, radii, deficit=d)
        tau = pickup_time_approx(reg, x, radii, deficit=d)
        assert x * (w + tau + t) == pytest.approx(m, rel=1e-9)
        assert_equilibrium(net, r)
    # ordered from most to least undersupplied
    assert [float(r.deficits[0]) for r in roots] == sorted((float(r.deficits[0]) for r in roots), reverse=True)
    assert len(single_region_equilibria(reg, 2.0, t, 15.0)) == 1
    with pytest.raises(ValueError):
        single_region_equilibria(reg, 2.0, t, 0.0)


@pytest.mark.parametrize("m", [5.0, 15.0, 22.0, 23.5, 30.0])
def test_single_region_paths_agree_under_dynamic_radii(table2_region, m):
    net = NetworkModel.single_region(table2_region, 10.0, m)
    roots = single_region_equilibria(table2_region, DYNAMIC, 10.0, m)
    assert len(roots) == 1
    res = solve_mfg(net)
    assert abs(res.x[0, 0] - roots[0].x[0, 0]) <= 1e-5
    assert abs(res.sojourns[0].total - roots[0].sojourns[0].total) <= 1e-5
    assert_equilibrium(net, res)
    assert_equilibrium(net, roots[0])
    if m > sqrt_threshold(table2_region, 10.0):
        assert res.region_tags == ["oversupply"]


def test_square_root_law_regime(table2_region):
    reg, t = table2_region, 10.0
    b, v, th = reg.demand_rate, reg.speed, reg.abandonment_rate
    m_star = sqrt_threshold(reg, t)
    assert m_star == pytest.approx(3 * (b / (4 * v)) ** (2 / 3) + b * t)
    for m in (24.0, 40.0):
        for mu in oversupply_densities(reg, t, m):
            assert mu + b / (2 * v * math.sqrt(mu)) + b * t == pytest.approx(m, rel=1e-12)
    assert oversupply_densities(reg, t, 20.0) == []
    for m in (5.0, 23.0, 40.0):
        x = undersupply_rate(reg, t, m)
        assert x * (1 / (2 * v * math.sqrt((b - x) / th)) + t) == pytest.approx(m, rel=1e-10)
    assert [sqrt_regime_classify(reg, t, m).case for m in (15.0, m_star, m_star + 5e-7, 25.0)] == [1, 2, 2, 3]
    assert sqrt_regime_classify(reg, t, 23.0).to_dict()["case"] == 2


def test_poa_decreasing(table2_region):
    r = poa_probe(table2_region, 10.0, [10.0 ** k for k in range(7)])
    assert np.all(np.diff(r) < 0) and r[-1] < 0.05 and r[0] < 1


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_balance_matrix_matches_residual(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    x = rng.uniform(0, 1, (n, n))
    assert np.allclose(balance_matrix(net) @ x.ravel(), balance_residual(net, x), atol=1e-13)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4))
def test_random_networks_and_starts_are_valid(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    assert validate(net) == []
    x0 = feasible_start(net, rng)
    assert np.all(x0 >= 0)
    assert np.max(np.abs(balance_residual(net, x0))) < 1e-12
    assert np.all(np.diag(x0) < net.demand_rates)


def test_multi_region_dynamic(three_region):
    net = three_region
    res = solve_mfg(net)
    assert_equilibrium(net, res)
    again = evaluate_point(net, res.x, deficits=res.deficits)
    assert again.kkt_residual == pytest.approx(res.kkt_residual, abs=1e-9)
    assert np.allclose(again.mu.sum(), net.total_mass, rtol=1e-6)
    back = EquilibriumResult.from_dict(res.to_dict())
    assert np.array_equal(back.x, res.x) and back.lam == res.lam
    pts = find_multiple_kkt(net, n_starts=4, seed=1)
    assert len(pts) == 1 and np.max(np.abs(pts[0].x - res.x)) < 1e-4
    # the maximiser beats its feasible start
    x0 = feasible_start(net, np.random.default_rng(0))
    assert potential(net, res.x, deficits=res.deficits) >= potential(net, x0)
    assert kkt_residual(net, x0) > 1e-3


def test_multi_region_fixed_radius(three_region):
    pts = find_multiple_kkt(three_region, 2.0, n_starts=4, seed=0)
    assert pts
    for p in pts:
        assert_equilibrium(three_region, p)


def lp_vertex_best(c, A, b):
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


def test_best_response_lp_matches_vertex_enumeration():
    net = random_network(np.random.default_rng(5), 2)
    res = solve_mfg(net)
    br = verify_best_response(net, res)
    T = res.sojourn_matrix(net)
    A = np.vstack([T.ravel()[None, :], balance_matrix(net)])
    c = np.zeros((2, 2))
    c[np.diag_indices(2)] = net.reward_rates * net.trip_times
    # balance rows are linearly dependent; drop one for the basis enumeration
    oracle = lp_vertex_best(c.ravel(), A[:-1], np.array([1.0, 0.0]))
    assert br.lp_objective == pytest.approx(oracle, rel=1e-9)
    assert br.gap == pytest.approx(0.0, abs=1e-6)


def test_best_response_rejects_perturbed_candidate(three_region):
    res = solve_mfg(three_region)
    bad = EquilibriumResult.from_dict(res.to_dict())
    bad.x = bad.x.copy()
    bad.x[0, 0] *= 1.01
    assert not verify_best_response(three_region, bad).passed
    worse = EquilibriumResult.from_dict(res.to_dict())
    worse.sojourns[1] = type(worse.sojourns[1])(worse.sojourns[1].waiting + 1.0, worse.sojourns[1].pickup,
                                               worse.sojourns[1].trip)
    rep = verify_best_response(three_region, worse)
    # frozen sojourns no longer conserve mass: the LP optimum falls below the claimed reward
    assert rep.gap < -1e-4 and not rep.passed
