import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfgride.model import (MatchingRadii, NetworkModel, RegionParams, average_reward, balance_residual,
                           mass_distribution, rate_violations, strategy_from_rates, validate)


def two_region():
    regs = [RegionParams(100, 2, 1, 0.5, 1.0), RegionParams(50, 1, 0.5, 0.4, 2.0)]
    return NetworkModel(regs, [[0.7, 0.3], [0.4, 0.6]], [[10, 20], [20, 8]], 10.0)


def test_valid_network_has_no_violations():
    assert validate(two_region()) == []


def test_trip_times_are_demand_weighted():
    net = two_region()
    assert np.allclose(net.trip_times, [0.7 * 10 + 0.3 * 20, 0.4 * 20 + 0.6 * 8])


@given(st.sampled_from(["area", "demand_rate", "abandonment_rate", "speed", "reward_rate"]),
       st.floats(-10, 0))
def test_nonpositive_region_field_is_named(name, value):
    kw = dict(area=1.0, demand_rate=1.0, abandonment_rate=1.0, speed=1.0, reward_rate=1.0)
    kw[name] = value
    net = NetworkModel.single_region(RegionParams(**kw), 10.0, 1.0)
    out = validate(net)
    assert len(out) == 1 and f"regions.0.{name}" in out[0]


def test_matrix_violations():
    regs = two_region().regions
    out = validate(NetworkModel(regs, [[0.7, 0.3], [0.5, 0.6]], [[1, 0], [1, 1]], -1.0))
    text = " ".join(out)
    assert "row 1" in text and "travel_time" in text and "total_mass" in text
    assert validate(NetworkModel(regs, [[1.0]], [[1.0]], 1.0))  # wrong shapes


def test_row_sum_tolerance_is_tight():
    regs = two_region().regions
    q = np.array([[0.7, 0.3 + 1e-11], [0.4, 0.6]])
    assert any("row 0" in v for v in validate(NetworkModel(regs, q, [[1, 1], [1, 1]], 1.0)))


def test_json_round_trip(tmp_path):
    net = NetworkModel(two_region().regions, two_region().demand_matrix, two_region().travel_time, 3.0,
                       {"radii": "dynamic"})
    p = tmp_path / "s.json"
    p.write_text(json.dumps(net.to_dict()))
    back = NetworkModel.load(p)
    assert back.to_dict() == net.to_dict() and back.extras == {"radii": "dynamic"}
    with pytest.raises(KeyError):
        NetworkModel.from_dict({"regions": []})


def stationary_rates(net, supply, rng):
    """Diagonal supply plus repositioning flows that exactly rebalance it."""
    n = net.n
    x = np.diag(supply)
    imbalance = balance_residual(net, x)  # outflow - inflow; negative means a surplus arrives
    # route surplus from regions with inflow excess to regions short of drivers
    for i in range(n):
        for j in range(n):
            if i != j and imbalance[i] < 0 < imbalance[j]:
                f = min(-imbalance[i], imbalance[j])
                x[i, j] += f
                imbalance[i] += f
                imbalance[j] -= f
    return x


@given(st.integers(0, 2 ** 32 - 1))
def test_balance_residual_zero_for_rebalanced_flows(seed):
    rng = np.random.default_rng(seed)
    n = 3
    regs = [RegionParams(1, 1, 1, 1)] * n
    q = rng.dirichlet(np.ones(n), size=n)
    net = NetworkModel(regs, q, np.ones((n, n)), 1.0)
    x = stationary_rates(net, rng.uniform(0.1, 0.9, n), rng)
    assert np.max(np.abs(balance_residual(net, x))) < 1e-12
    pi = strategy_from_rates(x)
    assert np.allclose(pi.sum(axis=1), 1.0)


def test_rates_helpers():
    net = two_region()
    x = np.array([[1.0, 0.2], [0.0, 0.5]])
    assert rate_violations(net, x) == []
    assert rate_violations(net, np.array([[2.0, 0], [0, 0.5]]))
    assert rate_violations(net, -x)
    assert np.allclose(strategy_from_rates(np.zeros((2, 2))), 0.0)
    T = np.array([[20.0, 20.0], [20.0, 15.0]])
    assert np.allclose(mass_distribution(x, T), x * T)
    expected = (1.0 * 1.0 * net.trip_times[0] + 0.5 * 2.0 * net.trip_times[1]) / 10.0
    assert average_reward(net, x) == pytest.approx(expected)


def test_matching_radii_and_max_radius():
    r = MatchingRadii.equal(1.5)
    assert r.customer == r.driver == 1.5
    assert RegionParams(np.pi, 1, 1, 1).max_radius == pytest.approx(1.0)
