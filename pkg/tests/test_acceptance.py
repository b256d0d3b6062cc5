"""Acceptance checks, one test per criterion. Each prints a single PASS/FAIL line
(shown even under output capture) before asserting.

Criterion 1 is checked exactly as stated and fails: the stated threshold
1/3 + 20 is not where the oversupply branch appears (see the ledger). The
companion test below checks the regime counts at the derived threshold.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate as sp_integrate

from mfgride.equilibrium import (DYNAMIC, count_roots, find_multiple_kkt, poa_probe,
                                 random_network, single_region_equilibria, solve_mfg, sqrt_equilibrium_result,
                                 sqrt_regime_classify, sqrt_threshold, supply_curve, verify_best_response)
from mfgride.model import MatchingRadii, NetworkModel, RegionParams
from mfgride.radius_opt import (monotonicity_certificate, optimal_radius, optimal_sojourn,
                                optimal_sojourn_derivative)
from mfgride.simulator import SimConfig, replicate, replication_seeds, table3_policies
from mfgride.timing import (approx_total, pickup_time_approx, pickup_time_exact, pickup_time_exact_from_densities,
                            sqrt_law_pickup, waiting_time_approx, waiting_time_exact)

TABLE2 = RegionParams(area=100.0, demand_rate=2.0, abandonment_rate=1.0, speed=0.5)
T_TRIP = 10.0


@pytest.fixture
def report(capsys):
    def emit(n, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return emit


def test_c01_regime_threshold_as_stated(report):
    t0 = time.perf_counter()
    stated = 1 / 3 + 20
    m_star = sqrt_threshold(TABLE2, T_TRIP)
    counts = [sqrt_regime_classify(TABLE2, T_TRIP, m).case for m in (15.0, stated, 25.0)]
    elapsed = time.perf_counter() - t0
    ok = abs(m_star - stated) <= 1e-9 and counts == [1, 2, 3] and elapsed < 1
    report(1, ok, f"threshold={m_star:.6f} (stated {stated:.6f}); counts at m=15,{stated:.4f},25: {counts}; "
                  f"{elapsed:.3f}s")
    assert ok


def test_regime_counts_at_derived_threshold():
    m_star = sqrt_threshold(TABLE2, T_TRIP)
    assert m_star == pytest.approx(23.0)
    counts = [sqrt_regime_classify(TABLE2, T_TRIP, m).case for m in (15.0, m_star, m_star + 1e-7, 25.0)]
    assert counts == [1, 2, 2, 3]
    assert sqrt_regime_classify(TABLE2, T_TRIP, m_star - 2e-6).case == 1


def test_c02_poa_limit(report):
    t0 = time.perf_counter()
    r = poa_probe(TABLE2, T_TRIP, [10.0 ** k for k in range(7)])
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(np.diff(r) < 0) and r[-1] < 0.05 and elapsed < 1)
    report(2, ok, f"x_u/x_o = {np.array2string(r, precision=4)}; {elapsed:.3f}s")
    assert ok


def test_c03_fig2_multiple_roots(report):
    t0 = time.perf_counter()
    b = TABLE2.demand_rate
    notes, ok = [], True
    for R in (1, 2, 3, 4):
        curve = supply_curve(TABLE2, float(R), T_TRIP, "exact")
        non_mono = bool(np.any(np.diff(curve.m) < 0))
        levels = np.linspace(curve.m.min(), curve.m.max(), 402)[1:-1]
        three = levels[[count_roots(curve, m) == 3 for m in levels]]
        gaps = []
        for m in three[np.unique(np.linspace(0, len(three) - 1, 15).round().astype(int))] if len(three) else []:
            roots = single_region_equilibria(TABLE2, float(R), T_TRIP, float(m), "exact", curve=curve)
            if len(roots) == 3:
                gaps.append((b - min(float(r.x[0, 0]) for r in roots)) / b)
        in_band = [g for g in gaps if 0.03 <= g <= 0.12]
        strict = [g for g in gaps if 0.05 <= g <= 0.10]
        if R > 1:
            ok &= non_mono and bool(in_band)
        notes.append(f"R={R}: non-monotone={non_mono} 3-root levels={len(three)} "
                     f"max gap={100 * max(gaps, default=0):.1f}% strict-band hit={bool(strict)}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    report(3, ok, "; ".join(notes) + f"; {elapsed:.1f}s")
    assert ok


def test_c04_optimal_radius_vs_grid(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    g = np.arange(1, 1001) * 0.005
    RC, RD = np.meshgrid(g, g, indexing="ij")
    worst_r = worst_f = 0.0
    beaten = 0
    for _ in range(100):
        reg = RegionParams(100.0, rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.0), rng.uniform(0.3, 0.8))
        x = rng.uniform(0.05, 0.95) * reg.demand_rate
        opt = optimal_radius(reg, x)
        F = approx_total(reg, x, RC, RD)
        i = np.unravel_index(np.argmin(F), F.shape)
        worst_r = max(worst_r, abs(RC[i] - opt.R_star), abs(RD[i] - opt.R_star))
        worst_f = max(worst_f, abs(F[i] - opt.f_value))
        beaten += int(F[i] < opt.f_value - 1e-12)
    elapsed = time.perf_counter() - t0
    ok = worst_r <= 0.01 and worst_f <= 1e-3 and beaten == 0 and elapsed < 300
    report(4, ok, f"max |R_grid - R*| = {worst_r:.4f} km, max objective gap = {worst_f:.2e} min, "
                  f"grid beats root {beaten}/100; {elapsed:.1f}s")
    assert ok


def test_c05_monotone_optimal_sojourn(report):
    t0 = time.perf_counter()
    ok, notes = True, []
    for b in (1.0, 2.0, 3.0):
        reg = RegionParams(100.0, b, 1.0, 0.5)
        cert = monotonicity_certificate(reg, 1000)
        h = 1e-6 * b
        fd = np.array([(optimal_sojourn(reg, x + h) - optimal_sojourn(reg, x - h)) / (2 * h) for x in cert.grid])
        der = np.array([optimal_sojourn_derivative(reg, x) for x in cert.grid])
        rel = float(np.max(np.abs(der / fd - 1)))
        m_dyn = cert.grid * (cert.values + T_TRIP)
        dominated = True
        for R in (1, 2, 3, 4, 5):
            f_R = approx_total(reg, cert.grid, float(R), float(R))
            dominated &= bool(np.all(m_dyn <= cert.grid * (f_R + T_TRIP) + 1e-12))
        ok &= cert.passed and rel <= 1e-4 and dominated
        notes.append(f"b={b:g}: min diff={cert.min_forward_difference:.2e} min f'={cert.min_derivative:.3g} "
                     f"FD rel err={rel:.1e} dominates={dominated}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    report(5, ok, "; ".join(notes) + f"; {elapsed:.1f}s")
    assert ok


def _closure(net, res, tol=1e-6):
    br = verify_best_response(net, res)
    checks = (res.balance_residual <= 1e-9, res.conservation_residual <= tol, res.kkt_residual <= tol,
              abs(res.lam - 1) <= tol, br.status == "optimal" and abs(br.gap) <= tol)
    return all(checks), max(res.kkt_residual, abs(res.lam - 1), res.conservation_residual, abs(br.gap))


def test_c06_kkt_closure(report):
    worst, slowest, n_eq, failures = 0.0, 0.0, 0, []

    def check(label, net, fn):
        nonlocal worst, slowest, n_eq
        t0 = time.perf_counter()
        results = fn()
        slowest = max(slowest, time.perf_counter() - t0)
        for r in results:
            ok, w = _closure(net, r)
            worst = max(worst, w)
            n_eq += 1
            if not ok:
                failures.append(label)
        return results

    agree = 0.0
    for mode in ("approx", "exact"):
        for R in (2.0, 3.0, 4.0):
            for m in (15.0, 23.5, 25.0):
                net = NetworkModel.single_region(TABLE2, T_TRIP, m)
                roots = check(f"fixed {mode} R={R} m={m}", net,
                              lambda: single_region_equilibria(TABLE2, R, T_TRIP, m, mode))
                one = check(f"solve_mfg {mode} R={R} m={m}", net, lambda: [solve_mfg(net, mode, R)])[0]
                agree = max(agree, min(abs(one.x[0, 0] - r.x[0, 0]) for r in roots))
    for m in (5.0, 15.0, 23.5, 30.0):
        net = NetworkModel.single_region(TABLE2, T_TRIP, m)
        roots = check(f"dynamic m={m}", net, lambda: single_region_equilibria(TABLE2, DYNAMIC, T_TRIP, m))
        one = check(f"solve_mfg dynamic m={m}", net, lambda: [solve_mfg(net)])[0]
        agree = max(agree, abs(one.x[0, 0] - roots[0].x[0, 0]))
    for m in (15.0, 23.0, 25.0):
        net = NetworkModel.single_region(TABLE2, T_TRIP, m)
        check(f"sqrt m={m}", net, lambda: [sqrt_equilibrium_result(TABLE2, T_TRIP, m, x, mu)
                                           for x, mu in sqrt_regime_classify(TABLE2, T_TRIP, m).equilibria])
    rng = np.random.default_rng(606)
    for k in range(6):
        net = random_network(rng, int(rng.integers(2, 6)))
        check(f"network {k} dynamic", net, lambda: [solve_mfg(net, seed=k)])
        check(f"network {k} R=2", net, lambda: find_multiple_kkt(net, 2.0, n_starts=4, seed=k))
    ok = not failures and agree <= 1e-5 and slowest < 10
    report(6, ok, f"{n_eq} equilibria, worst residual {worst:.1e}, single-region path disagreement {agree:.1e}, "
                  f"slowest instance {slowest:.2f}s" + (f", failures: {failures}" if failures else ""))
    assert ok


def test_c07_uniqueness_under_dynamic_radii(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    counts = []
    for k in range(50):
        net = random_network(rng, int(rng.integers(2, 6)))
        counts.append(len(find_multiple_kkt(net, DYNAMIC, n_starts=20, seed=k)))
    elapsed = time.perf_counter() - t0
    ok = all(c == 1 for c in counts) and elapsed < 600
    hist = dict(zip(*[a.tolist() for a in np.unique(counts, return_counts=True)]))
    report(7, ok, f"deduped KKT points per network: {hist}; {elapsed:.1f}s")
    assert ok


def test_c08_table3(report):
    t0 = time.perf_counter()
    seeds = replication_seeds(0, 10)
    agg = {}
    for cfg in table3_policies(SimConfig()):
        agg[cfg.label] = replicate(cfg, 10, seeds)[1].mean
    elapsed = time.perf_counter() - t0
    fixed = {k: v for k, v in agg.items() if k != "dynamic"}
    dyn = agg["dynamic"]
    c05 = fixed["0.5"]["completion_rate"]
    checks = {
        "R=0.5 completion": abs(c05 - 0.591) <= 0.04,
        "dynamic completion": abs(dyn["completion_rate"] - 0.870) <= 0.03,
        "dynamic >= fixed - 0.01": all(dyn["completion_rate"] >= v["completion_rate"] - 0.01 for v in fixed.values()),
        "dynamic customer wait": dyn["customer_wait"] <= 1.27 + 0.3,
        "runtime": elapsed < 900,
    }
    ok = all(checks.values())
    with_table = "; ".join(f"{k}: compl {v['completion_rate']:.3f} wait {v['customer_wait']:.2f} "
                           f"pickup {v['pickup_time']:.2f}" for k, v in agg.items())
    report(8, ok, f"{ {k: bool(v) for k, v in checks.items()} }; {elapsed:.0f}s\n    {with_table}")
    assert ok


def test_c09_square_root_asymptotics(report):
    t0 = time.perf_counter()
    errs = {}
    for y, tol in ((100.0, 5e-3), (1e4, 5e-4)):
        val = sp_integrate.quad(lambda s: (1 - s * s) ** y, 0, 1, epsabs=0, epsrel=1e-12, limit=200)[0]
        errs[y] = (abs(val / (math.sqrt(math.pi) / (2 * math.sqrt(y))) - 1), tol)
    R = TABLE2.max_radius * (1 - 1e-12)
    law = []
    for mu in (5.0, 50.0):
        over = pickup_time_exact_from_densities(TABLE2, TABLE2.demand_rate, 0.0, mu, MatchingRadii.equal(R))
        under = pickup_time_exact_from_densities(TABLE2, 1.0, mu, 0.0, MatchingRadii.equal(R))
        ref = sqrt_law_pickup(TABLE2, mu)
        law += [abs(over / ref - 1), abs(under / ref - 1)]
    elapsed = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in errs.values()) and max(law) <= 0.01 and elapsed < 10
    report(9, ok, f"quadrature rel err y=100: {errs[100.0][0]:.2e}, y=1e4: {errs[1e4][0]:.2e}; "
                  f"pickup vs square-root law max rel err {max(law):.2e}; {elapsed:.2f}s")
    assert ok


def test_c10_exact_vs_approx(report):
    t0 = time.perf_counter()
    b = TABLE2.demand_rate
    r_max = math.sqrt(0.01 * TABLE2.area / math.pi)
    worst_w = worst_t = 0.0
    for R in (0.1, 0.25, 0.4, r_max):
        radii = MatchingRadii.equal(R)
        for x in np.linspace(0.05 * b, 0.95 * b, 50):
            worst_w = max(worst_w, abs(waiting_time_exact(TABLE2, x, radii) / waiting_time_approx(TABLE2, x, radii) - 1))
            worst_t = max(worst_t, abs(pickup_time_exact(TABLE2, x, radii) / pickup_time_approx(TABLE2, x, radii) - 1))
    elapsed = time.perf_counter() - t0
    ok = worst_w < 0.02 and worst_t < 0.02 and elapsed < 10
    report(10, ok, f"max rel diff w {100 * worst_w:.2f}%, tau {100 * worst_t:.2f}% for pi R^2/a <= 0.01; "
                   f"{elapsed:.2f}s")
    assert ok
