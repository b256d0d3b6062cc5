"""Batch front door: scenario JSON in, plot-ready CSV/JSON out.

    python -m mfgride solve --scenario scenarios/table2.json --out out/
    python -m mfgride sweep-fig2 --scenario scenarios/table2.json --out out/
    python -m mfgride simulate --scenario scenarios/table3.json --reps 10 --out out/

Exit codes: 0 ok, 2 validation, 3 convergence or failed verification, 4 I/O.
Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .equilibrium import (DYNAMIC, ConvergenceError, EquilibriumResult, SojournModel, count_roots,
                          evaluate_point, find_multiple_kkt, poa_probe, single_region_equilibria,
                          solve_mfg, sqrt_equilibrium_result, sqrt_regime_classify, sqrt_threshold,
                          supply_curve, undersupply_rate, verify_best_response)
from .model import MatchingRadii, NetworkModel, validate
from .simulator import TABLE3_COLUMNS, SimConfig, replicate, replication_seeds, table3_policies
from .timing import FormulaMode

COMMANDS = ("solve", "sweep-fig2", "sweep-fig3", "regime", "poa", "simulate", "verify")
EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4
FIG2_POINTS = 2000
FIG3_POINTS = 1000


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, details: dict | None = None):
        super().__init__(message)
        self.code, self.kind, self.details = code, kind, details or {}


@dataclass
class ExperimentSpec:
    command: str
    scenario: Path | None
    out: Path
    seed: int = 0
    reps: int = 10
    mode: str | None = None
    overrides: list[str] = field(default_factory=list)
    result: Path | None = None
    workers: int = 1
    starts: int = 10

    def violations(self) -> list[str]:
        out = []
        if self.command not in COMMANDS:
            out.append(f"unknown command {self.command!r}")
        if self.command != "verify" and self.scenario is None:
            out.append("--scenario is required")
        if self.command == "verify" and self.result is None:
            out.append("--result is required for verify")
        if not 0 <= self.seed < 2 ** 64:
            out.append("--seed must be an unsigned 64-bit integer")
        if self.reps < 1:
            out.append("--reps must be at least 1")
        if self.starts < 1:
            out.append("--starts must be at least 1")
        if self.mode is not None:
            try:
                FormulaMode.parse(self.mode)
            except ValueError:
                out.append(f"unknown mode {self.mode!r}")
        return out


# ------------------------------------------------------------------ scenario handling


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """Set a dotted-path key in place, e.g. ``regions.0.demand_rate=3``."""
    if "=" not in assignment:
        raise CliError(EXIT_VALIDATION, "validation", f"override {assignment!r} is not KEY=VALUE")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node: Any = raw
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise CliError(EXIT_VALIDATION, "validation", f"bad list index {part!r} in {key!r}")
            if last:
                node[idx] = _parse_value(value)
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = _parse_value(value)
            elif part not in node:
                raise CliError(EXIT_VALIDATION, "validation", f"override path {key!r}: no key {part!r}")
            else:
                node = node[part]
        else:
            raise CliError(EXIT_VALIDATION, "validation", f"override path {key!r} descends into a scalar")


def load_scenario(path: Path, overrides: Sequence[str]) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_IO, "io", f"scenario file not found: {path}")
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read scenario: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_VALIDATION, "validation", f"scenario is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise CliError(EXIT_VALIDATION, "validation", "scenario must be a JSON object")
    for ov in overrides:
        apply_override(raw, ov)
    return raw


def scenario_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]


def build_network(raw: dict) -> NetworkModel:
    try:
        net = NetworkModel.from_dict({k: v for k, v in raw.items() if k != "simulation"})
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, "validation", f"bad network scenario: {exc}")
    problems = validate(net)
    if problems:
        raise CliError(EXIT_VALIDATION, "validation", "scenario violates model invariants",
                       {"violations": problems})
    return net


def build_sim_config(raw: dict) -> SimConfig:
    if "simulation" not in raw:
        raise CliError(EXIT_VALIDATION, "validation", "scenario has no 'simulation' block")
    try:
        cfg = SimConfig.from_dict(raw["simulation"])
    except (KeyError, TypeError) as exc:
        raise CliError(EXIT_VALIDATION, "validation", f"bad simulation block: {exc}")
    problems = cfg.violations()
    if problems:
        raise CliError(EXIT_VALIDATION, "validation", "simulation config is invalid", {"violations": problems})
    return cfg


def scenario_radii(raw: dict, n: int):
    """The ``radii`` entry: "dynamic", one radius, [R_c, R_d], or a per-region list of those."""
    r = raw.get("radii", DYNAMIC)
    try:
        if r == DYNAMIC or isinstance(r, (int, float)):
            return r
        if isinstance(r, list) and len(r) == 2 and all(isinstance(v, (int, float)) for v in r) and n != 2:
            return MatchingRadii(float(r[0]), float(r[1]))
        if isinstance(r, list) and len(r) == n:
            return [v if v == DYNAMIC or isinstance(v, (int, float)) else MatchingRadii(*map(float, v))
                    for v in r]
    except (TypeError, ValueError):
        pass
    raise CliError(EXIT_VALIDATION, "validation", f"cannot interpret radii {r!r}")


def _mode(spec: ExperimentSpec, raw: dict, default: str) -> FormulaMode:
    text = spec.mode or raw.get("mode", default)
    try:
        return FormulaMode.parse(text)
    except ValueError:
        raise CliError(EXIT_VALIDATION, "validation", f"unknown mode {text!r}")


# ---------------------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Provenance:
    command: str
    scenario_hash: str
    seed: int
    mode: str = ""

    def line(self) -> str:
        s = f"# mfgride {__version__} command={self.command} scenario_sha256={self.scenario_hash} seed={self.seed}"
        return s + (f" mode={self.mode}" if self.mode else "")

    def to_dict(self) -> dict:
        return {"tool": "mfgride", "version": __version__, "command": self.command,
                "scenario_sha256": self.scenario_hash, "seed": self.seed, "mode": self.mode}


def write_csv(path: Path, prov: Provenance, header: Sequence[str], rows) -> Path:
    buf = io.StringIO()
    buf.write(prov.line() + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())
    return path


def write_json(path: Path, prov: Provenance, payload: dict) -> Path:
    body = {"provenance": prov.to_dict(), **payload}
    atomic_write(path, json.dumps(_jsonable(body), indent=2, sort_keys=False) + "\n")
    return path


def read_csv(path: Path) -> tuple[str, list[str], list[list[str]]]:
    """Inverse of write_csv: (provenance line, header, rows as strings)."""
    with open(path, newline="") as fh:
        prov = fh.readline().rstrip("\n")
        rows = list(csv.reader(fh))
    return prov, rows[0], rows[1:]


# -------------------------------------------------------------------------- commands


def _result_payload(net: NetworkModel, res: EquilibriumResult) -> dict:
    br = verify_best_response(net, res)
    d = res.to_dict()
    d["best_response"] = br.to_dict()
    d["passed"] = bool(res.verified and br.passed)
    return d


def cmd_solve(spec: ExperimentSpec, raw: dict) -> tuple[int, list[Path]]:
    net = build_network(raw)
    mode = _mode(spec, raw, "approx")
    radii = scenario_radii(raw, net.n)
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed, mode.value)
    if net.n == 1 and mode is FormulaMode.SQRT_LAW:
        region, t = net.regions[0], float(net.trip_times[0])
        rep = sqrt_regime_classify(region, t, net.total_mass)
        results = [sqrt_equilibrium_result(region, t, net.total_mass, x, mu) for x, mu in rep.equilibria]
        solver = "sqrt_regime_classify"
    elif net.n == 1:
        results = single_region_equilibria(net.regions[0], radii if not isinstance(radii, list) else radii[0],
                                           float(net.trip_times[0]), net.total_mass, mode, with_objective=True)
        solver = "single_region_equilibria"
    elif radii == DYNAMIC:
        results = [solve_mfg(net, mode, radii, seed=spec.seed)]
        solver = "solve_mfg"
    else:
        results = find_multiple_kkt(net, radii, n_starts=spec.starts, seed=spec.seed, mode=mode)
        solver = "find_multiple_kkt"
        if not results:
            raise ConvergenceError("no start reached a verified KKT point", {"starts": spec.starts})
    payload = {"scenario": raw, "mode": mode.value, "radii": raw.get("radii", DYNAMIC), "solver": solver,
               "equilibria": [_result_payload(net, r) for r in results]}
    path = write_json(spec.out / "equilibria.json", prov, payload)
    ok = all(e["passed"] for e in payload["equilibria"])
    return (EXIT_OK if ok else EXIT_CONVERGENCE), [path]


def fig2_grid(b: float, n: int = FIG2_POINTS) -> np.ndarray:
    return b * np.arange(1, n + 1) / (n + 1)


def supply_mass(mod: SojournModel, t_trip: float, x: np.ndarray) -> np.ndarray:
    b = mod.region.demand_rate
    return np.array([xi * (mod.f(xi, b - xi) + t_trip) for xi in x])


def three_root_band(curve, n_levels: int = 400) -> np.ndarray:
    """m-levels with exactly three crossings of the (log-tail refined) supply curve."""
    levels = np.linspace(curve.m.min(), curve.m.max(), n_levels + 2)[1:-1]
    return np.array([m for m in levels if count_roots(curve, m) == 3])


def smallest_root_gaps(region, R: float, t: float, mode, curve, levels: np.ndarray,
                       n_probe: int = 25) -> list[tuple[float, float]]:
    """(m, (b - x_min)/b) at up to ``n_probe`` three-root levels."""
    b = region.demand_rate
    picks = levels[np.unique(np.linspace(0, len(levels) - 1, n_probe).round().astype(int))]
    out = []
    for m in picks:
        roots = single_region_equilibria(region, R, t, float(m), mode, curve=curve)
        if len(roots) == 3:
            out.append((float(m), (b - min(float(r.x[0, 0]) for r in roots)) / b))
    return out


def cmd_sweep_fig2(spec: ExperimentSpec, raw: dict) -> tuple[int, list[Path]]:
    net = build_network(raw)
    mode = _mode(spec, {}, "exact")
    region, t = net.regions[0], float(net.trip_times[0])
    radii_list = raw.get("fig2_radii", [1, 2, 3, 4])
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed, mode.value)
    b = region.demand_rate
    xs = fig2_grid(b)
    paths, summary = [], {}
    for R in radii_list:
        mod = SojournModel(region, mode, MatchingRadii.equal(float(R)))
        m = supply_mass(mod, t, xs)
        paths.append(write_csv(spec.out / f"fig2_R{R:g}.csv", prov, ["x", "m"], zip(xs, m)))
        curve = supply_curve(region, float(R), t, mode)
        levels = three_root_band(curve)
        entry = {"non_monotone": bool(np.any(np.diff(curve.m) < 0)), "m_max_interior": float(m.max())}
        if len(levels):
            gaps = smallest_root_gaps(region, float(R), t, mode, curve, levels)
            entry.update(three_root_m=[float(levels[0]), float(levels[-1])],
                         smallest_root_gap=[[mm, g] for mm, g in gaps])
        summary[f"{R:g}"] = entry
    paths.append(write_json(spec.out / "fig2_summary.json", prov,
                            {"b": b, "trip_time": t, "radii": radii_list, "curves": summary}))
    return EXIT_OK, paths


def cmd_sweep_fig3(spec: ExperimentSpec, raw: dict) -> tuple[int, list[Path]]:
    net = build_network(raw)
    mode = _mode(spec, {}, "approx")
    base, t = net.regions[0], float(net.trip_times[0])
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed, mode.value)
    radii = raw.get("fig3_radii", [1, 2, 3, 4, 5])
    demand = raw.get("fig3_demand_rates", [1, 2, 3])
    header = ["x"] + [f"R{R:g}" for R in radii] + ["dynamic"]
    paths = []
    for b in demand:
        region = replace(base, demand_rate=float(b))
        xs = float(b) * np.arange(1, FIG3_POINTS + 1) / (FIG3_POINTS + 1)
        cols = [supply_mass(SojournModel(region, mode, MatchingRadii.equal(float(R))), t, xs) for R in radii]
        cols.append(supply_mass(SojournModel(region, FormulaMode.APPROX, None), t, xs))
        paths.append(write_csv(spec.out / f"fig3_b{b:g}.csv", prov, header, zip(xs, *cols)))
    return EXIT_OK, paths


def cmd_regime(spec: ExperimentSpec, raw: dict) -> tuple[int, list[Path]]:
    net = build_network(raw)
    region, t = net.regions[0], float(net.trip_times[0])
    band = float(raw.get("threshold_band", 1e-6))
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed, "sqrt_law")
    rep = sqrt_regime_classify(region, t, net.total_mass, band)
    path = write_json(spec.out / "regime.json", prov,
                      {"m": net.total_mass, "trip_time": t, **rep.to_dict()})
    return EXIT_OK, [path]


def cmd_poa(spec: ExperimentSpec, raw: dict) -> tuple[int, list[Path]]:
    net = build_network(raw)
    region, t = net.regions[0], float(net.trip_times[0])
    thetas = [float(th) for th in raw.get("poa_thetas", [10.0 ** k for k in range(7)])]
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed, "sqrt_law")
    ratios = poa_probe(region, t, thetas)
    rows = []
    for th, ratio in zip(thetas, ratios):
        reg = replace(region, abandonment_rate=th)
        m = sqrt_threshold(reg, t)
        rows.append((th, m, undersupply_rate(reg, t, m), region.demand_rate, ratio))
    path = write_csv(spec.out / "poa.csv", prov, ["theta", "m_threshold", "x_u", "x_o", "ratio"], rows)
    return EXIT_OK, [path]


def table3_label(cfg: SimConfig) -> str:
    return "Dynamic Adjustment of Radius" if cfg.policy == "dynamic" else cfg.label


def cmd_simulate(spec: ExperimentSpec, raw: dict) -> tuple[int, list[Path]]:
    base = build_sim_config(raw)
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed)
    radii = raw.get("table3_radii", [0.5 * k for k in range(1, 11)])
    seeds = replication_seeds(spec.seed, spec.reps)
    header = TABLE3_COLUMNS + ["seed", "policy"]
    rows, agg_rows, summary = [], [], {}
    for cfg in table3_policies(base, radii):
        runs, agg = replicate(cfg, spec.reps, seeds, workers=spec.workers)
        label = table3_label(cfg)
        for r in runs:
            rows.append([label, *r.table_row()[1:], r.seed, cfg.policy])
        mean = agg.mean
        agg_rows.append([label, mean["arrivals"], mean["customer_wait"], mean["pickup_time"],
                         mean["driver_wait"], mean["total_customer_wait"], mean["total_driver_wait"],
                         mean["completion_rate"], "mean", cfg.policy])
        summary[cfg.label] = {"mean": agg.mean, "std": agg.std, "ci95": agg.ci95, "n": agg.n,
                              "trace_hashes": [r.trace_hash for r in runs]}
    paths = [write_csv(spec.out / "table3_runs.csv", prov, header, rows + agg_rows),
             write_csv(spec.out / "table3.csv", prov, header, agg_rows),
             write_json(spec.out / "table3_summary.json", prov,
                        {"config": base.to_dict(), "seeds": seeds, "policies": summary})]
    return EXIT_OK, paths


def _recheck(net: NetworkModel, mode: FormulaMode, radii, stored: EquilibriumResult) -> dict:
    if net.n == 1 and mode is FormulaMode.SQRT_LAW:
        mu_d = float(stored.extras.get("mu_d", 0.0))
        fresh = sqrt_equilibrium_result(net.regions[0], float(net.trip_times[0]), net.total_mass,
                                        float(stored.x[0, 0]), mu_d)
    else:
        fresh = evaluate_point(net, stored.x, mode, radii, stored.deficits)
    br = verify_best_response(net, fresh)
    drift = max(abs(a.total - b.total) for a, b in zip(fresh.sojourns, stored.sojourns))
    drift = max(drift, abs(fresh.lam - stored.lam))
    return {"kkt_residual": fresh.kkt_residual, "lambda": fresh.lam,
            "conservation_residual": fresh.conservation_residual,
            "balance_residual": fresh.balance_residual, "stored_drift": drift,
            "best_response": br.to_dict(),
            "passed": bool(fresh.verified and br.passed and drift <= 1e-6)}


def cmd_verify(spec: ExperimentSpec, raw: dict | None) -> tuple[int, list[Path]]:
    try:
        with open(spec.result) as fh:
            stored = json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_IO, "io", f"result file not found: {spec.result}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_VALIDATION, "validation", f"result file is not valid JSON: {exc}")
    if raw is None:
        if "scenario" not in stored:
            raise CliError(EXIT_VALIDATION, "validation", "result file carries no scenario; pass --scenario")
        raw = stored["scenario"]
    net = build_network(raw)
    mode = _mode(spec, {"mode": stored.get("mode", raw.get("mode", "approx"))}, "approx")
    radii = scenario_radii(raw, net.n)
    checks = []
    try:
        for e in stored["equilibria"]:
            checks.append(_recheck(net, mode, radii, EquilibriumResult.from_dict(e)))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, "validation", f"malformed equilibrium record: {exc}")
    prov = Provenance(spec.command, scenario_hash(raw), spec.seed, mode.value)
    path = write_json(spec.out / "verify.json", prov, {"result": str(spec.result), "checks": checks})
    failed = [k for k, c in enumerate(checks) if not c["passed"]]
    if failed:
        worst = max(abs(checks[k]["best_response"]["gap"] or 0.0) for k in failed)
        raise CliError(EXIT_CONVERGENCE, "verification",
                       f"{len(failed)} of {len(checks)} stored equilibria fail re-verification",
                       {"failed": failed, "max_best_response_gap": worst,
                        "max_kkt_residual": max(checks[k]["kkt_residual"] for k in failed),
                        "report": str(path)})
    return EXIT_OK, [path]


HANDLERS = {"solve": cmd_solve, "sweep-fig2": cmd_sweep_fig2, "sweep-fig3": cmd_sweep_fig3,
            "regime": cmd_regime, "poa": cmd_poa, "simulate": cmd_simulate, "verify": cmd_verify}


def run_experiment(spec: ExperimentSpec) -> tuple[int, list[Path]]:
    """Run one command; raises CliError / ConvergenceError / OSError on failure."""
    problems = spec.violations()
    if problems:
        raise CliError(EXIT_VALIDATION, "validation", "invalid command line", {"violations": problems})
    raw = load_scenario(spec.scenario, spec.overrides) if spec.scenario is not None else None
    return HANDLERS[spec.command](spec, raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgride", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", type=Path)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--mode", choices=["exact", "approx", "sqrt", "sqrt_law"])
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--result", type=Path, help="stored equilibria JSON (verify)")
    p.add_argument("--workers", type=int, default=1, help="processes for simulation replications")
    p.add_argument("--starts", type=int, default=10, help="multi-start count for fixed-radius networks")
    return p


def _report(code: int, kind: str, message: str, details: dict | None = None) -> int:
    err = {"error": kind, "message": message, "exit_code": code, "details": details or {}}
    print(json.dumps(_jsonable(err), sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else _report(EXIT_VALIDATION, "validation", "bad command line")
    spec = ExperimentSpec(args.command, args.scenario, args.out, args.seed, args.reps, args.mode,
                          args.overrides, args.result, args.workers, args.starts)
    try:
        code, paths = run_experiment(spec)
    except CliError as exc:
        return _report(exc.code, exc.kind, str(exc), exc.details)
    except ConvergenceError as exc:
        return _report(EXIT_CONVERGENCE, "convergence", str(exc), getattr(exc, "diagnostics", {}))
    except OSError as exc:
        return _report(EXIT_IO, "io", str(exc))
    except (ValueError, KeyError, TypeError) as exc:
        return _report(EXIT_VALIDATION, "validation", str(exc))
    for path in paths:
        print(path)
    if code != EXIT_OK:
        return _report(code, "convergence", "some equilibria failed verification", {"output": [str(p) for p in paths]})
    return code


if __name__ == "__main__":
    sys.exit(main())
