"""Run the fixed-versus-dynamic radius simulation campaign and print a Table-3 style summary
next to the mean-field prediction for the same region.

    python scripts/table3_campaign.py --reps 10 --workers 4 --out results/table3
"""

import argparse
import json
from pathlib import Path

from mfgride.cli import main
from mfgride.equilibrium import single_region_equilibria
from mfgride.simulator import SimConfig

HERE = Path(__file__).resolve().parent.parent


def mean_field(cfg: SimConfig, radius):
    """Mean-field completion rate and customer wait for one policy."""
    region = cfg.region()
    m = cfg.n_drivers / cfg.area
    res = single_region_equilibria(region, radius, cfg.trip_mean, m, "approx")[0]
    x = float(res.x[0, 0])
    return x / region.demand_rate, float(res.deficits[0]) / region.abandonment_rate / region.demand_rate


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--scenario", type=Path, default=HERE / "scenarios" / "table3.json")
    ap.add_argument("--out", type=Path, default=Path("results/table3"))
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    code = main(["simulate", "--scenario", str(args.scenario), "--out", str(args.out), "--reps", str(args.reps),
                 "--seed", str(args.seed), "--workers", str(args.workers)])
    if code:
        raise SystemExit(code)
    summary = json.loads((args.out / "table3_summary.json").read_text())
    cfg = SimConfig.from_dict(summary["config"])
    print(f"{'policy':>8} {'completion':>10} {'mf':>6} {'cust wait':>9} {'mf':>6} {'pickup':>7} {'radius':>7}")
    for label, p in summary["policies"].items():
        mean = p["mean"]
        radius = "dynamic" if label == "dynamic" else float(label)
        mf_c, mf_w = mean_field(cfg, radius)
        print(f"{label:>8} {mean['completion_rate']:10.3f} {mf_c:6.3f} {mean['customer_wait']:9.3f} {mf_w:6.3f} "
              f"{mean['pickup_time']:7.3f} {mean['mean_radius']:7.3f}")
