"""Run the 30-trial protocol on the no-rocks and rocks scenarios and tabulate success rates.

    python3 scripts/run_experiments.py [--out results/experiments] [--workers 1]
"""
import argparse
import json
import time
from pathlib import Path

from soilpick.config import load_scenario
from soilpick.experiment import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/experiments"))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--trials", type=int, default=None, help="override n_trials in both scenarios")
    args = ap.parse_args()

    rows = []
    for name in ("no_rocks", "rocks"):
        s = load_scenario(CONFIGS / f"{name}.json")
        if args.trials:
            s = s.with_overrides(n_trials=args.trials)
        t0 = time.perf_counter()
        rep = run_experiment(s, workers=args.workers)
        secs = time.perf_counter() - t0
        d = args.out / name
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(rep.to_json() + "\n")
        (d / "counts.csv").write_text(rep.to_csv())
        c, h = rep.success_interval
        rows.append((name, rep.counts.get("Success", 0), rep.n_trials, c, h, secs))
        print(json.dumps({"scenario": name, "seconds": round(secs, 2), **rep.summary()}, sort_keys=True))

    lines = ["scenario,successes,trials,wilson_center_pct,wilson_half_width_pct,seconds"]
    lines += [f"{n},{k},{t},{100 * c:.1f},{100 * h:.1f},{s:.2f}" for n, k, t, c, h, s in rows]
    (args.out / "success_rates.csv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
