"""Binned-preview MPC over receding-horizon lengths, against the exact-preview run.

Usage: python3 scripts/sweep_hr.py [--scenario I] [--n-ego 5] [--h-r 5 10 20 40] [--out runs/sweep]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from iptm.harness import ScenarioConfig, build_corpus, run_case
from iptm.traffic import CorridorConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", choices=["I", "II"], default="I")
    ap.add_argument("--n-ego", type=int, default=5)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--h-r", type=int, nargs="+", default=[5, 10, 20, 40])
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args(argv)

    exact_case, binned_case = ("B", "C") if args.scenario == "I" else ("III", "IV")
    corpus = build_corpus(CorridorConfig.default(), n_ego=args.n_ego, seed=args.seed)
    exact = ScenarioConfig.for_case(args.scenario, exact_case)
    ref = np.mean([run_case(exact, corpus, i)[1].fuel_corrected for i in range(args.n_ego)])
    rows = {"exact": ref}
    print(f"{exact.label:<14} {ref * 1e3:8.3f} g")
    for h in args.h_r:
        cfg = ScenarioConfig.for_case(args.scenario, binned_case, h_r=h)
        fuel = np.mean([run_case(cfg, corpus, i)[1].fuel_corrected for i in range(args.n_ego)])
        rows[cfg.label] = fuel
        print(f"{cfg.label:<14} {fuel * 1e3:8.3f} g  gap {(fuel - ref) * 1e3:+.3f} g")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "sweep.json").write_text(json.dumps({k: float(v) for k, v in rows.items()}, indent=2) + "\n")


if __name__ == "__main__":
    main()
