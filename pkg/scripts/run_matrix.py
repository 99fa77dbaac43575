"""Run the Scenario I and II case matrix over a generated corpus and summarise.

Usage: python3 scripts/run_matrix.py [--n-ego 20] [--seed 7] [--h-r 5 20] [--out runs/matrix]
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from iptm.harness import CASES, ScenarioConfig, build_corpus, compare_cases, comparison_csv, run_case
from iptm.traffic import CorridorConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-ego", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--h-r", type=int, nargs="+", default=[5])
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args(argv)

    corpus = build_corpus(CorridorConfig.default(), n_ego=args.n_ego, seed=args.seed)
    configs = []
    for sc, case in CASES:
        base = ScenarioConfig.for_case(sc, case)
        hs = args.h_r if base.controller == "mpc" else [5]
        configs += [ScenarioConfig.for_case(sc, case, h_r=h) for h in hs]

    table: dict[str, list] = {c.label: [] for c in configs}
    for i in range(args.n_ego):
        for cfg in configs:
            t0 = time.perf_counter()
            _, m = run_case(cfg, corpus, i)
            table[cfg.label].append(m)
            print(
                f"ego{i:02d} {cfg.label:<12} {time.perf_counter() - t0:6.2f}s "
                f"fuel={m.fuel_total * 1e3:7.2f}g corr={m.fuel_corrected * 1e3:7.2f}g "
                f"on={m.engine_on_ratio:.3f} dev={m.soc_terminal_dev:+.4f} hard={m.hard_violations} "
                f"soft={m.soft_steps} fb={m.fallback_steps}",
                flush=True,
            )

    print("\nlabel         mean_corr_g  mean_on  hard  soft  fallback")
    for label, ms in table.items():
        print(
            f"{label:<12} {np.mean([m.fuel_corrected for m in ms]) * 1e3:11.3f} "
            f"{np.mean([m.engine_on_ratio for m in ms]):8.3f} {sum(m.hard_violations for m in ms):5d} "
            f"{sum(m.soft_steps for m in ms):5d} {sum(m.fallback_steps for m in ms):9d}"
        )
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        dump = {k: [m.to_json_dict() for m in v] for k, v in table.items()}
        (args.out / "matrix.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
        for k in range(args.n_ego):
            rows = compare_cases({label: ms[k] for label, ms in table.items()}, baseline="I-A")
            (args.out / f"comparison_ego{k:02d}.csv").write_text(comparison_csv(rows))


if __name__ == "__main__":
    main()
