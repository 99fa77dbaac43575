"""Command-line entry point: ``iptm [--config C] [--out D] [--seed S] <command> ...``.

Exit codes: 0 ok, 2 configuration or input error, 3 infeasible run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .eco import NoGreenWindowChain, crossing_times, plan_phases, render
from .harness import (
    ConfigError,
    PlantInfeasible,
    ScenarioConfig,
    TripMetrics,
    build_corpus,
    compare_cases,
    compute_metrics,
    load_metrics,
    run_closed_loop,
    write_outputs,
)
from .traffic import (
    CorridorError,
    TraceFormatError,
    aggregate_bins,
    arrival_time,
    classify_arrival,
    generate_corridor_traffic,
    load_bin_profiles,
    load_trace,
    write_bin_profiles,
    write_trace,
)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3

log = logging.getLogger("iptm")


def _corpus(cfg: RunConfig):
    t = cfg.traffic
    return build_corpus(
        cfg.corridor, n_ego=max(t.n_ego, cfg.ego + 1), seed=cfg.scenario.seed, n_background=t.n_background,
        dt2=t.bin_dt, horizon=t.bin_horizon, eco=cfg.eco,
    )


def _traces(paths: list[str]):
    files = []
    for p in map(Path, paths):
        files += sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if not files:
        raise ConfigError("no trace files given")
    return [load_trace(f, vehicle_id=f.stem) for f in files]


def cmd_generate(cfg: RunConfig, out: Path, args) -> int:
    n = args.count or cfg.traffic.n_background
    traces = generate_corridor_traffic(cfg.corridor, n, cfg.scenario.seed)
    tdir = out / "traces"
    tdir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vehicle_id", "depart_s", "arrival_s", "bin"])
    for tr in traces:
        write_trace(tr, tdir / f"{tr.vehicle_id}.csv")
        ta = arrival_time(tr, cfg.corridor)
        w.writerow([tr.vehicle_id, f"{tr.t0:.3f}", f"{ta:.3f}", classify_arrival(ta, cfg.corridor)])
    (out / "vehicles.csv").write_text(buf.getvalue())
    print(f"wrote {n} traces to {tdir}")
    return EXIT_OK


def cmd_classify(cfg: RunConfig, out: Path, args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vehicle_id", "arrival_s", "bin"])
    for tr in _traces(args.traces):
        ta = arrival_time(tr, cfg.corridor)
        w.writerow([tr.vehicle_id, f"{ta:.3f}", classify_arrival(ta, cfg.corridor)])
    out.mkdir(parents=True, exist_ok=True)
    (out / "classification.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_aggregate(cfg: RunConfig, out: Path, args) -> int:
    traces = _traces(args.traces)
    assign = [classify_arrival(arrival_time(tr, cfg.corridor), cfg.corridor) for tr in traces]
    bins = aggregate_bins(
        traces, assign, args.dt or cfg.traffic.bin_dt, args.horizon or cfg.traffic.bin_horizon,
        cfg.corridor.n_bins, cfg.corridor.cycle,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_bin_profiles(bins, out / "bins.csv")
    for b in bins:
        print(f"bin {b.bin_index:2d}: {b.support_count} vehicles")
    return EXIT_OK


def cmd_plan_eco(cfg: RunConfig, out: Path, args) -> int:
    phases = plan_phases(cfg.corridor, args.depart, args.horizon, cfg.eco)
    tr = render(phases, cfg.eco.dt, vehicle_id="eco")
    out.mkdir(parents=True, exist_ok=True)
    write_trace(tr, out / "eco_trace.csv")
    cross = crossing_times(phases, [i.position for i in cfg.corridor.intersections])
    info = {"depart_s": args.depart, "arrive_s": tr.t_end, "crossings_s": [round(c, 6) for c in cross]}
    (out / "eco_plan.json").write_text(json.dumps(info, indent=2) + "\n")
    print(json.dumps(info))
    return EXIT_OK


def _simulate(cfg: RunConfig, sc: ScenarioConfig, out: Path, trace_path=None, bins_path=None, corpus=None):
    if trace_path:
        trace = load_trace(trace_path)
        bins = load_bin_profiles(bins_path) if bins_path else None
        if sc.preview == "binned" and bins is None:
            raise ConfigError("binned preview needs --bins")
    else:
        corpus = corpus or _corpus(cfg)
        trace, bins = corpus.trace_for(sc, cfg.ego), corpus.bins
        sc = replace(sc, bin_index=sc.bin_index or corpus.bin_for(sc, cfg.ego))
    mpc = replace(cfg.mpc, h_r=sc.h_r, dt1=sc.dt1, dt2=sc.dt2)
    try:
        lg = run_closed_loop(sc, trace, bins, cfg.params, mpc, cfg.rule, cfg.corridor)
    except PlantInfeasible as exc:
        write_outputs(exc.log, None, out)
        raise
    m = compute_metrics(lg, sc, cfg.params)
    write_outputs(lg, m, out)
    return m


def cmd_simulate(cfg: RunConfig, out: Path, args) -> int:
    m = _simulate(cfg, cfg.scenario, out, args.trace, args.bins)
    print(json.dumps(m.to_json_dict(), sort_keys=True))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out: Path, args) -> int:
    metrics: dict[str, TripMetrics] = {}
    for item in args.metrics:
        label, _, path = item.rpartition("=")
        path = Path(path)
        if path.is_dir():
            path = path / "metrics.json"
        metrics[label or path.parent.name] = load_metrics(path)
    if len(metrics) < 2:
        raise ConfigError("compare needs at least two metrics files")
    rows = compare_cases(metrics, args.baseline)
    write_outputs(None, None, out, rows)
    sys.stdout.write((out / "comparison.csv").read_text())
    return EXIT_OK


def cmd_sweep_hr(cfg: RunConfig, out: Path, args) -> int:
    sc0 = cfg.scenario
    binned = "C" if sc0.scenario == "I" else "IV"
    exact = "B" if sc0.scenario == "I" else "III"
    corpus = _corpus(cfg)
    metrics = {}
    for case, hs in ((exact, [5]), (binned, args.h_r)):
        for h in hs:
            sc = ScenarioConfig.for_case(sc0.scenario, case, h_r=h, dt1=sc0.dt1, dt2=sc0.dt2, soc_init=sc0.soc_init,
                                         t_cl_init=sc0.t_cl_init, t_cat_init=sc0.t_cat_init, seed=sc0.seed)
            label = f"{sc.scenario}-{case}-Hr{h}"
            m = _simulate(cfg, sc, out / label, corpus=corpus)
            metrics[label] = m
            print(f"{label}: fuel {m.fuel_total * 1e3:.3f} g, corrected {m.fuel_corrected * 1e3:.3f} g")
    write_outputs(None, None, out, compare_cases(metrics, f"{sc0.scenario}-{exact}-Hr5"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iptm", description="Integrated power and thermal management workbench")
    ap.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    ap.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate corridor traffic traces")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("classify", help="arrival bin of each trace")
    p.add_argument("traces", nargs="+", help="trace CSV files or directories")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("aggregate", help="per-bin mean/std speed profiles")
    p.add_argument("traces", nargs="+")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--horizon", type=float, default=None)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("plan-eco", help="green-window eco-driving trajectory")
    p.add_argument("--depart", type=float, required=True)
    p.add_argument("--horizon", type=float, default=3600.0)
    p.set_defaults(func=cmd_plan_eco)

    p = sub.add_parser("simulate", help="closed-loop run of the configured scenario case")
    p.add_argument("--trace", type=Path, default=None, help="drive trace; default is the corpus ego")
    p.add_argument("--bins", type=Path, default=None, help="bin profiles for binned preview")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="percent deltas between metrics files")
    p.add_argument("metrics", nargs="+", help="[label=]path to metrics.json or its run directory")
    p.add_argument("--baseline", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-hr", help="binned-preview MPC over receding horizon lengths")
    p.add_argument("--h-r", type=int, nargs="+", default=[5, 10, 20])
    p.set_defaults(func=cmd_sweep_hr)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        return args.func(cfg, args.out, args)
    except PlantInfeasible as exc:
        print(f"infeasible run: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NoGreenWindowChain as exc:
        print(f"infeasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, TraceFormatError, CorridorError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
