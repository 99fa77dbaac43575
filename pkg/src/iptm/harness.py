"""Closed-loop simulation of plant, controller and preview; case matrix, metrics and output files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .controllers import ControlDecision, MpcConfig, MpcController, RuleBasedConfig, rule_based_step
from .eco import EcoSettings, plan_eco_trajectory
from .powertrain import (
    BatteryLimitError,
    Control,
    InfeasibleSplit,
    ModelParams,
    VehicleState,
    bus_demand,
    integrate_step,
    traction_power,
)
from .preview import align_profile, build_preview
from .traffic import (
    BinProfile,
    CorridorConfig,
    DriveTrace,
    aggregate_bins,
    classify_trip,
    generate_corridor_traffic,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class PlantInfeasible(RuntimeError):
    """The plant could not realise a command; ``log`` holds the steps completed so far."""

    def __init__(self, msg: str, log: "TrajectoryLog"):
        super().__init__(msg)
        self.log = log


# (driving, controller, preview) of every case
CASES: dict[tuple[str, str], tuple[str, str, str | None]] = {
    ("I", "A"): ("normal", "rule_based", None),
    ("I", "B"): ("normal", "mpc", "exact"),
    ("I", "C"): ("normal", "mpc", "binned"),
    ("II", "I"): ("normal", "rule_based", None),
    ("II", "II"): ("eco", "rule_based", None),
    ("II", "III"): ("eco", "mpc", "exact"),
    ("II", "IV"): ("eco", "mpc", "binned"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "I"
    case: str = "A"
    driving: str = "normal"
    controller: str = "rule_based"
    preview: str | None = None
    bin_index: int | None = None
    h_r: int = 5
    dt1: float = 1.0
    dt2: float = 10.0
    soc_init: float = 0.6
    t_cl_init: float = 50.0
    t_cat_init: float = 250.0
    seed: int = 7  # corpus seed

    def __post_init__(self):
        key = (self.scenario, self.case)
        if key not in CASES:
            raise ConfigError(f"unknown case {self.case!r} in scenario {self.scenario!r}")
        if CASES[key] != (self.driving, self.controller, self.preview):
            raise ConfigError(
                f"case {self.scenario}/{self.case} means {CASES[key]}, got "
                f"{(self.driving, self.controller, self.preview)}"
            )
        if self.h_r < 1 or self.dt1 <= 0 or self.dt2 < self.dt1:
            raise ConfigError("need h_r >= 1 and dt2 >= dt1 > 0")
        if not 0 <= self.soc_init <= 1:
            raise ConfigError("soc_init outside [0, 1]")
        if self.bin_index is not None and self.bin_index < 1:
            raise ConfigError("bin_index starts at 1")

    @classmethod
    def for_case(cls, scenario: str, case: str, **kw) -> "ScenarioConfig":
        if (scenario, case) not in CASES:
            raise ConfigError(f"unknown case {case!r} in scenario {scenario!r}")
        driving, controller, preview = CASES[(scenario, case)]
        return cls(scenario, case, driving, controller, preview, **kw)

    @property
    def label(self) -> str:
        tag = f"{self.scenario}-{self.case}"
        return tag if self.h_r == 5 or self.controller != "mpc" else f"{tag}-Hr{self.h_r}"

    @property
    def initial_state(self) -> VehicleState:
        return VehicleState(self.soc_init, self.t_cl_init, self.t_cat_init, False)


LOG_COLUMNS = (
    "t",
    "v",
    "a",
    "p_dem",
    "p_bat",
    "p_eng",
    "soc",
    "t_cl",
    "t_cat",
    "engine_on",
    "fuel_cum",
    "status",
    "iterations",
    "soft",
    "t_end_est",
)


@dataclass
class TrajectoryLog:
    """One row per tick: the state at ``t`` and the command held over [t, t + dt1).

    The final row carries the terminal state with no command (status ``end``).
    """

    dt: float
    rows: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        vals = [r[name] for r in self.rows]
        if name == "status":
            return np.array(vals, dtype=object)
        return np.asarray(vals, dtype=float)

    @property
    def steps(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "end"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
        return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        if math.isnan(x):
            return ""
        return f"{x:.9g}"
    return str(x)


def _pick_bin(bins: Sequence[BinProfile], index: int) -> BinProfile:
    by = {b.bin_index: b for b in bins}
    if index in by and by[index].usable:
        return by[index]
    usable = [b for b in bins if b.usable]
    if not usable:
        raise ConfigError("no usable bin profile")
    n = max(b.bin_index for b in bins)
    return min(usable, key=lambda b: (min((b.bin_index - index) % n, (index - b.bin_index) % n), b.bin_index))


def run_closed_loop(
    cfg: ScenarioConfig,
    trace: DriveTrace,
    bins: Sequence[BinProfile] | BinProfile | None = None,
    params: ModelParams | None = None,
    mpc_cfg: MpcConfig | None = None,
    rule_cfg: RuleBasedConfig | None = None,
    corridor: CorridorConfig | None = None,
) -> TrajectoryLog:
    """Simulate one trip tick by tick: preview, controller, plant, log."""
    params = params or ModelParams()
    rule_cfg = rule_cfg or RuleBasedConfig()
    if cfg.controller == "mpc":
        mpc_cfg = replace(mpc_cfg or MpcConfig(), h_r=cfg.h_r, dt1=cfg.dt1, dt2=cfg.dt2)
    dt = cfg.dt1
    n_steps = int(round(trace.duration / dt))
    times = trace.t0 + dt * np.arange(n_steps + 1)
    v = np.asarray(trace.speed_at(times), dtype=float)
    t_true_end = times[-1]
    profile = None
    if cfg.preview == "binned":
        if bins is None:
            raise ConfigError("binned preview needs bin profiles")
        if isinstance(bins, BinProfile):
            profile = bins
        else:
            idx = cfg.bin_index
            if idx is None:
                if corridor is None:
                    raise ConfigError("need a corridor to classify the trip")
                idx = classify_trip(trace, corridor)
            profile = _pick_bin(bins, idx)
        route_length = corridor.length if corridor else float(trace.x[-1])
    ctrl = MpcController(params, mpc_cfg, cfg.soc_init, rule_cfg) if cfg.controller == "mpc" else None
    pk = params.packed()
    s = cfg.initial_state
    out = TrajectoryLog(dt)
    fuel = 0.0
    v_prev = 0.0
    for k in range(n_steps):
        t = times[k]
        a = (v[k] - v_prev) / dt
        p_dem = bus_demand(traction_power(v[k], a, params.road), params.road)
        t_end_est = t_true_end
        try:
            if ctrl is None:
                d = rule_based_step(s, p_dem, params.road.aux_power, rule_cfg, params)
            else:
                h = min(cfg.h_r, n_steps - k)
                src, offset = trace, None
                if profile is not None:
                    t_ref = t + h * dt
                    al = align_profile(profile, t_ref, float(trace.position_at(t_ref)), route_length)
                    src, offset = profile, al.offset
                    # the true end replaces the estimate once it is within one coarse step
                    if t_true_end - t > cfg.h_r * dt + cfg.dt2:
                        t_end_est = max(al.t_end, t_ref + cfg.dt2)
                pv = build_preview(t, trace, src, h, dt, cfg.dt2, t_end_est, source_offset=offset)
                d = ctrl.step(s, pv)
        except InfeasibleSplit as exc:
            raise PlantInfeasible(f"t={t:.1f}: {exc}", out) from exc
        row = dict(
            t=float(t), v=float(v[k]), a=float(a), p_dem=float(p_dem), p_bat=float(d.p_bat),
            p_eng=float(d.p_eng), soc=s.soc, t_cl=s.t_cl, t_cat=s.t_cat, engine_on=bool(d.engine_on),
            fuel_cum=fuel, status=d.status, iterations=int(d.iterations), soft=bool(d.soft),
            t_end_est=float(t_end_est),
        )
        out.rows.append(row)
        out.wall_times.append(d.wall_time)
        log.debug("step", extra={"record": row})
        try:
            s, m = integrate_step(s, Control(d.p_bat, d.engine_on), float(v[k]), float(a), dt, params, pk)
        except (InfeasibleSplit, BatteryLimitError) as exc:
            raise PlantInfeasible(f"t={t:.1f}: {exc}", out) from exc
        fuel += m
        v_prev = v[k]
    out.rows.append(
        dict(
            t=float(times[-1]), v=float(v[-1]), a=0.0, p_dem=0.0, p_bat=0.0, p_eng=0.0, soc=s.soc, t_cl=s.t_cl,
            t_cat=s.t_cat, engine_on=False, fuel_cum=fuel, status="end", iterations=0, soft=False,
            t_end_est=float(t_true_end),
        )
    )
    return out


# ----------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Limits:
    soc: tuple[float, float] = (0.4, 0.8)
    t_cl: tuple[float, float] = (40.0, 90.0)
    t_cat_min: float = 250.0
    terminal_band: tuple[float, float] = (0.99, 1.01)
    soc_tol: float = 1e-6
    temp_tol: float = 0.5


@dataclass(frozen=True)
class TripMetrics:
    fuel_total: float  # kg
    fuel_corrected: float  # kg, charge deviation converted at peak engine efficiency
    engine_on_ratio: float
    soc_terminal_dev: float
    trip_time: float
    violations: dict
    soft_steps: int = 0
    fallback_steps: int = 0
    unconverged_steps: int = 0
    wall_mean: float = 0.0
    wall_max: float = 0.0

    def to_json_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_mean")
            d.pop("wall_max")
        return d

    @property
    def hard_violations(self) -> int:
        return sum(v["count"] for k, v in self.violations.items())


def _viol(values: np.ndarray, excess: np.ndarray, tol: float) -> dict:
    bad = excess > tol
    return {"count": int(bad.sum()), "max": float(max(excess.max(initial=0.0), 0.0))}


def compute_metrics(
    log: TrajectoryLog, cfg: ScenarioConfig | None = None, params: ModelParams | None = None, limits: Limits = Limits()
) -> TripMetrics:
    """Fuel, engine-on ratio, terminal charge deviation and constraint-violation summary.

    States are checked at every tick including the terminal one. The light-off
    bound is checked only when the trip starts at or above light-off, and the
    terminal band is counted only for MPC runs.
    """
    if not log.rows:
        raise ValueError("empty log")
    params = params or ModelParams()
    soc_init = cfg.soc_init if cfg else log.rows[0]["soc"]
    soc = log.column("soc")
    t_cl = log.column("t_cl")
    t_cat = log.column("t_cat")
    steps = log.steps
    on = np.array([r["engine_on"] for r in steps], dtype=float)
    trip = log.dt * len(steps)
    ratio = float(on.sum() * log.dt / trip) if trip > 0 else 0.0
    fuel = float(log.rows[-1]["fuel_cum"])
    dev = float(soc[-1] / soc_init - 1.0)
    b = params.battery
    eta = params.engine.brake_efficiency(params.engine.p_peak_efficiency)
    fuel_corr = fuel + (soc_init - soc[-1]) * b.capacity * b.u_oc / (eta * params.thermal.lhv)
    viol = {
        "soc": _viol(soc, np.maximum(limits.soc[0] - soc, soc - limits.soc[1]), limits.soc_tol),
        "t_cl": _viol(t_cl, np.maximum(limits.t_cl[0] - t_cl, t_cl - limits.t_cl[1]), limits.temp_tol),
    }
    if t_cat[0] >= limits.t_cat_min:
        viol["t_cat"] = _viol(t_cat, limits.t_cat_min - t_cat, limits.temp_tol)
    else:
        viol["t_cat"] = {"count": 0, "max": 0.0}
    lo, hi = limits.terminal_band
    term_ex = max(lo * soc_init - soc[-1], soc[-1] - hi * soc_init)
    # the band is a constraint of the optimiser only; rule runs report the excess
    enforced = cfg is None or cfg.controller == "mpc"
    viol["terminal"] = {"count": int(enforced and term_ex > 1e-9), "max": float(max(term_ex, 0.0))}
    status = [r["status"] for r in steps]
    wt = np.asarray(log.wall_times) if log.wall_times else np.zeros(1)
    return TripMetrics(
        fuel_total=fuel,
        fuel_corrected=float(fuel_corr),
        engine_on_ratio=ratio,
        soc_terminal_dev=dev,
        trip_time=float(trip),
        violations=viol,
        soft_steps=status.count("soft"),
        fallback_steps=status.count("fallback"),
        unconverged_steps=status.count("max_iter"),
        wall_mean=float(wt.mean()),
        wall_max=float(wt.max()),
    )


def compare_cases(metrics: dict[str, TripMetrics], baseline: str | None = None) -> list[dict]:
    """Percent change of each case against the baseline case (first entry by default)."""
    if len(metrics) < 2:
        raise ValueError("need at least two cases to compare")
    base_key = baseline or next(iter(metrics))
    base = metrics[base_key]

    def pct(x, ref):
        return 0.0 if x == ref else 100.0 * (x - ref) / ref

    order = sorted(metrics, key=lambda k: (metrics[k].fuel_corrected, k))
    rows = []
    for key, m in metrics.items():
        rows.append(
            {
                "case": key,
                "fuel_kg": m.fuel_total,
                "fuel_corrected_kg": m.fuel_corrected,
                "engine_on_ratio": m.engine_on_ratio,
                "fuel_delta_pct": pct(m.fuel_total, base.fuel_total),
                "fuel_corrected_delta_pct": pct(m.fuel_corrected, base.fuel_corrected),
                "engine_on_delta_pct": pct(m.engine_on_ratio, base.engine_on_ratio) if base.engine_on_ratio else 0.0,
                "rank": order.index(key) + 1,
                "baseline": key == base_key,
            }
        )
    return rows


COMPARISON_COLUMNS = (
    "case",
    "fuel_kg",
    "fuel_corrected_kg",
    "engine_on_ratio",
    "fuel_delta_pct",
    "fuel_corrected_delta_pct",
    "engine_on_delta_pct",
    "rank",
    "baseline",
)


def comparison_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in COMPARISON_COLUMNS])
    return buf.getvalue()


def write_outputs(
    log: TrajectoryLog | None,
    metrics: TripMetrics | None,
    out_dir: str | Path,
    comparison: list[dict] | None = None,
    prefix: str = "",
) -> list[Path]:
    """Write trajectory CSV, metrics JSON and comparison CSV.

    File contents depend only on simulation results; wall-clock timings go to a
    separate ``timing.json`` so the other files are byte-stable across runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str):
        p = out / f"{prefix}{name}"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(p)

    if log is not None:
        put("trajectory.csv", log.to_csv())
    if metrics is not None:
        put("metrics.json", json.dumps(metrics.to_json_dict(), indent=2, sort_keys=True) + "\n")
        put("timing.json", json.dumps({"wall_mean": metrics.wall_mean, "wall_max": metrics.wall_max}) + "\n")
    if comparison is not None:
        put("comparison.csv", comparison_csv(comparison))
    return written


def load_metrics(path: str | Path) -> TripMetrics:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return TripMetrics(**d)


# ----------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    corridor: CorridorConfig
    egos: list[DriveTrace]
    ecos: list[DriveTrace]
    bins: list[BinProfile]
    ego_bins: list[int]
    eco_bins: list[int]

    def trace_for(self, cfg: ScenarioConfig, i: int) -> DriveTrace:
        return self.ecos[i] if cfg.driving == "eco" else self.egos[i]

    def bin_for(self, cfg: ScenarioConfig, i: int) -> int:
        return self.eco_bins[i] if cfg.driving == "eco" else self.ego_bins[i]


def build_corpus(
    corridor: CorridorConfig,
    n_ego: int = 20,
    seed: int = 7,
    n_background: int = 300,
    dt2: float = 10.0,
    horizon: float = 900.0,
    eco: EcoSettings = EcoSettings(),
) -> Corpus:
    """Background traffic for the bins and an independent set of ego trips.

    Egos come from a separate random stream, so they never contribute to the bin
    profiles used to forecast them.
    """
    background = generate_corridor_traffic(corridor, n_background, seed)
    assign = [classify_trip(tr, corridor) for tr in background]
    bins = aggregate_bins(background, assign, dt2, horizon, corridor.n_bins, corridor.cycle)
    egos = generate_corridor_traffic(corridor, n_ego, seed + 1_000_003)
    for k, tr in enumerate(egos):
        tr.vehicle_id = f"ego{k:03d}"
    ecos = []
    for tr in egos:
        e = plan_eco_trajectory(corridor, tr.t0, settings=eco)
        e.vehicle_id = f"{tr.vehicle_id}-eco"
        ecos.append(e)
    return Corpus(
        corridor,
        egos,
        ecos,
        bins,
        [classify_trip(tr, corridor) for tr in egos],
        [classify_trip(tr, corridor) for tr in ecos],
    )


def run_case(
    cfg: ScenarioConfig,
    corpus: Corpus,
    i: int,
    params: ModelParams | None = None,
    mpc_cfg: MpcConfig | None = None,
    rule_cfg: RuleBasedConfig | None = None,
) -> tuple[TrajectoryLog, TripMetrics]:
    cfg = replace(cfg, bin_index=cfg.bin_index or corpus.bin_for(cfg, i))
    lg = run_closed_loop(cfg, corpus.trace_for(cfg, i), corpus.bins, params, mpc_cfg, rule_cfg, corpus.corridor)
    return lg, compute_metrics(lg, cfg, params)
