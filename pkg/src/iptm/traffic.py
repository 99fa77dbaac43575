"""Corridor traffic: signal timing, drive traces, a kinematic traffic generator and
arrival-phase binning of speed profiles."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class TraceFormatError(ValueError):
    pass


class CorridorError(ValueError):
    pass


@dataclass(frozen=True)
class Intersection:
    position: float  # stop line [m]
    cycle: float = 100.0  # s
    green_start: float = 0.0  # offset of green onset within the cycle [s]
    green_duration: float = 55.0  # s

    @property
    def red_onset(self) -> float:
        return (self.green_start + self.green_duration) % self.cycle

    def is_green(self, t: float) -> bool:
        return (t - self.green_start) % self.cycle < self.green_duration

    def green_windows(self, t_from: float, t_to: float) -> list[tuple[float, float]]:
        """Green intervals overlapping [t_from, t_to]."""
        k = math.floor((t_from - self.green_start) / self.cycle) - 1
        out = []
        while True:
            g0 = self.green_start + k * self.cycle
            if g0 > t_to:
                return out
            g1 = g0 + self.green_duration
            if g1 >= t_from:
                out.append((g0, g1))
            k += 1

    def next_green(self, t: float) -> float:
        """Earliest instant >= t at which the signal is green."""
        if self.is_green(t):
            return t
        phase = (t - self.green_start) % self.cycle
        return t + (self.cycle - phase)


@dataclass(frozen=True)
class CorridorConfig:
    intersections: tuple[Intersection, ...]
    speed_limit: float = 15.0
    length: float = 2400.0
    n_bins: int = 10
    approach_offset: float = 5.0  # distance before the first stop line that counts as arrival
    stop_gap: float = 2.0  # queued vehicles stop this far before the line

    def __post_init__(self):
        pos = [i.position for i in self.intersections]
        if not pos:
            raise CorridorError("corridor needs at least one intersection")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise CorridorError("intersection positions must be strictly increasing")
        if pos[0] <= self.approach_offset or pos[-1] >= self.length:
            raise CorridorError("intersections must lie inside the corridor")
        cycles = {i.cycle for i in self.intersections}
        if len(cycles) != 1:
            raise CorridorError("coordinated signals need a common cycle length")
        for i in self.intersections:
            if not 0 < i.green_duration < i.cycle:
                raise CorridorError("green duration must lie in (0, cycle)")
        if self.speed_limit <= 0:
            raise CorridorError("speed limit must be positive")

    @property
    def cycle(self) -> float:
        return self.intersections[0].cycle

    @classmethod
    def default(cls) -> "CorridorConfig":
        """Six coordinated signals; offsets form a green wave near 13 m/s."""
        positions = (250.0, 650.0, 1000.0, 1400.0, 1800.0, 2150.0)
        wave = 13.0
        inters = tuple(
            Intersection(x, 100.0, round((x / wave + 20.0) % 100.0, 1), 55.0) for x in positions
        )
        return cls(inters, speed_limit=15.0, length=2400.0)


@dataclass
class DriveTrace:
    t: np.ndarray
    v: np.ndarray
    x: np.ndarray
    route_id: str = "corridor"
    vehicle_id: str = "ego"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if not (self.t.shape == self.v.shape == self.x.shape) or self.t.ndim != 1:
            raise TraceFormatError("t, v, x must be 1-D arrays of equal length")
        if len(self.t) and np.any(np.diff(self.t) <= 0):
            raise TraceFormatError("timestamps must be strictly increasing")
        if np.any(self.v < 0):
            raise TraceFormatError("speeds must be non-negative")
        if np.any(np.diff(self.x) < -1e-9):
            raise TraceFormatError("positions must be non-decreasing")

    def __len__(self):
        return len(self.t)

    @property
    def t0(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def duration(self) -> float:
        return self.t_end - self.t0

    def speed_at(self, t) -> np.ndarray | float:
        """Linear interpolation; zero outside the trace."""
        return np.interp(t, self.t, self.v, left=0.0, right=0.0)

    def position_at(self, t):
        return np.interp(t, self.t, self.x, left=self.x[0], right=self.x[-1])

    def time_at_position(self, x: float) -> float:
        """First instant at which the vehicle reaches position ``x``."""
        if x > self.x[-1]:
            raise CorridorError(f"trace never reaches x={x}")
        i = int(np.searchsorted(self.x, x, side="left"))
        if i == 0:
            return float(self.t[0])
        x0, x1 = self.x[i - 1], self.x[i]
        if x1 == x0:
            return float(self.t[i])
        return float(self.t[i - 1] + (x - x0) / (x1 - x0) * (self.t[i] - self.t[i - 1]))

    def resample(self, dt: float, t_start: float | None = None, t_stop: float | None = None) -> "DriveTrace":
        t_start = self.t0 if t_start is None else t_start
        t_stop = self.t_end if t_stop is None else t_stop
        n = int(math.floor((t_stop - t_start) / dt + 1e-9)) + 1
        tt = t_start + dt * np.arange(n)
        return DriveTrace(tt, self.speed_at(tt), self.position_at(tt), self.route_id, self.vehicle_id)

    def stop_count(self, v_stop: float = 0.1) -> int:
        """Number of separate halts after the vehicle first moves, excluding the final stop."""
        moving = self.v > v_stop
        if not moving.any():
            return 0
        first, last = np.argmax(moving), len(moving) - 1 - np.argmax(moving[::-1])
        seg = moving[first : last + 1]
        return int(np.sum(seg[:-1] & ~seg[1:]))


def cumulative_trapezoid(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    x = np.zeros_like(v, dtype=float)
    x[1:] = np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))
    return x


def load_trace(path: str | Path, route_id: str = "corridor", vehicle_id: str | None = None) -> DriveTrace:
    """Read a ``t_sec,v_mps[,x_m]`` CSV; positions are integrated when the column is absent."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_trace(text, route_id, vehicle_id or path.stem)


def parse_trace(text: str, route_id: str = "corridor", vehicle_id: str = "ego") -> DriveTrace:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise TraceFormatError("empty trace file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["t_sec", "v_mps"] or header[2:] not in ([], ["x_m"]):
        raise TraceFormatError(f"line 1: unexpected header {header}")
    has_x = len(header) == 3
    t, v, x = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise TraceFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise TraceFormatError(f"line {lineno}: non-numeric field in {row}") from None
        if t and vals[0] <= t[-1]:
            raise TraceFormatError(f"line {lineno}: timestamp {vals[0]} not increasing")
        if vals[1] < 0:
            raise TraceFormatError(f"line {lineno}: negative speed")
        t.append(vals[0])
        v.append(vals[1])
        if has_x:
            x.append(vals[2])
    ta, va = np.array(t), np.array(v)
    xa = np.array(x) if has_x else cumulative_trapezoid(ta, va)
    return DriveTrace(ta, va, xa, route_id, vehicle_id)


def write_trace(trace: DriveTrace, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t_sec,v_mps,x_m\n")
        for t, v, x in zip(trace.t, trace.v, trace.x):
            fh.write(f"{t:.3f},{v:.6f},{x:.4f}\n")


# ----------------------------------------------------------------------------
# kinematic traffic generator


@dataclass(frozen=True)
class DriverParams:
    cruise: float  # m/s
    accel: float  # m/s^2
    decel: float  # m/s^2


def _time_to_cover(d: float, v: float, a: float, v_c: float) -> float:
    """Time to travel ``d`` from speed ``v`` accelerating at ``a`` up to ``v_c``, then cruising."""
    if d <= 0:
        return 0.0
    if v >= v_c:
        return d / v_c
    d_acc = (v_c * v_c - v * v) / (2 * a)
    if d <= d_acc:
        return (-v + math.sqrt(v * v + 2 * a * d)) / a
    return (v_c - v) / a + (d - d_acc) / v_c


def _simulate_driver(
    cfg: CorridorConfig, drv: DriverParams, depart: float, dt: float, max_time: float
) -> DriveTrace:
    """Single vehicle from rest at x=0 to rest at the corridor end, obeying the signals.

    The driver goes for a signal only if the final metre before the stop line is
    covered entirely on green under its current acceleration plan; otherwise it
    brakes to stop ``stop_gap`` short of the line and waits for green.
    """
    lines = [i.position for i in cfg.intersections]
    t, x, v = depart, 0.0, 0.0
    ts, xs, vs = [t], [x], [v]
    nxt = 0
    sub = 10
    h = dt / sub
    stopping = False
    step = 0
    while t - depart < max_time:
        for _ in range(sub):
            if nxt < len(lines):
                sig = cfg.intersections[nxt]
                d_line = lines[nxt] - x
                d_stop = d_line - cfg.stop_gap
                t_a = t + _time_to_cover(d_line - 1.0, v, drv.accel, drv.cruise)
                t_b = t + _time_to_cover(d_line, v, drv.accel, drv.cruise)
                go = sig.is_green(t_a) and sig.is_green(t_b) and not _red_between(sig, t_a, t_b)
                if go:
                    stopping = False
                    acc = drv.accel if v < drv.cruise else 0.0
                else:
                    brake_dist = v * v / (2 * drv.decel)
                    if stopping or d_stop <= brake_dist + v * h:
                        stopping = True
                        acc = -v * v / (2 * d_stop) if d_stop > 1e-6 else -v / h
                    else:
                        acc = drv.accel if v < drv.cruise else 0.0
            else:
                d_stop = cfg.length - x
                brake_dist = v * v / (2 * drv.decel)
                if stopping or d_stop <= brake_dist + v * h:
                    stopping = True
                    acc = -v * v / (2 * d_stop) if d_stop > 1e-6 else -v / h
                else:
                    acc = drv.accel if v < drv.cruise else 0.0
            v_new = v + acc * h
            if acc > 0:
                v_new = min(v_new, drv.cruise)
            v_new = max(v_new, 0.0)
            x += 0.5 * (v + v_new) * h
            v = v_new
            t += h
            if stopping and v < 1e-3 and nxt < len(lines) and not cfg.intersections[nxt].is_green(t):
                v = 0.0
            if nxt < len(lines) and x >= lines[nxt]:
                nxt += 1
                stopping = False
        step += 1
        t = depart + step * dt
        ts.append(t)
        xs.append(x)
        vs.append(v)
        if nxt >= len(lines) and cfg.length - x < 0.05 and v < 1e-3:
            vs[-1] = 0.0
            break
    else:
        raise CorridorError("vehicle did not finish within max_time")
    return DriveTrace(np.array(ts), np.array(vs), np.array(xs))


def _red_between(sig: Intersection, t_a: float, t_b: float) -> bool:
    """True if a red phase starts inside (t_a, t_b)."""
    if t_b <= t_a:
        return False
    for g0, g1 in sig.green_windows(t_a, t_b):
        if g0 <= t_a and g1 >= t_b:
            return False
    return True


def generate_corridor_traffic(
    cfg: CorridorConfig,
    n_vehicles: int,
    seed: int,
    depart_window: float = 2000.0,
    dt: float = 1.0,
    max_time: float = 3600.0,
) -> list[DriveTrace]:
    """Independent kinematic vehicles with random departure, cruise speed and acceleration."""
    if n_vehicles < 1:
        raise ValueError("n_vehicles must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_vehicles):
        drv = DriverParams(
            cruise=cfg.speed_limit * rng.uniform(0.85, 1.0),
            accel=rng.uniform(1.2, 2.0),
            decel=rng.uniform(1.5, 2.5),
        )
        depart = round(float(rng.uniform(0.0, depart_window)), 1)
        tr = _simulate_driver(cfg, drv, depart, dt, max_time)
        tr.vehicle_id = f"veh{k:04d}"
        out.append(tr)
    return out


def simulate_vehicle(cfg: CorridorConfig, depart: float, cruise: float | None = None,
                     accel: float = 1.6, decel: float = 2.0, dt: float = 1.0) -> DriveTrace:
    """One deterministic stop-and-go vehicle; used for baselines and examples."""
    drv = DriverParams(cruise or cfg.speed_limit, accel, decel)
    return _simulate_driver(cfg, drv, depart, dt, 3600.0)


# ----------------------------------------------------------------------------
# arrival-phase classification and aggregation


def arrival_time(trace: DriveTrace, cfg: CorridorConfig) -> float:
    first = cfg.intersections[0]
    return trace.time_at_position(first.position - cfg.approach_offset)


def classify_arrival(t_arrival: float, cfg: CorridorConfig) -> int:
    """Bin 1..n_bins of an arrival time by its phase after the first signal's red onset."""
    first = cfg.intersections[0]
    width = cfg.cycle / cfg.n_bins
    phase = (t_arrival - first.red_onset) % cfg.cycle
    return min(int(math.floor(phase / width + 1e-9)) + 1, cfg.n_bins)


def classify_trip(trace: DriveTrace, cfg: CorridorConfig) -> int:
    return classify_arrival(arrival_time(trace, cfg), cfg)


@dataclass
class BinProfile:
    bin_index: int
    dt: float
    mean_v: np.ndarray
    std_v: np.ndarray
    support_count: int
    depart_phase: float = float("nan")  # circular mean of departure times modulo cycle
    vehicle_ids: list[str] = field(default_factory=list)

    @property
    def usable(self) -> bool:
        return self.support_count > 0

    def as_trace(self, t0: float = 0.0, route_length: float | None = None) -> DriveTrace:
        """Mean profile as a drive trace departing at ``t0``."""
        t = t0 + self.dt * np.arange(len(self.mean_v))
        x = cumulative_trapezoid(t, self.mean_v)
        if route_length is not None:
            x = np.minimum(x, route_length)
        return DriveTrace(t, self.mean_v.copy(), x, vehicle_id=f"bin{self.bin_index}")


def profile_from_trace(trace: DriveTrace, dt: float, horizon: float, bin_index: int = 0) -> BinProfile:
    """Single-trace profile on the departure-relative grid (the exact-preview source)."""
    n = int(round(horizon / dt)) + 1
    grid = trace.t0 + dt * np.arange(n)
    return BinProfile(bin_index, dt, trace.speed_at(grid), np.zeros(n), 1,
                      trace.t0, [trace.vehicle_id])


def aggregate_bins(
    traces: list[DriveTrace],
    assignments: list[int],
    dt: float,
    horizon: float,
    n_bins: int = 10,
    cycle: float = 100.0,
) -> list[BinProfile]:
    """Pointwise mean and population std of departure-aligned speed per bin.

    Speeds after a vehicle's last sample are treated as zero (vehicle finished).
    """
    if len(traces) != len(assignments):
        raise ValueError("every trace needs a bin assignment")
    n = int(round(horizon / dt)) + 1
    rel = dt * np.arange(n)
    groups: dict[int, list[DriveTrace]] = {b: [] for b in range(1, n_bins + 1)}
    for tr, b in zip(traces, assignments):
        if not 1 <= b <= n_bins:
            raise ValueError(f"bin index {b} out of range")
        groups[b].append(tr)
    out = []
    for b in range(1, n_bins + 1):
        members = groups[b]
        if not members:
            out.append(BinProfile(b, dt, np.zeros(n), np.zeros(n), 0))
            continue
        mat = np.vstack([tr.speed_at(tr.t0 + rel) for tr in members])
        ang = np.array([2 * math.pi * (tr.t0 % cycle) / cycle for tr in members])
        phase = (math.atan2(np.sin(ang).mean(), np.cos(ang).mean()) * cycle / (2 * math.pi)) % cycle
        out.append(
            BinProfile(b, dt, mat.mean(axis=0), mat.std(axis=0), len(members), phase,
                       [tr.vehicle_id for tr in members])
        )
    return out


def write_bin_profiles(profiles: list[BinProfile], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("bin,t_sec,mean_mps,std_mps,count\n")
        for p in profiles:
            for k, (m, s) in enumerate(zip(p.mean_v, p.std_v)):
                fh.write(f"{p.bin_index},{k * p.dt:.3f},{m:.6f},{s:.6f},{p.support_count}\n")


def load_bin_profiles(path: str | Path) -> list[BinProfile]:
    rows: dict[int, list[tuple[float, float, float, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["bin", "t_sec", "mean_mps", "std_mps", "count"]:
            raise TraceFormatError(f"line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                b, t, m, s, c = int(row[0]), float(row[1]), float(row[2]), float(row[3]), int(row[4])
            except (ValueError, IndexError):
                raise TraceFormatError(f"line {lineno}: malformed row {row}") from None
            rows.setdefault(b, []).append((t, m, s, c))
    out = []
    for b in sorted(rows):
        r = np.array(rows[b], dtype=float)
        dt = float(r[1, 0] - r[0, 0]) if len(r) > 1 else 1.0
        out.append(BinProfile(b, dt, r[:, 1], r[:, 2], int(r[0, 3])))
    return out
