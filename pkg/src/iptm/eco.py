"""Green-window eco-trajectory planning along a signalised corridor.

The planner chains one trapezoidal segment per intersection: a single speed change
at constant acceleration followed by a cruise that crosses the stop line inside a
green window. Where even the slowest admissible glide would arrive on red, a
stop-and-wait segment is used instead. The chain minimising acceleration work plus
a trip-time penalty is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .traffic import CorridorConfig, DriveTrace, _time_to_cover


class NoGreenWindowChain(ValueError):
    """No admissible crossing sequence within speed bounds and horizon."""


@dataclass(frozen=True)
class Phase:
    t0: float
    duration: float
    v0: float
    acc: float

    @property
    def v1(self) -> float:
        return self.v0 + self.acc * self.duration

    @property
    def distance(self) -> float:
        return self.v0 * self.duration + 0.5 * self.acc * self.duration**2


@dataclass(frozen=True)
class EcoSettings:
    a_max: float = 1.5
    v_min: float = 2.0
    margin: float = 2.0  # keep crossings this far inside the green window [s]
    time_weight: float = 2.0  # (m/s)^2 of acceleration work per second of trip time
    max_windows: int = 3
    dt: float = 1.0


def _speed_change(v: float, v_c: float, a: float) -> tuple[float, float]:
    """(time, distance) to move from v to v_c at |a|."""
    tt = abs(v_c - v) / a
    return tt, abs(v_c * v_c - v * v) / (2 * a)


def _segment_time(d: float, v: float, v_c: float, a: float) -> float:
    tt, dd = _speed_change(v, v_c, a)
    if dd > d:
        return math.inf
    return tt + (d - dd) / v_c


def _fast_segment(d: float, v: float, v_lim: float, a: float) -> list[tuple[float, float]]:
    """(duration, acc) phases to cover d as fast as possible, ending at crossing speed."""
    d_acc = (v_lim * v_lim - v * v) / (2 * a)
    if d <= d_acc:
        tt = (-v + math.sqrt(v * v + 2 * a * d)) / a
        return [(tt, a)]
    out = []
    if v < v_lim:
        out.append(((v_lim - v) / a, a))
    out.append(((d - max(d_acc, 0.0)) / v_lim, 0.0))
    return out


def _glide_speed(d: float, v: float, target: float, v_min: float, v_lim: float, a: float) -> float | None:
    """Cruise speed giving segment time ``target``; None if not reachable."""
    lo = max(v_min, math.sqrt(max(v * v - 2 * a * d, 0.0)) + 1e-9)
    hi = min(v_lim, math.sqrt(v * v + 2 * a * d) - 1e-9)
    if lo > hi:
        return None
    if _segment_time(d, v, lo, a) < target or _segment_time(d, v, hi, a) > target:
        return None
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _segment_time(d, v, mid, a) > target:
            lo = mid
        else:
            hi = mid
    return hi


def _accel_work(phases: list[tuple[float, float]], v: float) -> tuple[float, float]:
    """Sum of v * a^+ * dt over phases; returns (work, final speed)."""
    w = 0.0
    for dur, acc in phases:
        v1 = v + acc * dur
        if acc > 0:
            w += 0.5 * (v1 * v1 - v * v)
        v = v1
    return w, v


def _candidates(cfg: CorridorConfig, i: int, t: float, x: float, v: float, s: EcoSettings):
    """Alternative segments from (t, x, v) to and across intersection i."""
    sig = cfg.intersections[i]
    d = sig.position - x
    a = s.a_max
    vl = cfg.speed_limit
    fast = _fast_segment(d, v, vl, a)
    t_fast = t + sum(p[0] for p in fast)
    windows = [w for w in sig.green_windows(t, t + 10 * sig.cycle) if w[1] - s.margin > t_fast]
    out = []
    for g0, g1 in windows[: s.max_windows]:
        lo, hi = g0 + s.margin, g1 - s.margin
        if lo >= hi:
            continue
        if lo <= t_fast <= hi:
            out.append(fast)
            break
        vc = _glide_speed(d, v, lo - t, s.v_min, vl, a)
        if vc is not None:
            tt, dd = _speed_change(v, vc, a)
            out.append([(tt, a if vc > v else -a), ((d - dd) / vc, 0.0)])
            continue
        # stop short of the line, wait for green, pull away
        d_stop = d - cfg.stop_gap
        if d_stop <= 0:
            continue
        # accelerate (bounded by the limit) then brake to rest at the stop position
        v_peak = math.sqrt(min(vl * vl, v * v / 2 + a * d_stop))
        ph = []
        if v_peak > v:
            ph.append(((v_peak - v) / a, a))
            d_up = (v_peak * v_peak - v * v) / (2 * a)
        else:
            v_peak, d_up = v, 0.0
        d_down = v_peak * v_peak / (2 * a)
        if d_up + d_down > d_stop + 1e-9:
            continue
        if d_stop - d_up - d_down > 1e-9:
            ph.append(((d_stop - d_up - d_down) / v_peak, 0.0))
        ph.append((v_peak / a, -a))
        t_halt = t + sum(p[0] for p in ph)
        t_go = max(t_halt, lo - math.sqrt(2 * cfg.stop_gap / a))
        t_cross = t_go + math.sqrt(2 * cfg.stop_gap / a)
        if t_cross > hi:
            continue
        ph.append((t_go - t_halt, 0.0))
        ph.append((math.sqrt(2 * cfg.stop_gap / a), a))
        out.append(ph)
    return out


def _final_segment(cfg: CorridorConfig, x: float, v: float, s: EcoSettings):
    d = cfg.length - x
    a, vl = s.a_max, cfg.speed_limit
    v_peak = math.sqrt(min(vl * vl, v * v / 2 + a * d))
    ph = []
    d_up = 0.0
    if v_peak > v:
        ph.append(((v_peak - v) / a, a))
        d_up = (v_peak * v_peak - v * v) / (2 * a)
    else:
        v_peak = v
    d_down = v_peak * v_peak / (2 * a)
    if d_up + d_down > d + 1e-6:
        raise NoGreenWindowChain("cannot stop before the corridor end")
    if d - d_up - d_down > 1e-9:
        ph.append(((d - d_up - d_down) / v_peak, 0.0))
    ph.append((v_peak / a, -a))
    return ph


def _advance(t, x, v, phases):
    for dur, acc in phases:
        x += v * dur + 0.5 * acc * dur * dur
        v = max(v + acc * dur, 0.0)
        t += dur
    return t, x, v


def plan_phases(cfg: CorridorConfig, depart_t: float, horizon: float, s: EcoSettings = EcoSettings()) -> list[Phase]:
    n = len(cfg.intersections)
    best: dict = {"cost": math.inf, "plan": None}

    def search(i, t, x, v, work, plan):
        if work + s.time_weight * (t - depart_t) >= best["cost"]:
            return
        if i == n:
            fin = _final_segment(cfg, x, v, s)
            w, _ = _accel_work(fin, v)
            t_end, _, _ = _advance(t, x, v, fin)
            if t_end - depart_t > horizon:
                return
            cost = work + w + s.time_weight * (t_end - depart_t)
            if cost < best["cost"]:
                best["cost"], best["plan"] = cost, plan + [fin]
            return
        for seg in _candidates(cfg, i, t, x, v, s):
            w, _ = _accel_work(seg, v)
            t1, x1, v1 = _advance(t, x, v, seg)
            if t1 - depart_t > horizon:
                continue
            search(i + 1, t1, cfg.intersections[i].position, v1, work + w, plan + [seg])

    search(0, depart_t, 0.0, 0.0, 0.0, [])
    if best["plan"] is None:
        raise NoGreenWindowChain("no green-window chain completes within the horizon")
    phases, t, v = [], depart_t, 0.0
    for seg in best["plan"]:
        for dur, acc in seg:
            if dur > 1e-12:
                phases.append(Phase(t, dur, v, acc))
            t += dur
            v = max(v + acc * dur, 0.0)
    return phases


def render(phases: list[Phase], dt: float, vehicle_id: str = "eco") -> DriveTrace:
    """Sample a phase list on a uniform grid (the last sample lands on the trip end)."""
    t0 = phases[0].t0
    t_end = phases[-1].t0 + phases[-1].duration
    n = int(math.ceil((t_end - t0) / dt - 1e-9))
    tt = t0 + dt * np.arange(n + 1)
    starts = np.array([p.t0 for p in phases])
    x_start = np.concatenate([[0.0], np.cumsum([p.distance for p in phases])])
    v = np.empty_like(tt)
    x = np.empty_like(tt)
    for k, tk in enumerate(tt):
        if tk >= t_end:
            v[k], x[k] = 0.0, x_start[-1]
            continue
        j = int(np.searchsorted(starts, tk, side="right") - 1)
        p = phases[j]
        h = tk - p.t0
        v[k] = max(p.v0 + p.acc * h, 0.0)
        x[k] = x_start[j] + p.v0 * h + 0.5 * p.acc * h * h
    return DriveTrace(tt, v, np.maximum.accumulate(x), vehicle_id=vehicle_id)


def plan_eco_trajectory(
    cfg: CorridorConfig, depart_t: float, horizon: float = 3600.0, settings: EcoSettings = EcoSettings()
) -> DriveTrace:
    """Eco-driving speed profile from rest at the corridor start to rest at its end."""
    return render(plan_phases(cfg, depart_t, horizon, settings), settings.dt)


def crossing_times(phases: list[Phase], positions) -> list[float]:
    """Exact stop-line crossing instants of a phase plan."""
    out = []
    x = 0.0
    k = 0
    for xp in positions:
        while k < len(phases) and x + phases[k].distance < xp - 1e-9:
            x += phases[k].distance
            k += 1
        p = phases[k]
        rem = xp - x
        if abs(p.acc) < 1e-12:
            h = rem / p.v0
        else:
            h = (-p.v0 + math.sqrt(max(p.v0 * p.v0 + 2 * p.acc * rem, 0.0))) / p.acc
        out.append(p.t0 + h)
    return out
