"""Two-segment speed preview: an exact fine-resolution receding segment followed by a
coarse shrinking segment that runs to the (estimated) trip end."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .traffic import BinProfile, DriveTrace, cumulative_trapezoid


class PreviewError(ValueError):
    pass


@dataclass(frozen=True)
class SpeedPreview:
    t_now: float
    dt1: float
    dt2: float
    short: np.ndarray
    long: np.ndarray
    t_end: float
    v_prev: float = 0.0  # speed one fine step before t_now (for the backward acceleration)

    @property
    def n_short(self) -> int:
        return len(self.short)

    @property
    def n_long(self) -> int:
        return len(self.long)

    def node_dt(self) -> np.ndarray:
        """Step length of every node; the last long step is cut to end exactly at t_end."""
        dts = np.concatenate([np.full(self.n_short, self.dt1), np.full(self.n_long, self.dt2)])
        if self.n_long:
            rest = self.t_end - self.t_now - self.n_short * self.dt1 - (self.n_long - 1) * self.dt2
            dts[-1] = rest
        return dts

    def node_speeds(self) -> np.ndarray:
        return np.concatenate([self.short, self.long])

    def node_times(self) -> np.ndarray:
        return self.t_now + np.concatenate([[0.0], np.cumsum(self.node_dt())[:-1]])

    def node_motion(self) -> tuple[np.ndarray, np.ndarray]:
        """(speed, acceleration) used for the traction demand of every node.

        Nodes of length dt1 reproduce the plant: node speed and backward
        difference. Longer nodes use the interval mean speed and forward difference
        so that their traction energy equals the kinetic-energy change across them.
        """
        v = self.node_speeds()
        dts = self.node_dt()
        n = len(v)
        speed = v.copy()
        acc = np.zeros(n)
        prev = self.v_prev
        for k in range(n):
            if abs(dts[k] - self.dt1) < 1e-9:
                acc[k] = (v[k] - prev) / self.dt1
            else:
                v_next = v[k + 1] if k + 1 < n else 0.0
                speed[k] = 0.5 * (v[k] + v_next)
                acc[k] = (v_next - v[k]) / dts[k]
            prev = v[k]
        return speed, acc


def long_count(t_now: float, n_short: int, dt1: float, dt2: float, t_end: float) -> int:
    rest = t_end - t_now - n_short * dt1
    if rest <= 1e-9:
        return 0
    return int(math.ceil(rest / dt2 - 1e-9))


def build_preview(
    t_now: float,
    trace: DriveTrace,
    long_source: BinProfile | DriveTrace,
    h_r: int,
    dt1: float,
    dt2: float,
    t_end: float,
    source_offset: float | None = None,
) -> SpeedPreview:
    """Assemble a preview from the actual/planned trace and a long-range source.

    ``long_source`` is either a drive trace (sampled at absolute times, the exact
    preview) or a bin profile whose departure-relative clock is shifted by
    ``source_offset`` (profile time = absolute time - offset).
    """
    if t_now + h_r * dt1 > t_end + 1e-9:
        raise PreviewError("receding horizon extends past the trip end")
    short = np.asarray(trace.speed_at(t_now + dt1 * np.arange(h_r)), dtype=float)
    n_l = long_count(t_now, h_r, dt1, dt2, t_end)
    tl = t_now + h_r * dt1 + dt2 * np.arange(n_l)
    if isinstance(long_source, DriveTrace):
        long = np.asarray(long_source.speed_at(tl), dtype=float)
    else:
        if not long_source.usable:
            raise PreviewError(f"bin {long_source.bin_index} profile has no support")
        offset = trace.t0 if source_offset is None else source_offset
        long = profile_speed(long_source, tl - offset)
    v_prev = float(trace.speed_at(t_now - dt1)) if t_now - dt1 >= trace.t0 else float(short[0] if h_r else 0.0)
    return SpeedPreview(t_now, dt1, dt2, short, np.maximum(long, 0.0), t_end, v_prev)


def profile_speed(profile: BinProfile, tau) -> np.ndarray:
    grid = profile.dt * np.arange(len(profile.mean_v))
    return np.interp(tau, grid, profile.mean_v, left=profile.mean_v[0], right=0.0)


@dataclass(frozen=True)
class Alignment:
    offset: float  # absolute time minus profile time
    t_end: float  # estimated trip end [s]


def align_profile(profile: BinProfile, t_ref: float, x_ref: float, route_length: float, tol: float = 1.0) -> Alignment:
    """Place the mean profile so that it passes ``x_ref`` at ``t_ref``; estimate the trip end
    as the instant the shifted profile covers the remaining route."""
    grid = profile.dt * np.arange(len(profile.mean_v))
    xp = cumulative_trapezoid(grid, profile.mean_v)
    x_end = min(route_length, xp[-1]) - tol
    tau_end = float(np.interp(x_end, xp, grid)) if xp[-1] > 0 else grid[-1]
    # first instant reaching x_end, then hold until the mean speed has decayed to rest
    i_end = int(np.searchsorted(xp, x_end))
    still = np.nonzero(profile.mean_v[i_end:] < 0.05)[0]
    if len(still):
        tau_end = max(tau_end, grid[i_end + still[0]])
    x_ref = min(max(x_ref, 0.0), xp[-1])
    i = int(np.searchsorted(xp, x_ref, side="left"))
    if i == 0:
        tau_ref = 0.0
    else:
        x0, x1 = xp[i - 1], xp[min(i, len(xp) - 1)]
        tau_ref = grid[i - 1] + (0.0 if x1 == x0 else (x_ref - x0) / (x1 - x0) * profile.dt)
    offset = t_ref - tau_ref
    return Alignment(offset, offset + max(tau_end, tau_ref))
