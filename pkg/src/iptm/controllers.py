"""Power-split policies: load-levelling rules with thermal idle logic, and the
multi-resolution MPC built on the single-shooting transcription."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ocp import OcpSpec, P_SCALE, node_demand, rollout_states, transcribe_ocp
from .powertrain import (
    BatteryLimitError,
    Control,
    InfeasibleSplit,
    ModelParams,
    VehicleState,
    integrate_step,
)
from .preview import SpeedPreview
from .solver import solve_nlp


@dataclass(frozen=True)
class ControlDecision:
    p_bat: float
    engine_on: bool
    p_eng: float = 0.0
    status: str = "rule"
    cost: float = math.nan  # predicted fuel over the horizon [g]
    iterations: int = 0
    wall_time: float = 0.0
    soft: bool = False


@dataclass(frozen=True)
class RuleBasedConfig:
    soc_target: float = 0.6
    soc_low: float = 0.55
    soc_high: float = 0.65
    engine_on_power_threshold: float = 12e3  # W of bus demand
    t_cl_idle_threshold: float = 50.0
    t_cat_idle_threshold: float = 250.0
    idle_power: float = 3e3
    charge_gain: float = 2e5  # W per unit SOC below target

    def __post_init__(self):
        if not self.soc_low < self.soc_target < self.soc_high:
            raise ValueError("need soc_low < soc_target < soc_high")
        if self.idle_power <= 0:
            raise ValueError("idle power must be positive")


def _engine_window(p_need: float, params: ModelParams) -> tuple[float, float]:
    """Engine power range that keeps the battery within its limits."""
    b = params.battery
    lo = max(0.0, p_need - b.p_bat_max)
    hi = min(params.engine.p_max, p_need - b.p_bat_min)
    if lo > params.engine.p_max * (1 + 1e-12):
        raise InfeasibleSplit(f"demand {p_need:.0f} W exceeds engine plus battery limits")
    return lo, max(hi, 0.0)


def _decision(
    p_need: float, p_eng: float, params: ModelParams, p_bat_brake: float | None = None, **diag
) -> ControlDecision:
    """Close the bus balance for a chosen engine power.

    Braking power beyond the charge limit goes to the friction brakes; with the
    engine off, ``p_bat_brake`` may curtail regeneration further (clipped to
    between full regeneration and zero).
    """
    on = p_eng > params.engine.on_threshold
    if not on:
        p_eng = 0.0
    p_bat = max(p_need - p_eng, params.battery.p_bat_min)
    if not on and p_need < 0.0 and p_bat_brake is not None:
        p_bat = min(max(p_bat_brake, p_bat), 0.0)
    return ControlDecision(p_bat, on, p_eng, **diag)


def rule_based_step(
    s: VehicleState, p_trac: float, p_bat_aux: float, cfg: RuleBasedConfig, params: ModelParams
) -> ControlDecision:
    """Load levelling with thermal idle requests.

    ``p_trac`` is the bus-side traction demand. An engine that is off and has a
    cold coolant or catalyst is commanded to the idle point; otherwise the engine
    runs when the demand is high or the charge is low, carrying the demand plus a
    charge bias proportional to the SOC deficit.
    """
    t0 = time.perf_counter()
    p_need = p_trac + p_bat_aux
    lo, hi = _engine_window(p_need, params)
    want = p_trac > cfg.engine_on_power_threshold or s.soc < cfg.soc_low
    if want:
        p_eng = p_need + cfg.charge_gain * (cfg.soc_target - s.soc)
    elif not s.engine_on and (s.t_cl <= cfg.t_cl_idle_threshold or s.t_cat <= cfg.t_cat_idle_threshold):
        p_eng = cfg.idle_power
    else:
        p_eng = 0.0
    p_eng = min(max(p_eng, lo), hi)
    return _decision(p_need, p_eng, params, status="rule", wall_time=time.perf_counter() - t0)


@dataclass(frozen=True)
class MpcConfig:
    h_r: int = 5
    dt1: float = 1.0
    dt2: float = 10.0
    gate: str = "duty"
    solver: str = "slsqp"
    tol: float = 1e-4
    tol_feas: float = 1e-4
    max_iter: int = 300
    accept_violation: float = 1e-2  # scaled violation accepted from an unconverged solve
    terminal_backoff: float = 0.004
    on_fraction: float = 0.5  # engine on when relaxed power >= on_fraction * peak-efficiency power
    soc_bounds: tuple[float, float] = (0.4, 0.8)
    t_cl_bounds: tuple[float, float] = (40.0, 90.0)
    t_cat_min: float = 250.0
    cat_activation_tol: float = 0.5
    terminal_band: tuple[float, float] = (0.99, 1.01)
    soft_weight: float = 1e4

    def __post_init__(self):
        if self.h_r < 1 or self.dt1 <= 0 or self.dt2 < self.dt1:
            raise ValueError("need h_r >= 1 and dt2 >= dt1 > 0")


@dataclass
class WarmStart:
    times: np.ndarray  # node start times of the previous plan
    u: np.ndarray  # scaled battery powers of the previous plan


def warm_start_shift(prev: WarmStart | None, new_times: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """Initial guess on a new node grid.

    The previous plan is read as piecewise constant in time and sampled at the new
    node start times: the first fine entry drops out, coarse entries are re-bucketed
    into fine nodes as they come within reach, and times past the old horizon repeat
    its last entry. A cold start is all zeros. The guess is clipped to the new box.
    """
    if prev is None or len(prev.u) == 0:
        guess = np.zeros(len(new_times))
    else:
        idx = np.searchsorted(prev.times, new_times + 1e-9, side="right") - 1
        guess = prev.u[np.clip(idx, 0, len(prev.u) - 1)]
    return np.clip(guess, lb, ub)


def _one_step_ok(s: VehicleState, u: Control, v: float, a: float, dt: float, params, cfg: MpcConfig, cat_active: bool):
    try:
        nxt, _ = integrate_step(s, u, v, a, dt, params)
    except (InfeasibleSplit, BatteryLimitError):
        return False
    if nxt.soc < cfg.soc_bounds[0] or nxt.t_cl < cfg.t_cl_bounds[0]:
        return False
    return not (cat_active and nxt.t_cat < cfg.t_cat_min)


def _terminal_reachable(nlp, p0: float, spec: OcpSpec) -> bool:
    """Can the terminal band still be met after an engine-off first move?

    The rest of the horizon is rolled out at the strongest charging the battery
    window allows; rounding must not defer charge that can no longer be delivered.
    """
    u = nlp.lb.copy()
    u[0] = min(max(p0 / P_SCALE, nlp.lb[0]), nlp.ub[0])
    return rollout_states(nlp, u)[-1, 0] >= spec.terminal_band[0] * spec.soc_init


def mpc_step(
    s: VehicleState,
    preview: SpeedPreview,
    warm: WarmStart | None,
    params: ModelParams,
    cfg: MpcConfig = MpcConfig(),
    soc_init: float = 0.6,
    rule_cfg: RuleBasedConfig = RuleBasedConfig(),
    terminal: bool = True,
) -> tuple[ControlDecision, WarmStart | None]:
    """Solve the horizon problem and return the rounded first move and the plan.

    On a failed hard solve the thermal bounds are softened; if that also fails the
    rule-based policy decides and the status is ``fallback``.
    """
    t0 = time.perf_counter()
    spec = OcpSpec(
        s,
        preview,
        soc_init=soc_init,
        soc_bounds=cfg.soc_bounds,
        t_cl_bounds=cfg.t_cl_bounds,
        t_cat_min=cfg.t_cat_min,
        cat_activation_tol=cfg.cat_activation_tol,
        terminal_band=cfg.terminal_band,
        terminal_backoff=cfg.terminal_backoff,
        enforce_terminal=terminal,
        gate=cfg.gate,
        soft_weight=cfg.soft_weight,
    )
    times = preview.node_times()
    iters = 0
    x = rep = None
    soft = False
    for soft in (False, True):
        nlp = transcribe_ocp(replace(spec, soft_thermal=soft), params)
        guess = warm_start_shift(warm, times, nlp.lb, nlp.ub)
        x, rep = solve_nlp(
            nlp, guess, tol=cfg.tol, max_iter=cfg.max_iter, tol_feas=cfg.tol_feas, method=cfg.solver
        )
        iters += rep.iterations
        if rep.status == "optimal" or (rep.status == "max_iter" and rep.max_violation <= cfg.accept_violation):
            break
    else:
        p_need0 = float(node_demand(preview, params)[0])
        d = rule_based_step(s, p_need0 - params.road.aux_power, params.road.aux_power, rule_cfg, params)
        return replace(d, status="fallback", iterations=iters, wall_time=time.perf_counter() - t0), None
    plan = WarmStart(times, x.copy())
    p_need = node_demand(preview, params)
    p0 = float(p_need[0])
    relaxed = max(p0 - x[0] * P_SCALE, 0.0)
    lo, hi = _engine_window(p0, params)
    p_star = params.engine.p_peak_efficiency
    cat_active = spec.light_off_active
    speed, acc = preview.node_motion()
    if cfg.gate == "duty":
        on = relaxed >= cfg.on_fraction * p_star
        p_on = min(max(max(relaxed, p_star), lo), hi)
    else:
        on = relaxed > params.engine.on_threshold
        p_on = min(max(relaxed, lo), hi)
    if not on:
        if lo > params.engine.on_threshold or not _one_step_ok(
            s, Control(p0, False), float(speed[0]), float(acc[0]), preview.dt1, params, cfg, cat_active
        ) or (terminal and not _terminal_reachable(nlp, p0, spec)):
            on = True
            p_on = min(max(p_star, lo), hi)
    p_eng = p_on if on else 0.0
    status = "soft" if soft else rep.status
    d = _decision(
        p0, p_eng, params, float(x[0] * P_SCALE), status=status, cost=rep.objective,
        iterations=iters, wall_time=time.perf_counter() - t0, soft=soft,
    )
    return d, plan


@dataclass
class MpcController:
    """Stateful wrapper keeping the previous plan for warm starts."""

    params: ModelParams
    cfg: MpcConfig = field(default_factory=MpcConfig)
    soc_init: float = 0.6
    rule_cfg: RuleBasedConfig = field(default_factory=RuleBasedConfig)
    warm: WarmStart | None = None

    def step(self, s: VehicleState, preview: SpeedPreview, terminal: bool = True) -> ControlDecision:
        d, plan = mpc_step(s, preview, self.warm, self.params, self.cfg, self.soc_init, self.rule_cfg, terminal)
        self.warm = plan
        return d

    def reset(self):
        self.warm = None
