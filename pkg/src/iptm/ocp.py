"""Single-shooting transcription of the multi-resolution fuel-optimal control problem.

Decision variables are mean battery powers, one per preview node (scaled by
``P_SCALE``). States are eliminated by a forward-Euler rollout with the node's own
step; forward sensitivities give the exact objective gradient and the dense
constraint Jacobian. Engine power follows from the bus balance at every node, so
the balance holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .powertrain import (
    GRAVITY,
    ModelParams,
    VehicleState,
    _k_gate,
    _k_soc_rate,
    _k_thermal,
)
from .preview import SpeedPreview
from .solver import Nlp

P_SCALE = 1e4  # W per decision unit
F_SCALE = 1e3  # objective in grams of fuel
SOC_SCALE = 100.0  # constraint rows in SOC percentage points
TEMP_SCALE = 0.1  # constraint rows in tens of degrees
# grams per joule of curtailed regeneration at the first node, falling to half at
# the last; far below the fuel value of stored charge, it only breaks ties so
# curtailment happens as late as possible
CURTAIL_PENALTY = 1e-6

GATES = {"duty": 0, "sigmoid": 1}

# option vector layout
(
    O_GATE,
    O_PSTAR,
    O_WIDTH,
    O_SOC_LO,
    O_SOC_HI,
    O_TCL_LO,
    O_TCL_HI,
    O_TCAT_LO,
    O_CAT_ON,
    O_TERM_ON,
    O_TERM_LO,
    O_TERM_HI,
    O_SOFT,
    O_SOFT_W,
    N_OPTS,
) = range(15)


@dataclass(frozen=True)
class OcpSpec:
    """Everything needed to pose one receding/shrinking-horizon problem.

    ``cat_active=None`` enables the light-off bound exactly when the current
    catalyst temperature is at least ``t_cat_min - cat_activation_tol``.
    """

    state: VehicleState
    preview: SpeedPreview
    soc_init: float = 0.6
    soc_bounds: tuple[float, float] = (0.4, 0.8)
    t_cl_bounds: tuple[float, float] = (40.0, 90.0)
    t_cat_min: float = 250.0
    cat_active: bool | None = None
    cat_activation_tol: float = 0.5
    terminal_band: tuple[float, float] = (0.99, 1.01)
    terminal_backoff: float = 0.0  # band shrink on each side, fraction of soc_init
    enforce_terminal: bool = True
    gate: str = "duty"
    gate_width: float = 100.0
    soft_thermal: bool = False  # thermal and terminal rows become penalties
    soft_weight: float = 1e4  # grams per (deg C)^2, or per (SOC percentage point)^2

    def __post_init__(self):
        lo, hi = self.soc_bounds
        if not 0 <= lo < hi <= 1:
            raise ValueError("soc bounds must satisfy 0 <= lo < hi <= 1")
        if self.t_cl_bounds[0] >= self.t_cl_bounds[1]:
            raise ValueError("coolant bounds out of order")
        blo, bhi = self.terminal_band
        if blo + self.terminal_backoff > bhi - self.terminal_backoff:
            raise ValueError("terminal band empty after back-off")
        if self.gate not in GATES:
            raise ValueError(f"unknown gate {self.gate!r}")
        if self.preview.n_short + self.preview.n_long == 0:
            raise ValueError("empty preview")

    @property
    def light_off_active(self) -> bool:
        if self.cat_active is not None:
            return self.cat_active
        return self.state.t_cat >= self.t_cat_min - self.cat_activation_tol


def node_demand(preview: SpeedPreview, params: ModelParams) -> np.ndarray:
    """Bus power demand plus auxiliaries [W] at every preview node."""
    r = params.road
    v, a = preview.node_motion()
    p_trac = (r.mass * a + r.mass * GRAVITY * r.rolling_coeff + r.drag_area_coeff * v * v) * v
    bus = np.where(
        p_trac >= 0, p_trac / r.drivetrain_efficiency, p_trac * r.drivetrain_efficiency * r.regen_fraction
    )
    return bus + r.aux_power


def battery_bounds(p_need: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-node battery power box keeping the engine within [0, p_max].

    While braking the battery may take anything between the full regenerative
    power (capped at the charge limit) and nothing; the friction brakes absorb
    the rest.
    """
    b = params.battery
    lo = np.maximum(b.p_bat_min, p_need - params.engine.p_max)
    hi = np.minimum(b.p_bat_max, np.maximum(p_need, 0.0))
    lo = np.minimum(lo, hi)
    return lo, hi


@njit(cache=True)
def _rollout(u, data, want_grad):
    x0, dt, p_need, vel, theta, sk, uk, ool_p, ool_w, opts = data
    n = u.shape[0]
    kind = int(opts[O_GATE])
    p_star = opts[O_PSTAR]
    width = opts[O_WIDTH]
    cat_on = opts[O_CAT_ON] > 0.5
    soft = opts[O_SOFT] > 0.5
    term_on = opts[O_TERM_ON] > 0.5
    per = 2 if soft else (5 if cat_on else 4)
    m = n * per + (2 if term_on and not soft else 0)
    c = np.empty(m)
    jac = np.zeros((m, n)) if want_grad else np.zeros((0, n))
    g = np.zeros(n)
    sens = np.zeros((3, n))
    traj = np.empty((n + 1, 4))
    s = x0[0]
    tcl = x0[1]
    tcat = x0[2]
    traj[0, 0] = s
    traj[0, 1] = tcl
    traj[0, 2] = tcat
    traj[n, 3] = 0.0
    f = 0.0
    w_soft = opts[O_SOFT_W]
    for k in range(n):
        pb = P_SCALE * u[k]
        p = p_need[k] - pb
        dp = -P_SCALE
        if p < 0.0:
            w_c = CURTAIL_PENALTY * (2.0 - k / n) * dt[k]
            f -= w_c * p
            if want_grad:
                g[k] += w_c * P_SCALE
            p = 0.0
            dp = 0.0
        duty, dd, prun, drun = _k_gate(p, kind, p_star, width)
        if kind == 0 and 0.0 < p < p_star:
            # time-shared operation: the battery alternates between the engine-off
            # and peak-efficiency points, so its rate mixes the two end rates
            r_on, rs_on, _ = _k_soc_rate(s, p_need[k] - p_star, theta, sk, uk)
            r_off, rs_off, _ = _k_soc_rate(s, p_need[k], theta, sk, uk)
            rs = duty * r_on + (1.0 - duty) * r_off
            rs_s = duty * rs_on + (1.0 - duty) * rs_off
            rs_p = -(r_on - r_off) / p_star
        else:
            rs, rs_s, rs_p = _k_soc_rate(s, pb, theta, sk, uk)
        mdot, dm_p, dm_t, dtcl, dtcl_p, dtcl_t, cat, dcat_p, dcat_t = _k_thermal(
            p, duty, prun, dd, drun, tcl, tcat, vel[k], theta, ool_p, ool_w
        )
        h = dt[k]
        f += F_SCALE * h * mdot
        traj[k, 3] = p * duty if kind == 1 else p
        if want_grad:
            cm = F_SCALE * h * dm_t
            for j in range(k):
                g[j] += cm * sens[1, j]
            g[k] += F_SCALE * h * dm_p * dp
            a0 = 1.0 + h * rs_s
            a1 = 1.0 + h * dtcl_t
            a2 = 1.0 + h * dcat_t
            for j in range(k):
                sens[0, j] *= a0
                sens[1, j] *= a1
                sens[2, j] *= a2
            sens[0, k] = h * rs_p * P_SCALE
            sens[1, k] = h * dtcl_p * dp
            sens[2, k] = h * dcat_p * dp
        s += h * rs
        tcl += h * dtcl
        tcat += h * cat
        traj[k + 1, 0] = s
        traj[k + 1, 1] = tcl
        traj[k + 1, 2] = tcat
        r = k * per
        c[r] = SOC_SCALE * (opts[O_SOC_LO] - s)
        c[r + 1] = SOC_SCALE * (s - opts[O_SOC_HI])
        if want_grad:
            for j in range(k + 1):
                jac[r, j] = -SOC_SCALE * sens[0, j]
                jac[r + 1, j] = SOC_SCALE * sens[0, j]
        if soft:
            lo = opts[O_TCL_LO] - tcl
            hi = tcl - opts[O_TCL_HI]
            ca = opts[O_TCAT_LO] - tcat if cat_on else 0.0
            for viol, idx, sign in ((lo, 1, -1.0), (hi, 1, 1.0), (ca, 2, -1.0)):
                if viol > 0.0:
                    f += w_soft * viol * viol
                    if want_grad:
                        for j in range(k + 1):
                            g[j] += 2.0 * w_soft * viol * sign * sens[idx, j]
        else:
            c[r + 2] = TEMP_SCALE * (opts[O_TCL_LO] - tcl)
            c[r + 3] = TEMP_SCALE * (tcl - opts[O_TCL_HI])
            if cat_on:
                c[r + 4] = TEMP_SCALE * (opts[O_TCAT_LO] - tcat)
            if want_grad:
                for j in range(k + 1):
                    jac[r + 2, j] = -TEMP_SCALE * sens[1, j]
                    jac[r + 3, j] = TEMP_SCALE * sens[1, j]
                    if cat_on:
                        jac[r + 4, j] = -TEMP_SCALE * sens[2, j]
    if term_on and soft:
        for viol, sign in ((SOC_SCALE * (opts[O_TERM_LO] - s), -1.0), (SOC_SCALE * (s - opts[O_TERM_HI]), 1.0)):
            if viol > 0.0:
                f += w_soft * viol * viol
                if want_grad:
                    for j in range(n):
                        g[j] += 2.0 * w_soft * viol * sign * SOC_SCALE * sens[0, j]
    elif term_on:
        r = n * per
        c[r] = SOC_SCALE * (opts[O_TERM_LO] - s)
        c[r + 1] = SOC_SCALE * (s - opts[O_TERM_HI])
        if want_grad:
            for j in range(n):
                jac[r, j] = -SOC_SCALE * sens[0, j]
                jac[r + 1, j] = SOC_SCALE * sens[0, j]
    return f, g, c, jac, traj


@njit(cache=True)
def ocp_evaluate(u, data):
    f, g, c, jac, _ = _rollout(u, data, True)
    return f, g, c, jac


def transcribe_ocp(spec: OcpSpec, params: ModelParams) -> Nlp:
    """Build the NLP for ``spec``. Objective is fuel in grams over the whole preview."""
    pv = spec.preview
    dt = pv.node_dt()
    if np.any(dt <= 0):
        raise ValueError("preview produced a non-positive node step")
    speed, _ = pv.node_motion()
    p_need = node_demand(pv, params)
    lo, hi = battery_bounds(p_need, params)
    opts = np.zeros(N_OPTS)
    opts[O_GATE] = GATES[spec.gate]
    opts[O_PSTAR] = params.engine.p_peak_efficiency
    opts[O_WIDTH] = spec.gate_width
    opts[O_SOC_LO], opts[O_SOC_HI] = spec.soc_bounds
    opts[O_TCL_LO], opts[O_TCL_HI] = spec.t_cl_bounds
    opts[O_TCAT_LO] = spec.t_cat_min
    opts[O_CAT_ON] = float(spec.light_off_active)
    opts[O_TERM_ON] = float(spec.enforce_terminal)
    opts[O_TERM_LO] = (spec.terminal_band[0] + spec.terminal_backoff) * spec.soc_init
    opts[O_TERM_HI] = (spec.terminal_band[1] - spec.terminal_backoff) * spec.soc_init
    opts[O_SOFT] = float(spec.soft_thermal)
    opts[O_SOFT_W] = spec.soft_weight
    pk = params.packed()
    x0 = spec.state.as_array()
    data = (x0, dt, p_need, speed, *pk.arrays, opts)
    n = len(dt)
    per = 2 if spec.soft_thermal else (5 if spec.light_off_active else 4)
    m = n * per + (2 if spec.enforce_terminal and not spec.soft_thermal else 0)
    return Nlp(n, ocp_evaluate, lo / P_SCALE, hi / P_SCALE, np.zeros(m, dtype=bool), data)


def rollout_states(nlp: Nlp, u) -> np.ndarray:
    """Predicted (soc, t_cl, t_cat, p_eng) per node; row k holds the state at node k
    and the engine power applied during node k."""
    return _rollout(np.asarray(u, dtype=float), nlp.data, False)[4]


def p_bat_from(u) -> np.ndarray:
    return np.asarray(u) * P_SCALE
