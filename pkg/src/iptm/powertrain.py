"""Control-oriented models of a power-split HEV with engine and catalyst thermal states.

The rate equations are written once as scalar numba kernels (``_k_*``) operating on a
packed parameter vector; the plant integrator, the MPC rollout and the DP oracle all
call the same kernels. The public functions below wrap them with dataclass parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

GRAVITY = 9.81


class InfeasibleSplit(ValueError):
    """Requested power split cannot be realised by the engine."""


class BatteryLimitError(ValueError):
    """Battery power demand exceeds the equivalent-circuit limit U_oc^2 / (4 R_int)."""


@dataclass(frozen=True)
class VehicleState:
    soc: float
    t_cl: float
    t_cat: float
    engine_on: bool = False

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc={self.soc} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.soc, self.t_cl, self.t_cat])


@dataclass(frozen=True)
class BatteryParams:
    capacity: float = 6.5 * 3600.0  # A s
    resistance: float = 0.1  # ohm
    u_oc: float = 200.0  # V, used when no table is given
    u_oc_table: tuple[tuple[float, float], ...] | None = None  # (soc, volts) knots
    p_bat_min: float = -25e3
    p_bat_max: float = 25e3

    def __post_init__(self):
        if self.capacity <= 0 or self.resistance <= 0:
            raise ValueError("battery capacity and resistance must be positive")
        u_min = min(v for _, v in self.u_oc_table) if self.u_oc_table else self.u_oc
        if u_min <= 0:
            raise ValueError("open-circuit voltage must be positive")
        if self.p_bat_max > u_min**2 / (4 * self.resistance):
            raise ValueError("p_bat_max exceeds U_oc^2/(4 R_int)")
        if self.p_bat_min >= self.p_bat_max:
            raise ValueError("p_bat_min must be below p_bat_max")

    def knots(self) -> tuple[np.ndarray, np.ndarray]:
        if self.u_oc_table:
            tab = np.asarray(sorted(self.u_oc_table), dtype=float)
            return tab[:, 0].copy(), tab[:, 1].copy()
        return np.array([0.0]), np.array([self.u_oc])


@dataclass(frozen=True)
class EngineThermalParams:
    thermal_mass: float = 100.0  # kg
    heat_capacity: float = 600.0  # J/(kg C)
    lhv: float = 42.6e6  # J/kg
    q_exh_fraction: float = 0.3
    q_air_coeff: float = 20.0  # W/C
    q_heat_demand: float = 3000.0  # W
    heating: bool = True
    t_amb: float = 0.0

    def __post_init__(self):
        for name in ("thermal_mass", "heat_capacity", "lhv", "q_air_coeff", "q_heat_demand"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.q_exh_fraction < 1.0:
            raise ValueError("q_exh_fraction must lie in (0, 1)")


APPENDIX_ALPHA = (
    -1.6065e-2,
    -1.8535e-06,
    9.8852e-3,
    -8.2564e-05,
    5.1029e-3,
    -1.6444e-4,
    1.5473e-6,
    6.8078,
)


@dataclass(frozen=True)
class CatalystParams:
    alpha: tuple[float, ...] = APPENDIX_ALPHA
    beta_1: float = -1.00e-3
    beta_2: float = -0.200
    t_amb: float = 0.0
    light_off: float = 250.0

    def __post_init__(self):
        if len(self.alpha) != 8:
            raise ValueError("catalyst model needs eight alpha coefficients")
        if self.beta_1 >= 0 or self.beta_2 >= 0:
            raise ValueError("off-mode coefficients beta_1, beta_2 must be negative")
        if self.light_off <= self.t_amb:
            raise ValueError("light-off temperature must exceed ambient")


# optimal operating line: engine power [W] -> engine speed [rad/s]
DEFAULT_OOL = (
    (0.0, 105.0),
    (5e3, 115.0),
    (10e3, 130.0),
    (15e3, 150.0),
    (20e3, 170.0),
    (25e3, 190.0),
    (30e3, 215.0),
    (40e3, 260.0),
    (50e3, 320.0),
    (57e3, 375.0),
)


@dataclass(frozen=True)
class EngineMapParams:
    """Fuel map and operating line surrogates.

    Nominal fuel follows a Willans line with a quadratic loss term,
    ``f = (P + p_friction + quad_coeff P^2) / (eta_indicated LHV)``, whose
    brake efficiency peaks at ``sqrt(p_friction / quad_coeff)``.
    """

    ool: tuple[tuple[float, float], ...] = DEFAULT_OOL
    eta_indicated: float = 0.45
    p_friction: float = 3125.0  # W
    quad_coeff: float = 5e-6  # 1/W
    alpha_cold: tuple[float, float] = (-10.0, 1.3)  # (T_cl, multiplier)
    alpha_warm: tuple[float, float] = (60.0, 1.0)
    on_threshold: float = 100.0  # W

    def __post_init__(self):
        p = [k[0] for k in self.ool]
        w = [k[1] for k in self.ool]
        if p[0] != 0.0 or any(b <= a for a, b in zip(p, p[1:])):
            raise ValueError("OOL power knots must start at 0 and increase")
        if any(b < a for a, b in zip(w, w[1:])) or w[0] <= 0:
            raise ValueError("OOL speed knots must be positive and non-decreasing")
        if self.alpha_cold[1] < 1.0 or self.alpha_warm[1] != 1.0:
            raise ValueError("alpha must be >= 1 and equal 1 when warm")

    @property
    def p_max(self) -> float:
        return self.ool[-1][0]

    @property
    def p_peak_efficiency(self) -> float:
        return math.sqrt(self.p_friction / self.quad_coeff)

    def brake_efficiency(self, p: float) -> float:
        if p <= 0:
            return 0.0
        return self.eta_indicated * p / (p + self.p_friction + self.quad_coeff * p * p)

    def efficiency_table(self, n: int = 10) -> list[tuple[float, float]]:
        ps = np.linspace(self.p_max / n, self.p_max, n)
        return [(float(p), self.brake_efficiency(p)) for p in ps]


@dataclass(frozen=True)
class RoadLoadParams:
    mass: float = 1500.0
    rolling_coeff: float = 0.01
    drag_area_coeff: float = 0.4  # kg/m, 0.5 rho Cd A
    aux_power: float = 500.0  # electrical auxiliaries drawn from the battery [W]
    drivetrain_efficiency: float = 0.9
    regen_fraction: float = 0.6  # share of braking power reaching the electric bus

    def __post_init__(self):
        for name in ("mass", "rolling_coeff", "drag_area_coeff", "aux_power"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.drivetrain_efficiency <= 1 or not 0 <= self.regen_fraction <= 1:
            raise ValueError("efficiencies must lie in (0, 1]")


@dataclass(frozen=True)
class ModelParams:
    battery: BatteryParams = field(default_factory=BatteryParams)
    thermal: EngineThermalParams = field(default_factory=EngineThermalParams)
    catalyst: CatalystParams = field(default_factory=CatalystParams)
    engine: EngineMapParams = field(default_factory=EngineMapParams)
    road: RoadLoadParams = field(default_factory=RoadLoadParams)

    def with_heating(self, on: bool) -> "ModelParams":
        return replace(self, thermal=replace(self.thermal, heating=on))

    def packed(self) -> "PackedModel":
        return pack(self)


# ----------------------------------------------------------------------------
# packed parameter vector for the numba kernels

(
    I_R,
    I_C,
    I_ETA,
    I_P0,
    I_Q2,
    I_LHV,
    I_MC,
    I_QEXH,
    I_QAIR,
    I_QHEAT,
    I_TAMB_CL,
    I_A1,
) = range(12)
I_B1 = I_A1 + 8
I_B2 = I_B1 + 1
I_TAMB_CAT = I_B2 + 1
I_AT0 = I_TAMB_CAT + 1
I_AV0 = I_AT0 + 1
I_AT1 = I_AV0 + 1
I_AV1 = I_AT1 + 1
I_EPS = I_AV1 + 1
I_PMAX = I_EPS + 1
N_THETA = I_PMAX + 1


@dataclass(frozen=True)
class PackedModel:
    theta: np.ndarray
    soc_knots: np.ndarray
    uoc_knots: np.ndarray
    ool_p: np.ndarray
    ool_w: np.ndarray

    @property
    def arrays(self):
        return self.theta, self.soc_knots, self.uoc_knots, self.ool_p, self.ool_w


def pack(p: ModelParams) -> PackedModel:
    th = np.zeros(N_THETA)
    b, e, c, m = p.battery, p.thermal, p.catalyst, p.engine
    th[I_R] = b.resistance
    th[I_C] = b.capacity
    th[I_ETA] = m.eta_indicated
    th[I_P0] = m.p_friction
    th[I_Q2] = m.quad_coeff
    th[I_LHV] = e.lhv
    th[I_MC] = e.thermal_mass * e.heat_capacity
    th[I_QEXH] = e.q_exh_fraction
    th[I_QAIR] = e.q_air_coeff
    th[I_QHEAT] = e.q_heat_demand if e.heating else 0.0
    th[I_TAMB_CL] = e.t_amb
    th[I_A1 : I_A1 + 8] = c.alpha
    th[I_B1] = c.beta_1
    th[I_B2] = c.beta_2
    th[I_TAMB_CAT] = c.t_amb
    th[I_AT0], th[I_AV0] = m.alpha_cold
    th[I_AT1], th[I_AV1] = m.alpha_warm
    th[I_EPS] = m.on_threshold
    th[I_PMAX] = m.p_max
    sk, uk = b.knots()
    ool = np.asarray(m.ool, dtype=float)
    return PackedModel(th, sk, uk, ool[:, 0].copy(), ool[:, 1].copy())


@njit(cache=True)
def _k_interp(x, xs, ys):
    """Clamped linear interpolation returning (value, slope)."""
    n = xs.shape[0]
    if n == 1 or x <= xs[0]:
        return ys[0], 0.0
    if x >= xs[n - 1]:
        return ys[n - 1], 0.0
    i = np.searchsorted(xs, x, side="right") - 1
    s = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
    return ys[i] + s * (x - xs[i]), s


@njit(cache=True)
def _k_soc_rate(soc, p_bat, theta, sk, uk):
    """dSOC/dt and its partials (d/dsoc, d/dp_bat). Discharge (p_bat > 0) lowers SOC."""
    r = theta[I_R]
    c = theta[I_C]
    u, du = _k_interp(soc, sk, uk)
    disc = u * u - 4.0 * r * p_bat
    if disc < 0.0:
        raise ValueError("battery power exceeds U_oc^2/(4 R_int)")
    sq = math.sqrt(disc)
    rate = -(u - sq) / (2.0 * r * c)
    if sq > 0.0:
        d_p = -1.0 / (c * sq)
        d_u = -(1.0 - u / sq) / (2.0 * r * c)
    else:
        d_p = -np.inf
        d_u = -np.inf
    return rate, d_u * du, d_p


@njit(cache=True)
def _k_alpha(t_cl, theta):
    t0 = theta[I_AT0]
    t1 = theta[I_AT1]
    v0 = theta[I_AV0]
    v1 = theta[I_AV1]
    if t_cl <= t0:
        return v0, 0.0
    if t_cl >= t1:
        return v1, 0.0
    s = (v1 - v0) / (t1 - t0)
    return v0 + s * (t_cl - t0), s


@njit(cache=True)
def _k_fuel_nominal(p, theta):
    den = theta[I_ETA] * theta[I_LHV]
    q2 = theta[I_Q2]
    return (p + theta[I_P0] + q2 * p * p) / den, (1.0 + 2.0 * q2 * p) / den


@njit(cache=True)
def _k_ool(p, ool_p, ool_w):
    """Engine speed, torque and their power derivatives on the operating line (p > 0)."""
    w, dw = _k_interp(p, ool_p, ool_w)
    tau = p / w
    dtau = (w - p * dw) / (w * w)
    return w, dw, tau, dtau


@njit(cache=True)
def _k_cat_on(t_cat, v, w, tau, theta):
    a = theta[I_A1 : I_A1 + 8]
    dt = t_cat - theta[I_TAMB_CAT]
    conv = a[0] + a[1] * v
    rate = (
        conv * dt
        + a[2] * w
        + a[3] * w * w
        + a[4] * tau
        + a[5] * tau * tau
        + a[6] * w * w * tau
        + a[7]
    )
    d_t = conv
    d_w = a[2] + 2.0 * a[3] * w + 2.0 * a[6] * w * tau
    d_tau = a[4] + 2.0 * a[5] * tau + a[6] * w * w
    d_v = a[1] * dt
    return rate, d_t, d_w, d_tau, d_v


@njit(cache=True)
def _k_cat_off(t_cat, theta):
    return theta[I_B1] * (t_cat - theta[I_TAMB_CAT]) + theta[I_B2], theta[I_B1]


@njit(cache=True)
def _k_thermal(p, duty, p_run, d_duty, d_run, t_cl, t_cat, v, theta, ool_p, ool_w):
    """Fuel rate and thermal rates for engine mechanical power ``p``.

    The engine is modelled as running at ``p_run`` for a fraction ``duty`` of the
    interval (``duty * p_run`` need not equal ``p`` for the sigmoid gate); ``d_duty``
    and ``d_run`` are their derivatives with respect to ``p``. The plant uses
    duty in {0, 1} with ``p_run = p``.

    Returns (mdot, dmdot_dp, dmdot_dtcl, dtcl, dtcl_dp, dtcl_dtcl,
    dtcat, dtcat_dp, dtcat_dtcat).
    """
    mc = theta[I_MC]
    lhv = theta[I_LHV]
    keep = 1.0 - theta[I_QEXH]
    qair = theta[I_QAIR]
    off, doff = _k_cat_off(t_cat, theta)
    if duty <= 0.0 and d_duty == 0.0:
        mdot = 0.0
        dm_p = 0.0
        dm_t = 0.0
        cat = off
        dcat_p = 0.0
        dcat_t = doff
    else:
        pr = p_run if p_run > 0.0 else 0.0
        w, dw, tau, dtau = _k_ool(pr, ool_p, ool_w)
        f, df = _k_fuel_nominal(pr, theta)
        a, da = _k_alpha(t_cl, theta)
        mdot = duty * a * f
        dm_p = d_duty * a * f + duty * a * df * d_run
        dm_t = duty * da * f
        on, don_t, don_w, don_tau, _ = _k_cat_on(t_cat, v, w, tau, theta)
        don_p = don_w * dw + don_tau * dtau
        cat = duty * on + (1.0 - duty) * off
        dcat_p = d_duty * (on - off) + duty * don_p * d_run
        dcat_t = duty * don_t + (1.0 - duty) * doff
    q_net = lhv * keep * mdot - p - qair * (t_cl - theta[I_TAMB_CL]) - theta[I_QHEAT]
    dtcl = q_net / mc
    dtcl_p = (lhv * keep * dm_p - 1.0) / mc
    dtcl_t = (lhv * keep * dm_t - qair) / mc
    return mdot, dm_p, dm_t, dtcl, dtcl_p, dtcl_t, cat, dcat_p, dcat_t


@njit(cache=True)
def _k_gate(p, kind, p_star, width):
    """Smooth on/off gate for the optimisation model.

    kind 0: duty-cycle envelope, engine runs at max(p, p_star) for min(p/p_star, 1)
    of the interval. kind 1: logistic gate centred at the on-threshold.
    Returns (duty, d_duty/dp, p_run, d_run/dp).
    """
    if kind == 0:
        if p >= p_star:
            return 1.0, 0.0, p, 1.0
        if p <= 0.0:
            return 0.0, 1.0 / p_star, p_star, 0.0
        return p / p_star, 1.0 / p_star, p_star, 0.0
    z = (p - width) / (0.25 * width)
    if z > 40.0:
        return 1.0, 0.0, p, 1.0
    s = 1.0 / (1.0 + math.exp(-z))
    return s, s * (1.0 - s) / (0.25 * width), p, 1.0


@njit(cache=True)
def _k_plant_step(x, p_bat, p_eng, on, v, dt, theta, sk, uk, ool_p, ool_w, out):
    """Forward-Euler plant update; writes the new state into ``out`` and returns fuel rate."""
    duty = 1.0 if on else 0.0
    rs, _, _ = _k_soc_rate(x[0], p_bat, theta, sk, uk)
    mdot, _, _, dtcl, _, _, dcat, _, _ = _k_thermal(
        p_eng, duty, p_eng, 0.0, 1.0, x[1], x[2], v, theta, ool_p, ool_w
    )
    out[0] = x[0] + dt * rs
    out[1] = x[1] + dt * dtcl
    out[2] = x[2] + dt * dcat
    return mdot


# ----------------------------------------------------------------------------
# public API


@dataclass(frozen=True)
class EnginePoint:
    omega_e: float
    tau_e: float

    @property
    def p_eng(self) -> float:
        return self.omega_e * self.tau_e

    @property
    def is_on(self) -> bool:
        return self.omega_e > 0.0


ENGINE_OFF = EnginePoint(0.0, 0.0)


def traction_power(v: float, a: float, p: RoadLoadParams) -> float:
    """Wheel power [W] for speed ``v`` and acceleration ``a``; negative while braking."""
    if v < 0:
        raise ValueError("speed must be non-negative")
    force = p.mass * a + p.mass * GRAVITY * p.rolling_coeff + p.drag_area_coeff * v * v
    return force * v


def bus_demand(p_trac: float, p: RoadLoadParams) -> float:
    """Power the engine/battery pair must deliver (or may recover) for wheel power ``p_trac``."""
    if p_trac >= 0:
        return p_trac / p.drivetrain_efficiency
    return p_trac * p.drivetrain_efficiency * p.regen_fraction


def power_split(p_trac: float, p_bat: float, p_bat_aux: float, p_eng_max: float = math.inf) -> float:
    """Engine power from the bus power balance ``P_eng = P_trac - (P_bat - P_aux)``.

    Negative results are returned unchanged; whether they are absorbed by friction
    braking is the caller's decision.
    """
    p_eng = p_trac - (p_bat - p_bat_aux)
    if p_eng > p_eng_max * (1 + 1e-12):
        raise InfeasibleSplit(f"engine power {p_eng:.1f} W exceeds limit {p_eng_max:.1f} W")
    return p_eng


def soc_rate(soc: float, p_bat: float, b: BatteryParams) -> float:
    pk = pack(ModelParams(battery=b))
    try:
        return _k_soc_rate(soc, p_bat, pk.theta, pk.soc_knots, pk.uoc_knots)[0]
    except ValueError as exc:
        raise BatteryLimitError(str(exc)) from None


def soc_rate_partials(soc: float, p_bat: float, b: BatteryParams) -> tuple[float, float]:
    pk = pack(ModelParams(battery=b))
    _, d_soc, d_p = _k_soc_rate(soc, p_bat, pk.theta, pk.soc_knots, pk.uoc_knots)
    return d_soc, d_p


def fuel_correction(t_cl: float, m: EngineMapParams) -> float:
    """Cold-coolant fuel multiplier alpha(T_cl) >= 1."""
    th = np.zeros(N_THETA)
    th[I_AT0], th[I_AV0] = m.alpha_cold
    th[I_AT1], th[I_AV1] = m.alpha_warm
    return _k_alpha(t_cl, th)[0]


def ool_lookup(p_eng: float, m: EngineMapParams) -> EnginePoint:
    """Engine speed/torque on the optimal operating line; exactly ``omega * tau == p_eng``."""
    if p_eng < 0 or p_eng > m.p_max * (1 + 1e-12):
        raise ValueError(f"engine power {p_eng} outside [0, {m.p_max}]")
    if p_eng == 0:
        return ENGINE_OFF
    ool = np.asarray(m.ool, dtype=float)
    w = float(np.interp(p_eng, ool[:, 0], ool[:, 1]))
    return EnginePoint(w, p_eng / w)


def fuel_rate(pt: EnginePoint, t_cl: float, params: ModelParams) -> float:
    """Fuel mass rate [kg/s] = alpha(T_cl) * nominal map; zero when the engine is off."""
    if not pt.is_on:
        return 0.0
    pk = pack(params)
    f, _ = _k_fuel_nominal(pt.p_eng, pk.theta)
    return _k_alpha(t_cl, pk.theta)[0] * f


def _thermal(pt: EnginePoint, t_cl, t_cat, v, params):
    pk = pack(params)
    duty = 1.0 if pt.is_on else 0.0
    return _k_thermal(pt.p_eng, duty, pt.p_eng, 0.0, 1.0, t_cl, t_cat, v, pk.theta, pk.ool_p, pk.ool_w)


def coolant_rate(t_cl: float, pt: EnginePoint, params: ModelParams) -> float:
    """dT_cl/dt [C/s] from the coolant energy balance."""
    return _thermal(pt, t_cl, params.catalyst.light_off, 0.0, params)[3]


def coolant_rate_partials(t_cl: float, pt: EnginePoint, params: ModelParams) -> tuple[float, float]:
    """(d/dT_cl, d/dP_eng) of the coolant rate, moving along the operating line in power."""
    r = _thermal(pt, t_cl, params.catalyst.light_off, 0.0, params)
    return r[5], r[4]


def catalyst_rate(t_cat: float, v_veh: float, pt: EnginePoint, engine_on: bool, c: CatalystParams) -> float:
    th = np.zeros(N_THETA)
    th[I_A1 : I_A1 + 8] = c.alpha
    th[I_B1], th[I_B2], th[I_TAMB_CAT] = c.beta_1, c.beta_2, c.t_amb
    if engine_on:
        return _k_cat_on(t_cat, v_veh, pt.omega_e, pt.tau_e, th)[0]
    return _k_cat_off(t_cat, th)[0]


def catalyst_rate_partials(
    t_cat: float, v_veh: float, pt: EnginePoint, engine_on: bool, c: CatalystParams
) -> dict[str, float]:
    """Partials of the catalyst rate with respect to t_cat, omega, tau and v."""
    th = np.zeros(N_THETA)
    th[I_A1 : I_A1 + 8] = c.alpha
    th[I_B1], th[I_B2], th[I_TAMB_CAT] = c.beta_1, c.beta_2, c.t_amb
    if engine_on:
        _, d_t, d_w, d_tau, d_v = _k_cat_on(t_cat, v_veh, pt.omega_e, pt.tau_e, th)
        return {"t_cat": d_t, "omega": d_w, "tau": d_tau, "v": d_v}
    return {"t_cat": c.beta_1, "omega": 0.0, "tau": 0.0, "v": 0.0}


@dataclass(frozen=True)
class Control:
    p_bat: float
    engine_on: bool


def engine_power(p_dem: float, p_bat: float, road: RoadLoadParams) -> tuple[float, float]:
    """Engine power and friction-brake power for bus demand ``p_dem`` and battery power.

    Any surplus the battery does not absorb (braking, or over-discharge) is
    dissipated by the friction brakes, so the engine power never goes negative.
    """
    balance = power_split(p_dem, p_bat, road.aux_power)
    return max(balance, 0.0), max(-balance, 0.0)


def integrate_step(
    s: VehicleState,
    u: Control,
    v: float,
    a: float,
    dt: float,
    params: ModelParams,
    packed: PackedModel | None = None,
) -> tuple[VehicleState, float]:
    """Advance the plant by one forward-Euler step.

    Returns the new state and the fuel mass [kg] burned during the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    pk = packed or pack(params)
    p_dem = bus_demand(traction_power(v, a, params.road), params.road)
    p_eng, _ = engine_power(p_dem, u.p_bat, params.road)
    if p_eng > params.engine.p_max * (1 + 1e-9):
        raise InfeasibleSplit(f"engine power {p_eng:.1f} W exceeds limit {params.engine.p_max:.1f} W")
    if not u.engine_on and p_eng > params.engine.on_threshold:
        raise InfeasibleSplit(f"engine off but power balance requires {p_eng:.1f} W")
    if not u.engine_on:
        p_eng = 0.0
    out = np.empty(3)
    try:
        mdot = _k_plant_step(s.as_array(), u.p_bat, p_eng, u.engine_on, v, dt, *pk.arrays, out)
    except ValueError as exc:
        raise BatteryLimitError(str(exc)) from None
    return VehicleState(float(np.clip(out[0], 0.0, 1.0)), float(out[1]), float(out[2]), u.engine_on), mdot * dt
