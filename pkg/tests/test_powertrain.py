import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from iptm.powertrain import (
    ENGINE_OFF,
    BatteryLimitError,
    BatteryParams,
    CatalystParams,
    Control,
    EngineMapParams,
    EnginePoint,
    EngineThermalParams,
    InfeasibleSplit,
    ModelParams,
    RoadLoadParams,
    VehicleState,
    catalyst_rate,
    catalyst_rate_partials,
    coolant_rate,
    coolant_rate_partials,
    engine_power,
    fuel_correction,
    fuel_rate,
    integrate_step,
    ool_lookup,
    power_split,
    soc_rate,
    soc_rate_partials,
    traction_power,
)

P = ModelParams()
B = P.battery
CAT20 = CatalystParams(t_amb=20.0)


class TestTractionAndSplit:
    def test_zero_speed(self):
        assert traction_power(0.0, 0.0, RoadLoadParams()) == 0.0

    def test_cruise_hand_value(self):
        assert traction_power(10.0, 0.0, RoadLoadParams()) == pytest.approx(1871.5, rel=1e-12)

    def test_braking_is_negative(self):
        assert traction_power(10.0, -2.0, RoadLoadParams()) < 0

    def test_negative_speed_rejected(self):
        with pytest.raises(ValueError):
            traction_power(-1.0, 0.0, RoadLoadParams())

    @pytest.mark.parametrize(
        "p_trac, p_bat, expected", [(20e3, 20e3, 0.0), (20e3, -10e3, 30e3), (0.0, 0.0, 0.0)]
    )
    def test_power_split(self, p_trac, p_bat, expected):
        assert power_split(p_trac, p_bat, 0.0) == expected

    def test_split_over_engine_limit(self):
        with pytest.raises(InfeasibleSplit):
            power_split(80e3, 0.0, 0.0, p_eng_max=57e3)

    @given(st.floats(-40e3, 40e3), st.floats(-25e3, 25e3), st.floats(0, 2e3))
    def test_power_balance_closes(self, p_trac, p_bat, aux):
        p_eng = power_split(p_trac, p_bat, aux)
        assert p_eng + (p_bat - aux) == pytest.approx(p_trac, abs=1e-9)

    def test_engine_power_routes_surplus_to_brakes(self):
        p_eng, brake = engine_power(-5e3, -2e3, RoadLoadParams(aux_power=0.0))
        assert p_eng == 0.0 and brake == pytest.approx(3e3)


class TestSoc:
    def test_zero_power(self):
        assert soc_rate(0.6, 0.0, B) == 0.0

    def test_discriminant_boundary(self):
        b = BatteryParams(p_bat_max=90e3)
        p = b.u_oc**2 / (4 * b.resistance)
        expected = -b.u_oc / (2 * b.resistance * b.capacity)
        assert soc_rate(0.6, p, b) == pytest.approx(expected, rel=1e-12)

    def test_hand_example(self):
        # 200 V, 0.1 ohm, 23400 A s, 10 kW
        b = BatteryParams(capacity=23400.0)
        assert soc_rate(0.5, 10e3, b) == pytest.approx(-2.1930e-3, rel=1e-4)

    def test_beyond_limit_raises(self):
        with pytest.raises(BatteryLimitError):
            soc_rate(0.6, 1.1e5, B)

    def test_limit_check_on_params(self):
        with pytest.raises(ValueError):
            BatteryParams(p_bat_max=200e3)

    @given(st.floats(-25e3, 25e3), st.floats(1.0, 5e3))
    def test_strictly_decreasing(self, p, dp):
        assert soc_rate(0.6, p + dp, B) < soc_rate(0.6, p, B)

    def test_table_voltage(self):
        b = BatteryParams(u_oc_table=((0.0, 180.0), (1.0, 220.0)))
        assert soc_rate(0.5, 8e3, b) == pytest.approx(oracles.soc_rate(8e3, u_oc=200.0), rel=1e-12)
        d_soc, _ = soc_rate_partials(0.5, 8e3, b)
        h = 1e-6
        fd = (soc_rate(0.5 + h, 8e3, b) - soc_rate(0.5 - h, 8e3, b)) / (2 * h)
        assert d_soc == pytest.approx(fd, rel=1e-5)


class TestEngine:
    def test_off_point(self):
        assert ool_lookup(0.0, P.engine) == ENGINE_OFF

    def test_knot_readback(self):
        pt = ool_lookup(20e3, P.engine)
        assert pt.omega_e == 170.0 and pt.tau_e == pytest.approx(20e3 / 170.0)

    @given(st.floats(1.0, 57e3))
    def test_power_identity(self, p):
        pt = ool_lookup(p, P.engine)
        assert abs(pt.p_eng - p) <= 1e-9 * p

    @given(st.floats(0.0, 56e3), st.floats(0.0, 1e3))
    def test_speed_monotone(self, p, dp):
        assert ool_lookup(p + dp, P.engine).omega_e >= ool_lookup(p, P.engine).omega_e

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ool_lookup(60e3, P.engine)
        with pytest.raises(ValueError):
            ool_lookup(-1.0, P.engine)

    def test_fuel_off_is_zero(self):
        assert fuel_rate(ENGINE_OFF, 20.0, P) == 0.0

    def test_fuel_warm_is_nominal(self):
        pt = ool_lookup(15e3, P.engine)
        assert fuel_rate(pt, 90.0, P) == pytest.approx(oracles.fuel_nominal(15e3), rel=1e-12)

    def test_fuel_cold_multiplier(self):
        pt = ool_lookup(15e3, P.engine)
        assert fuel_correction(20.0, P.engine) == pytest.approx(1.3 - 0.3 * 30 / 70, rel=1e-12)
        assert fuel_rate(pt, 20.0, P) == pytest.approx(fuel_correction(20.0, P.engine) * oracles.fuel_nominal(15e3))

    @given(st.floats(-60.0, 150.0))
    def test_alpha_bounds(self, t):
        a = fuel_correction(t, P.engine)
        assert a >= 1.0
        if t >= 60.0:
            assert a == 1.0

    @given(st.floats(0.0, 57e3), st.floats(-20.0, 120.0))
    def test_fuel_nonnegative(self, p, t):
        pt = ool_lookup(p, P.engine)
        m = fuel_rate(pt, t, P)
        assert m >= 0.0 and (m == 0.0) == (p == 0.0)

    def test_peak_efficiency(self):
        e = P.engine
        p = e.p_peak_efficiency
        assert p == pytest.approx(25e3)
        assert e.brake_efficiency(p) > e.brake_efficiency(0.9 * p)
        assert e.brake_efficiency(p) > e.brake_efficiency(1.1 * p)
        assert 0.30 < e.brake_efficiency(p) < 0.40

    def test_bad_map(self):
        with pytest.raises(ValueError):
            EngineMapParams(ool=((0.0, 100.0), (1e3, 90.0)))


class TestThermal:
    def test_coolant_equilibrium(self):
        p = ModelParams().with_heating(False)
        assert coolant_rate(0.0, ENGINE_OFF, p) == 0.0

    def test_coolant_cools_when_off(self):
        p = ModelParams().with_heating(False)
        assert coolant_rate(40.0, ENGINE_OFF, p) < 0.0

    @pytest.mark.parametrize("power", [5e3, 20e3, 45e3])
    @pytest.mark.parametrize("heating", [True, False])
    def test_coolant_oracle(self, power, heating):
        p = ModelParams().with_heating(heating)
        pt = ool_lookup(power, p.engine)
        got = coolant_rate(70.0, pt, p)
        assert got == pytest.approx(oracles.coolant_rate(70.0, power, heating), rel=1e-12)

    def test_catalyst_off_examples(self):
        assert catalyst_rate(250.0, 0.0, ENGINE_OFF, False, CAT20) == pytest.approx(-0.43, rel=1e-12)
        assert catalyst_rate(20.0, 0.0, ENGINE_OFF, False, CAT20) == pytest.approx(-0.2, rel=1e-12)

    def test_catalyst_on_example(self):
        r = catalyst_rate(300.0, 10.0, EnginePoint(200.0, 100.0), True, CAT20)
        assert r == pytest.approx(6.03398, abs=1e-5)

    @given(st.floats(0.0, 800.0))
    def test_catalyst_off_cools(self, t):
        assert catalyst_rate(t, 5.0, ENGINE_OFF, False, CatalystParams()) < 0.0

    def test_catalyst_partials(self):
        pt = EnginePoint(180.0, 90.0)
        d = catalyst_rate_partials(320.0, 8.0, pt, True, CAT20)
        h = {"t_cat": 1e-3, "omega": 1e-3, "tau": 1e-3, "v": 1e-3}
        f = lambda tc, w, tau, v: catalyst_rate(tc, v, EnginePoint(w, tau), True, CAT20)
        base = dict(t_cat=320.0, omega=180.0, tau=90.0, v=8.0)
        for k in d:
            up, dn = dict(base), dict(base)
            up[k] += h[k]
            dn[k] -= h[k]
            fd = (f(up["t_cat"], up["omega"], up["tau"], up["v"]) - f(dn["t_cat"], dn["omega"], dn["tau"], dn["v"])) / (
                2 * h[k]
            )
            assert d[k] == pytest.approx(fd, rel=1e-6, abs=1e-12)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            CatalystParams(beta_1=1e-3)
        with pytest.raises(ValueError):
            EngineThermalParams(q_exh_fraction=1.2)


class TestIntegrate:
    S = VehicleState(0.6, 70.0, 300.0, False)

    def test_idle_vehicle_decays_only_thermally(self):
        p = ModelParams(road=RoadLoadParams(aux_power=0.0))
        s1, fuel = integrate_step(self.S, Control(0.0, False), 0.0, 0.0, 1.0, p)
        assert s1.soc == self.S.soc and fuel == 0.0
        assert s1.t_cl == pytest.approx(70.0 + oracles.coolant_rate(70.0, 0.0), rel=1e-12)
        assert s1.t_cat == pytest.approx(300.0 + oracles.catalyst_rate(300.0, 0, 0, 0, False), rel=1e-12)

    def test_euler_definition(self):
        p = ModelParams()
        u = Control(-5e3, True)
        s1, _ = integrate_step(self.S, u, 10.0, 0.5, 1.0, p)
        s2, _ = integrate_step(self.S, u, 10.0, 0.5, 2.0, p)
        assert s2.soc - self.S.soc == pytest.approx(2 * (s1.soc - self.S.soc), rel=1e-12)

    def test_richardson(self):
        p = ModelParams()
        u = Control(-5e3, True)

        def run(dt, n):
            s = self.S
            for _ in range(n):
                s, _ = integrate_step(s, u, 10.0, 0.5, dt, p)
            return s.as_array()

        x1, x2, x4 = run(4.0, 1), run(2.0, 2), run(1.0, 4)
        e1, e2 = np.abs(x1 - x4), np.abs(x2 - x4)
        # first order: halving the step roughly halves the global error
        assert np.all(e2[1:] < 0.75 * e1[1:])

    def test_engine_off_with_demand_is_infeasible(self):
        with pytest.raises(InfeasibleSplit):
            integrate_step(self.S, Control(0.0, False), 12.0, 1.0, 1.0, P)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            integrate_step(self.S, Control(0.0, False), 0.0, 0.0, 0.0, P)

    def test_engine_flag_propagates(self):
        s1, fuel = integrate_step(self.S, Control(0.0, True), 12.0, 0.0, 1.0, P)
        assert s1.engine_on and fuel > 0.0


def test_partials_against_finite_differences():
    rng = np.random.default_rng(3)
    p = ModelParams()
    for _ in range(20):
        soc, pb = rng.uniform(0.3, 0.9), rng.uniform(-25e3, 25e3)
        d_soc, d_p = soc_rate_partials(soc, pb, p.battery)
        h = 1.0
        fd = (soc_rate(soc, pb + h, p.battery) - soc_rate(soc, pb - h, p.battery)) / (2 * h)
        assert d_p == pytest.approx(fd, rel=1e-6)
        assert d_soc == 0.0
        t, pe = rng.uniform(-5, 110), rng.uniform(1e3, 50e3)
        dt_t, dt_p = coolant_rate_partials(t, ool_lookup(pe, p.engine), p)
        fd_t = (coolant_rate(t + 1e-4, ool_lookup(pe, p.engine), p) - coolant_rate(t - 1e-4, ool_lookup(pe, p.engine), p)) / 2e-4
        fd_p = (coolant_rate(t, ool_lookup(pe + 0.5, p.engine), p) - coolant_rate(t, ool_lookup(pe - 0.5, p.engine), p)) / 1.0
        assert dt_t == pytest.approx(fd_t, rel=1e-5)
        assert dt_p == pytest.approx(fd_p, rel=1e-5)
        assert math.isfinite(dt_p)
