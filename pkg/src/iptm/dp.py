"""Backward-induction dynamic programming on state grids: the reference optimum for
small discretized control problems."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numba import njit
from scipy.interpolate import RegularGridInterpolator

from .powertrain import ModelParams, VehicleState, _k_plant_step

MAX_GRID = 10**6
INFEASIBLE_COST = 1e6


class GridTooLarge(ValueError):
    pass


@dataclass
class DpResult:
    cost: float  # optimal cost from the initial state
    values: list[np.ndarray]  # value function per stage on the grid, stage 0..N
    policy: list[np.ndarray]  # index of the optimal control per stage on the grid
    first_control: int
    controls: np.ndarray
    states: np.ndarray | None = None  # forward-simulated optimal state path
    control_path: np.ndarray | None = None

    @property
    def feasible(self) -> bool:
        return self.cost < INFEASIBLE_COST


StepFn = Callable[[int, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


def dp_oracle(
    step: StepFn,
    grids: Sequence[np.ndarray],
    controls: np.ndarray,
    n_steps: int,
    x0: np.ndarray,
    terminal: Callable[[np.ndarray], np.ndarray] | None = None,
) -> DpResult:
    """Exact optimum of the discretized problem by backward induction.

    ``step(k, X, U)`` maps stacked states ``X`` (M, d) and control indices ``U``
    (M,) to ``(X_next, stage_cost, feasible)``. Values between grid nodes are
    multilinear interpolations; next states outside the grid count as
    infeasible. Infeasibility carries a large finite cost so it never wins over a
    feasible choice. ``terminal(X)`` gives the terminal cost (infinite or large
    for an excluded terminal state).
    """
    grids = [np.asarray(g, dtype=float) for g in grids]
    controls = np.asarray(controls)
    shape = tuple(len(g) for g in grids)
    n_grid = int(np.prod(shape))
    if n_grid * len(controls) > MAX_GRID:
        raise GridTooLarge(f"{n_grid} states x {len(controls)} controls exceeds {MAX_GRID}")
    mesh = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, len(grids))
    nu = len(controls)
    X = np.repeat(mesh, nu, axis=0)
    U = np.tile(np.arange(nu), n_grid)
    lo = np.array([g[0] for g in grids])
    hi = np.array([g[-1] for g in grids])
    v_next = terminal(mesh) if terminal is not None else np.zeros(n_grid)
    v_next = np.minimum(v_next, INFEASIBLE_COST).reshape(shape)
    values = [None] * (n_steps + 1)
    policy = [None] * n_steps
    values[n_steps] = v_next
    for k in range(n_steps - 1, -1, -1):
        xn, cost, ok = step(k, X, U)
        inside = np.all((xn >= lo - 1e-12) & (xn <= hi + 1e-12), axis=1)
        interp = RegularGridInterpolator(grids, values[k + 1], bounds_error=False, fill_value=None)
        tail = interp(np.clip(xn, lo, hi))
        total = np.where(ok & inside, cost + tail, INFEASIBLE_COST + cost)
        total = np.minimum(total, 2 * INFEASIBLE_COST).reshape(n_grid, nu)
        best = np.argmin(total, axis=1)
        values[k] = total[np.arange(n_grid), best].reshape(shape)
        policy[k] = best.reshape(shape)
    x0 = np.asarray(x0, dtype=float)
    # evaluate all controls at x0 exactly rather than interpolating the policy
    xn, cost, ok = step(0, np.repeat(x0[None, :], nu, axis=0), np.arange(nu))
    inside = np.all((xn >= lo - 1e-12) & (xn <= hi + 1e-12), axis=1)
    tail = RegularGridInterpolator(grids, values[1], bounds_error=False, fill_value=None)(np.clip(xn, lo, hi))
    q0 = np.where(ok & inside, cost + tail, INFEASIBLE_COST + cost)
    first = int(np.argmin(q0))
    return DpResult(float(q0[first]), values, policy, first, controls)


def simulate_policy(res: DpResult, step: StepFn, grids, x0, n_steps: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Roll the DP policy forward from ``x0`` choosing, at every stage, the control
    minimising stage cost plus interpolated cost-to-go at the actual state.

    A stage with no feasible control adds ``INFEASIBLE_COST`` to the total.
    """
    grids = [np.asarray(g, dtype=float) for g in grids]
    lo = np.array([g[0] for g in grids])
    hi = np.array([g[-1] for g in grids])
    nu = len(res.controls)
    x = np.asarray(x0, dtype=float)
    path = [x.copy()]
    us = []
    total = 0.0
    for k in range(n_steps):
        xn, cost, ok = step(k, np.repeat(x[None, :], nu, axis=0), np.arange(nu))
        inside = np.all((xn >= lo - 1e-12) & (xn <= hi + 1e-12), axis=1)
        tail = RegularGridInterpolator(grids, res.values[k + 1], bounds_error=False, fill_value=None)(
            np.clip(xn, lo, hi)
        )
        q = np.where(ok & inside, cost + tail, INFEASIBLE_COST + cost)
        j = int(np.argmin(q))
        us.append(j)
        total += float(cost[j]) + (0.0 if ok[j] and inside[j] else INFEASIBLE_COST)
        x = xn[j]
        path.append(x.copy())
    return np.array(path), np.array(us), total


# ----------------------------------------------------------------------------
# the HEV trip problem


@njit(cache=True)
def _batch_step(X, p_need, p_eng, v, dt, bmin, bmax, theta, sk, uk, ool_p, ool_w, out, fuel, ok):
    tmp = np.empty(3)
    for i in range(X.shape[0]):
        pe = p_eng[i]
        pb = p_need - pe
        good = True
        if pe < 0.0:
            # negative entries are friction braking with the engine off
            good = p_need < 0.0 and pb <= 0.0
            pe = 0.0
        if pb > bmax + 1e-9:
            good = False
        if pb < bmin:
            # friction brakes take what the battery cannot absorb
            if p_need < bmin and pe == 0.0:
                pb = bmin
            else:
                good = False
        on = pe > 0.0
        if good:
            mdot = _k_plant_step(X[i], pb, pe, on, v, dt, theta, sk, uk, ool_p, ool_w, tmp)
            out[i, 0] = tmp[0]
            out[i, 1] = tmp[1]
            out[i, 2] = tmp[2]
            fuel[i] = mdot * dt
        else:
            out[i, 0] = X[i, 0]
            out[i, 1] = X[i, 1]
            out[i, 2] = X[i, 2]
            fuel[i] = 0.0
        ok[i] = good


@dataclass
class TripProblem:
    """Fuel-optimal engine scheduling over a known demand sequence.

    Controls are engine powers; a negative control ``-q`` means the engine is off
    and the friction brakes dissipate ``q`` watts that would otherwise be
    regenerated.
    """

    params: ModelParams
    p_need: np.ndarray  # bus demand plus auxiliaries per step [W]
    speed: np.ndarray  # vehicle speed per step [m/s]
    dt: float
    soc_bounds: tuple[float, float] = (0.4, 0.8)
    t_cl_bounds: tuple[float, float] = (40.0, 90.0)
    t_cat_min: float | None = 250.0  # None disables the light-off bound
    soc_init: float = 0.6
    terminal_band: tuple[float, float] = (0.99, 1.01)
    cost_scale: float = 1e3  # grams

    def step_fn(self, engine_powers: np.ndarray) -> StepFn:
        pk = self.params.packed()
        b = self.params.battery
        engine_powers = np.asarray(engine_powers, dtype=float)

        def step(k, X, U):
            m = X.shape[0]
            out = np.empty((m, 3))
            fuel = np.empty(m)
            ok = np.empty(m, dtype=np.bool_)
            pe = engine_powers[U]
            _batch_step(
                np.ascontiguousarray(X), float(self.p_need[k]), pe, float(self.speed[k]), self.dt,
                b.p_bat_min, b.p_bat_max, *pk.arrays, out, fuel, ok,
            )
            ok &= (out[:, 0] >= self.soc_bounds[0]) & (out[:, 0] <= self.soc_bounds[1])
            ok &= (out[:, 1] >= self.t_cl_bounds[0]) & (out[:, 1] <= self.t_cl_bounds[1])
            if self.t_cat_min is not None:
                ok &= out[:, 2] >= self.t_cat_min
            return out, fuel * self.cost_scale, ok

        return step

    def terminal_fn(self):
        lo = self.terminal_band[0] * self.soc_init
        hi = self.terminal_band[1] * self.soc_init

        def term(X):
            good = (X[:, 0] >= lo - 1e-12) & (X[:, 0] <= hi + 1e-12)
            return np.where(good, 0.0, INFEASIBLE_COST)

        return term

    def solve(self, grids, engine_powers, x0: VehicleState) -> DpResult:
        step = self.step_fn(engine_powers)
        n = len(self.p_need)
        res = dp_oracle(step, grids, np.asarray(engine_powers, dtype=float), n, x0.as_array(), self.terminal_fn())
        path, us, total = simulate_policy(res, step, grids, x0.as_array(), n)
        res.states, res.control_path = path, np.asarray(engine_powers)[us]
        res.cost = total
        return res
