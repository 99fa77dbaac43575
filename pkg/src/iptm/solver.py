"""Dense small-scale NLP solvers with a common report.

``method="al"``: Powell-Hestenes-Rockafellar augmented Lagrangian for the general
constraints ``c(x) <= 0`` / ``c(x) = 0``; each subproblem is minimised over the
variable box by projected gradient with Barzilai-Borwein step lengths and a
monotone Armijo backtracking search along the projected direction. Iterates are
always projected onto the box.

The core is written in a numba-compatible subset of Python. When the problem
evaluator is itself a numba function the compiled core is used; otherwise the
very same code runs in the interpreter.

``method="slsqp"``: scipy's sequential least-squares QP (active-set SQP with a
BFGS Hessian). It handles the nearly linear, degenerate problems of the
controller much better than first-order iterations. Its iterates may leave the
box by rounding, so evaluations are clipped. Multipliers are recovered
afterwards by non-negative least squares on the active set.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher
from scipy.optimize import minimize, nnls

STATUS = ("optimal", "max_iter", "infeasible", "fallback")
OPTIMAL, MAX_ITER, INFEASIBLE, FALLBACK = range(4)


@dataclass
class Nlp:
    """``min f(x)`` subject to ``lb <= x <= ub`` and ``c(x) <= 0`` (``c(x) = 0`` where ``is_eq``).

    ``evaluate(x, data)`` returns ``(f, grad, c, jac)`` with ``jac`` of shape (m, n).
    """

    n: int
    evaluate: Callable
    lb: np.ndarray
    ub: np.ndarray
    is_eq: np.ndarray
    data: tuple = ()

    def __post_init__(self):
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        self.is_eq = np.asarray(self.is_eq, dtype=np.bool_)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("bound vectors must have length n")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound above upper bound")

    @property
    def m(self) -> int:
        return len(self.is_eq)

    @property
    def jitted(self) -> bool:
        return isinstance(self.evaluate, CPUDispatcher)

    def __call__(self, x):
        return self.evaluate(np.asarray(x, dtype=float), self.data)

    def objective(self, x) -> float:
        return float(self(x)[0])

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self(x)[1])

    def constraints(self, x) -> np.ndarray:
        return np.asarray(self(x)[2])

    def jacobian(self, x) -> np.ndarray:
        return np.asarray(self(x)[3])


@dataclass
class SolveReport:
    status: str
    objective: float
    kkt_residual: float
    iterations: int
    wall_time: float
    max_violation: float = 0.0
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    history: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal: float
    complementarity: float

    @property
    def residual(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)

    def ok(self, tol: float) -> bool:
        return self.residual <= tol


def _merit(evaluate, data, x, lam, rho, is_eq, grad, w):
    """Augmented Lagrangian value; fills its gradient and the multiplier estimate ``w``."""
    f, g, c, jac = evaluate(x, data)
    n = x.shape[0]
    m = c.shape[0]
    val = f
    for j in range(n):
        grad[j] = g[j]
    viol = 0.0
    comp = 0.0
    for i in range(m):
        ci = c[i]
        t = lam[i] + rho * ci
        if is_eq[i]:
            val += lam[i] * ci + 0.5 * rho * ci * ci
            viol = max(viol, abs(ci))
        else:
            if t > 0.0:
                val += (t * t - lam[i] * lam[i]) / (2.0 * rho)
            else:
                t = 0.0
                val -= lam[i] * lam[i] / (2.0 * rho)
            viol = max(viol, ci)
            comp = max(comp, min(t, -ci))
        w[i] = t
        if t != 0.0:
            for j in range(n):
                grad[j] += t * jac[i, j]
    return val, f, viol, comp


def _proj_residual(x, g, lb, ub):
    r = 0.0
    for j in range(x.shape[0]):
        y = min(max(x[j] - g[j], lb[j]), ub[j])
        r = max(r, abs(y - x[j]))
    return r


def _make_core(merit, proj_residual):
    """Bind the helper functions so the core can be built interpreted or compiled."""
    _merit = merit
    _proj_residual = proj_residual

    def core(evaluate, data, x0, lb, ub, is_eq, tol, tol_feas, max_iter, rho0, lam0, hist):
        n = x0.shape[0]
        m = is_eq.shape[0]
        x = np.empty(n)
        for j in range(n):
            x[j] = min(max(x0[j], lb[j]), ub[j])
        lam = lam0.copy()
        rho = rho0
        g = np.empty(n)
        w = np.empty(m)
        gn = np.empty(n)
        wn = np.empty(m)
        xn = np.empty(n)
        d = np.empty(n)
        big = 0.0
        for j in range(n):
            big = max(big, ub[j] - lb[j])
        big = min(big, 1e6)
        L, f, viol, comp = _merit(evaluate, data, x, lam, rho, is_eq, g, w)
        gmax = 0.0
        for j in range(n):
            gmax = max(gmax, abs(g[j]))
        alpha = 1.0 / gmax if gmax > 0.0 else 1.0
        it = 0
        status = MAX_ITER
        eps = max(tol, 1e-2)
        viol_prev = math.inf
        r = _proj_residual(x, g, lb, ub)
        for _outer in range(60):
            while it < max_iter:
                r = _proj_residual(x, g, lb, ub)
                if r <= eps:
                    break
                gd = 0.0
                for j in range(n):
                    d[j] = min(max(x[j] - alpha * g[j], lb[j]), ub[j]) - x[j]
                    gd += g[j] * d[j]
                if gd >= 0.0:
                    break
                t = 1.0
                accepted = False
                for _ls in range(40):
                    for j in range(n):
                        xn[j] = x[j] + t * d[j]
                    Ln, fn, violn, compn = _merit(evaluate, data, xn, lam, rho, is_eq, gn, wn)
                    if Ln <= L + 1e-4 * t * gd:
                        accepted = True
                        break
                    t *= 0.5
                if not accepted:
                    break
                ss = 0.0
                sy = 0.0
                for j in range(n):
                    s = xn[j] - x[j]
                    ss += s * s
                    sy += s * (gn[j] - g[j])
                    x[j] = xn[j]
                    g[j] = gn[j]
                for i in range(m):
                    w[i] = wn[i]
                L, f, viol, comp = Ln, fn, violn, compn
                if sy > 1e-300:
                    alpha = min(max(ss / sy, 1e-12), big)
                else:
                    alpha = big
                hist[it] = L
                it += 1
            r = _proj_residual(x, g, lb, ub)
            if viol <= tol_feas and r <= tol and comp <= tol_feas:
                status = OPTIMAL
                for i in range(m):
                    lam[i] = w[i]
                break
            if it >= max_iter:
                for i in range(m):
                    lam[i] = w[i]
                break
            for i in range(m):
                lam[i] = w[i]
            if viol > 0.25 * viol_prev:
                rho *= 10.0
            viol_prev = viol
            if rho > 1e12:
                status = INFEASIBLE
                break
            eps = max(tol, 0.1 * eps)
            L, f, viol, comp = _merit(evaluate, data, x, lam, rho, is_eq, g, w)
        return x, lam, status, it, f, viol, r

    return core


_al_core = _make_core(_merit, _proj_residual)
_al_core_jit = njit(_make_core(njit(_merit), njit(_proj_residual)))


def solve_nlp(
    nlp: Nlp,
    x0,
    tol: float = 1e-6,
    max_iter: int = 200,
    tol_feas: float | None = None,
    rho0: float = 10.0,
    lam0: np.ndarray | None = None,
    method: str = "al",
) -> tuple[np.ndarray, SolveReport]:
    """Solve ``nlp`` from ``x0``; never raises on non-convergence.

    ``max_iter`` bounds the total number of projected-gradient iterations across
    all multiplier updates (``"al"``) or the SQP iterations (``"slsqp"``). Returns the final iterate and a report whose
    ``kkt_residual`` is the max of stationarity, feasibility and complementarity.
    """
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (nlp.n,):
        raise ValueError("x0 has wrong length")
    if method == "slsqp":
        return _solve_slsqp(nlp, x0, tol, max_iter, tol if tol_feas is None else tol_feas, t0)
    if method != "al":
        raise ValueError(f"unknown method {method!r}")
    lam = np.zeros(nlp.m) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    hist = np.zeros(max(max_iter, 1))
    core = _al_core_jit if nlp.jitted else _al_core
    x, lam, status, it, f, viol, r = core(
        nlp.evaluate,
        nlp.data,
        x0,
        nlp.lb,
        nlp.ub,
        nlp.is_eq,
        tol,
        tol if tol_feas is None else tol_feas,
        max_iter,
        rho0,
        lam,
        hist,
    )
    kkt = check_kkt(nlp, x, lam)
    return x, SolveReport(
        status=STATUS[status],
        objective=float(f),
        kkt_residual=kkt.residual,
        iterations=int(it),
        wall_time=time.perf_counter() - t0,
        max_violation=max(float(viol), 0.0),
        multipliers=lam,
        history=hist[:it].copy(),
    )


def _solve_slsqp(nlp: Nlp, x0, tol, max_iter, tol_feas, t0) -> tuple[np.ndarray, SolveReport]:
    last = [None, None]

    def ev(x):
        x = np.clip(x, nlp.lb, nlp.ub)
        if last[0] is None or not np.array_equal(last[0], x):
            last[0], last[1] = x.copy(), nlp(x)
        return last[1]

    cons = []
    ineq = ~nlp.is_eq
    if ineq.any():
        cons.append({"type": "ineq", "fun": lambda x: -np.asarray(ev(x)[2])[ineq],
                     "jac": lambda x: -np.asarray(ev(x)[3])[ineq]})
    if nlp.is_eq.any():
        cons.append({"type": "eq", "fun": lambda x: np.asarray(ev(x)[2])[nlp.is_eq],
                     "jac": lambda x: np.asarray(ev(x)[3])[nlp.is_eq]})
    hist = []

    def fun(x):
        return float(ev(x)[0])

    with warnings.catch_warnings():
        # iterates stepping past the box by rounding are clipped, which scipy reports
        warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
        res = minimize(
            fun, np.clip(x0, nlp.lb, nlp.ub), jac=lambda x: np.asarray(ev(x)[1]), method="SLSQP",
            bounds=list(zip(nlp.lb, nlp.ub)), constraints=cons, callback=lambda xk: hist.append(fun(xk)),
            options={"maxiter": max_iter, "ftol": tol * 1e-2},
        )
    x = np.clip(res.x, nlp.lb, nlp.ub)
    f, _, c, _ = nlp(x)
    c = np.asarray(c, dtype=float)
    viol = _violation(c, nlp.is_eq)
    if res.status == 0 and viol <= tol_feas:
        status = "optimal"
    elif res.status in (0, 9) or viol <= tol_feas:
        status = "max_iter"
    else:
        status = "infeasible"
    lam = estimate_multipliers(nlp, x)
    kkt = check_kkt(nlp, x, lam)
    return x, SolveReport(
        status=status,
        objective=float(f),
        kkt_residual=kkt.residual,
        iterations=int(res.nit),
        wall_time=time.perf_counter() - t0,
        max_violation=viol,
        multipliers=lam,
        history=np.asarray(hist),
    )


def _violation(c: np.ndarray, is_eq: np.ndarray) -> float:
    if c.size == 0:
        return 0.0
    return float(max(np.max(np.maximum(c[~is_eq], 0.0), initial=0.0), np.max(np.abs(c[is_eq]), initial=0.0)))


def estimate_multipliers(nlp: Nlp, x, active_tol: float = 1e-6) -> np.ndarray:
    """Least-squares multipliers for the near-active constraints at ``x``.

    Variables sitting on a bound are left out of the stationarity fit, since
    their bound multiplier absorbs the residual. Inequality multipliers are
    kept non-negative; equality ones are split into two signed parts.
    """
    x = np.asarray(x, dtype=float)
    _, g, c, jac = nlp(x)
    lam = np.zeros(nlp.m)
    if nlp.m == 0:
        return lam
    c = np.asarray(c, dtype=float)
    jac = np.asarray(jac, dtype=float)
    g = np.asarray(g, dtype=float)
    act = nlp.is_eq | (c >= -active_tol)
    free = (x > nlp.lb + 1e-9) & (x < nlp.ub - 1e-9)
    idx = np.flatnonzero(act)
    if idx.size == 0 or not free.any():
        return lam
    a = jac[np.ix_(idx, free)].T
    eq = nlp.is_eq[idx]
    a_full = np.hstack([a, -a[:, eq]])
    sol, _ = nnls(a_full, -g[free])
    lam[idx] = sol[: idx.size]
    lam[idx[eq]] -= sol[idx.size:]
    return lam


def check_kkt(nlp: Nlp, x, multipliers=None, tol: float | None = None) -> KktReport:
    """Stationarity of the Lagrangian projected on the box, primal and complementarity norms.

    Bound multipliers are implicit in the projection. Negative inequality
    multipliers count as complementarity error.
    """
    x = np.asarray(x, dtype=float)
    f, g, c, jac = nlp(x)
    lam = np.zeros(nlp.m) if multipliers is None else np.asarray(multipliers, dtype=float)
    grad = np.asarray(g, dtype=float) + (np.asarray(jac).T @ lam if nlp.m else 0.0)
    stat = float(np.max(np.abs(np.clip(x - grad, nlp.lb, nlp.ub) - x))) if nlp.n else 0.0
    c = np.asarray(c, dtype=float)
    ineq = ~nlp.is_eq
    primal = 0.0
    comp = 0.0
    if nlp.m:
        primal = float(max(np.max(np.maximum(c[ineq], 0.0), initial=0.0), np.max(np.abs(c[nlp.is_eq]), initial=0.0)))
        comp = float(np.max(np.abs(np.minimum(lam[ineq], -c[ineq])), initial=0.0))
    return KktReport(stat, primal, comp)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out
