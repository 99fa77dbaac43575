import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numba import njit

from iptm.solver import Nlp, check_kkt, estimate_multipliers, finite_diff_gradient, solve_nlp

METHODS = ["al", "slsqp"]
EMPTY_JAC = np.zeros((0, 1))


def quad1(x, data):
    return (x[0] - 3.0) ** 2, np.array([2.0 * (x[0] - 3.0)]), np.zeros(0), EMPTY_JAC


@njit(cache=True)
def _circle(x, data):
    # min x0 + x1  s.t.  x0^2 + x1^2 <= 2
    f = x[0] + x[1]
    g = np.ones(2)
    c = np.array([x[0] ** 2 + x[1] ** 2 - 2.0])
    j = np.empty((1, 2))
    j[0, 0] = 2 * x[0]
    j[0, 1] = 2 * x[1]
    return f, g, c, j


def eq_problem(x, data):
    # min (x0-1)^2 + (x1-2)^2  s.t.  x0 + x1 = 1
    f = (x[0] - 1) ** 2 + (x[1] - 2) ** 2
    g = np.array([2 * (x[0] - 1), 2 * (x[1] - 2)])
    return f, g, np.array([x[0] + x[1] - 1.0]), np.array([[1.0, 1.0]])


@pytest.mark.parametrize("method", METHODS)
def test_interior_quadratic(method):
    nlp = Nlp(1, quad1, [0.0], [10.0], np.zeros(0, bool))
    x, rep = solve_nlp(nlp, [0.0], method=method)
    assert rep.status == "optimal"
    assert x[0] == pytest.approx(3.0, abs=1e-6)
    assert rep.kkt_residual >= 0


@pytest.mark.parametrize("method", METHODS)
def test_clipped_quadratic(method):
    nlp = Nlp(1, quad1, [0.0], [2.0], np.zeros(0, bool))
    x, rep = solve_nlp(nlp, [0.5], method=method)
    assert x[0] == pytest.approx(2.0, abs=1e-9)
    assert check_kkt(nlp, x).ok(1e-8)


@pytest.mark.parametrize("method", METHODS)
def test_inequality(method):
    nlp = Nlp(2, _circle, [-5.0, -5.0], [5.0, 5.0], np.zeros(1, bool))
    assert nlp.jitted
    x, rep = solve_nlp(nlp, [0.0, 0.0], tol=1e-8, method=method)
    assert rep.status == "optimal"
    np.testing.assert_allclose(x, [-1.0, -1.0], atol=1e-5)
    assert rep.multipliers[0] == pytest.approx(0.5, abs=1e-4)
    assert rep.kkt_residual < 1e-4


@pytest.mark.parametrize("method", METHODS)
def test_equality(method):
    nlp = Nlp(2, eq_problem, [-5.0, -5.0], [5.0, 5.0], np.ones(1, bool))
    x, rep = solve_nlp(nlp, [0.0, 0.0], tol=1e-9, method=method)
    np.testing.assert_allclose(x, [0.0, 1.0], atol=1e-5)
    assert rep.multipliers[0] == pytest.approx(2.0, abs=1e-4)


@pytest.mark.parametrize("method", METHODS)
def test_infeasible_reported(method):
    def f(x, data):
        return x[0], np.array([1.0]), np.array([1.0 - x[0]]), np.array([[-1.0]])

    nlp = Nlp(1, f, [0.0], [0.5], np.zeros(1, bool))
    x, rep = solve_nlp(nlp, [0.1], max_iter=50, method=method)
    assert rep.status != "optimal"
    assert 0.0 <= x[0] <= 0.5


def test_unknown_method():
    nlp = Nlp(1, quad1, [0.0], [10.0], np.zeros(0, bool))
    with pytest.raises(ValueError):
        solve_nlp(nlp, [0.0], method="newton")


def test_bad_dimensions():
    with pytest.raises(ValueError):
        Nlp(2, quad1, [0.0], [1.0], np.zeros(0, bool))
    with pytest.raises(ValueError):
        Nlp(1, quad1, [1.0], [0.0], np.zeros(0, bool))


def test_kkt_report():
    nlp = Nlp(1, quad1, [0.0], [10.0], np.zeros(0, bool))
    assert check_kkt(nlp, [3.0]).residual < 1e-10
    assert check_kkt(nlp, [5.0]).stationarity > 0


def test_estimated_multipliers_active_bound():
    # on the circle the constraint is active; its multiplier closes stationarity
    nlp = Nlp(2, _circle, [-5.0, -5.0], [5.0, 5.0], np.zeros(1, bool))
    lam = estimate_multipliers(nlp, np.array([-1.0, -1.0]))
    assert lam[0] == pytest.approx(0.5)


def test_finite_differences():
    np.testing.assert_array_equal(finite_diff_gradient(lambda x: 4.0, np.ones(3)), 0.0)
    assert finite_diff_gradient(lambda x: x[0] ** 2, np.array([1.0]), 1e-5)[0] == pytest.approx(2.0, abs=1e-8)
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda x: 0.0, np.ones(1), 0.0)


@st.composite
def convex_qp(draw):
    n = draw(st.integers(1, 5))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    a = rng.normal(size=(n, n))
    q = a @ a.T + n * np.eye(n)
    b = rng.normal(size=n) * 3
    lb = -rng.uniform(0.1, 2.0, n)
    ub = rng.uniform(0.1, 2.0, n)
    return q, b, lb, ub


def _qp_reference(q, b, lb, ub):
    from scipy.optimize import minimize

    r = minimize(lambda x: 0.5 * x @ q @ x + b @ x, np.zeros(len(b)), jac=lambda x: q @ x + b,
                 bounds=list(zip(lb, ub)), method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-12})
    return r.fun


@settings(max_examples=25, deadline=None)
@given(convex_qp(), st.sampled_from(METHODS))
def test_box_qp_matches_reference(case, method):
    q, b, lb, ub = case

    def f(x, data):
        return 0.5 * x @ q @ x + b @ x, q @ x + b, np.zeros(0), np.zeros((0, len(b)))

    nlp = Nlp(len(b), f, lb, ub, np.zeros(0, bool))
    x, rep = solve_nlp(nlp, np.zeros(len(b)), tol=1e-9, max_iter=2000, method=method)
    assert np.all(x >= lb) and np.all(x <= ub)
    assert rep.objective == pytest.approx(_qp_reference(q, b, lb, ub), abs=1e-8)


@settings(max_examples=15, deadline=None)
@given(convex_qp())
def test_al_history_monotone_without_constraints(case):
    q, b, lb, ub = case

    def f(x, data):
        return 0.5 * x @ q @ x + b @ x, q @ x + b, np.zeros(0), np.zeros((0, len(b)))

    nlp = Nlp(len(b), f, lb, ub, np.zeros(0, bool))
    x, rep = solve_nlp(nlp, ub.copy(), tol=1e-9, max_iter=500)
    assert np.all(np.diff(rep.history) <= 1e-12)


def test_deterministic():
    nlp = Nlp(2, _circle, [-5.0, -5.0], [5.0, 5.0], np.zeros(1, bool))
    a, _ = solve_nlp(nlp, [0.3, 0.1])
    b, _ = solve_nlp(nlp, [0.3, 0.1])
    np.testing.assert_array_equal(a, b)
