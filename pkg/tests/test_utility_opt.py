import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bsdelab.bsde_core import TerminalFunctional, RegressionBasis, solve
from bsdelab.errors import ConfigurationError, InvalidInputError, UnsupportedError
from bsdelab.martingale_lab import StandardBM, TimeGrid, simulate
from bsdelab.utility_opt import (ClosedSet, ControlProcess, Diversification, Exponential,
                                 InfoCost, MarketModel, Power, closed_form_value,
                                 driver_from_penalty, info_cost_driver_closed_form, objective,
                                 optimal_control, prepare_driver, simulate_wealth,
                                 utility_values, verify_martingale_method)

W2 = np.array([[0.55, 0.45], [0.45, 0.55]])
W_INV = np.array([[0.3, 0.1], [0.2, 0.4]])   # I - w invertible


def market(theta, n=None):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return MarketModel(theta, StandardBM(theta.size))


def info_market(n):
    # the standard model already has m = I / sqrt(n)
    return MarketModel(np.zeros(n), StandardBM(n))


CASES = [
    ("power-closed", lambda: (market([0.1, 0.05]), ClosedSet("box", lo=[0, 0], hi=[0.3, 0.3]), Power(0.5))),
    ("power-div", lambda: (market([0.1, 0.05]), Diversification(W2, 2.0), Power(0.5))),
    ("power-info", lambda: (info_market(2), InfoCost([0.01, 0.02]), Power(0.5))),
    ("exp-closed", lambda: (market([0.1, 0.05]), ClosedSet("ball", radius=0.3), Exponential(1.0))),
    ("exp-div", lambda: (market([0.1, 0.05]), Diversification(W2, 2.0), Exponential(1.0))),
    ("exp-info", lambda: (info_market(2), InfoCost([0.005, 0.01]), Exponential(2.0))),
    ("power-neg-kappa", lambda: (market([0.2, -0.1]), ClosedSet("cone"), Power(-1.5))),
    ("riskneutral-div", lambda: (market([0.1, 0.05]), Diversification(W_INV, 3.0), Power(1.0))),
    ("riskneutral-box", lambda: (market([0.1, 0.05]), ClosedSet("box", lo=[-1, 0], hi=[1, 2]), Power(1.0))),
]


def _random_admissible(penalty, rng, size, n):
    pi = rng.normal(scale=1.5, size=(size, n))
    if isinstance(penalty, ClosedSet):
        pi = penalty.project(pi)
    if isinstance(penalty, InfoCost):
        pi = np.where(rng.random((size, n)) < 0.3, 0.0, pi)
    return pi


@pytest.mark.parametrize("name,build", CASES, ids=[c[0] for c in CASES])
def test_pointwise_optimality(name, build, rng):
    mk, pen, ut = build()
    for _ in range(20):
        z = rng.normal(scale=0.8, size=(1, mk.n))
        k = optimal_control(pen, ut, mk, 0, z)
        g_opt = objective(pen, ut, mk, k, z)
        pis = _random_admissible(pen, rng, 1000, mk.n)
        g = objective(pen, ut, mk, pis, np.repeat(z, 1000, axis=0))
        assert np.all(g_opt <= g + 1e-8)


def test_scalar_unconstrained_closed_form():
    mk = market([0.3])
    for kappa in (0.5, -2.0):
        ut = Power(kappa)
        z = np.array([[0.7]])
        k = optimal_control(ClosedSet("all"), ut, mk, 0, z)
        assert k[0, 0] == pytest.approx((0.3 - kappa * 0.7) / (1 - kappa), rel=1e-14)
    k = optimal_control(ClosedSet("all"), Exponential(2.0), mk, 0, np.array([[0.7]]))
    assert k[0, 0] == pytest.approx(0.7 + 0.3 / 2.0, rel=1e-14)


def test_zero_z_gives_zero_control_and_driver():
    for name, build in CASES:
        mk, pen, ut = build()
        if np.any(mk.theta != 0):
            continue
        z = np.zeros((3, mk.n))
        assert np.all(optimal_control(pen, ut, mk, 0, z) == 0)
        f = driver_from_penalty(pen, ut, mk)
        assert np.all(f(0, None, np.zeros((3, 1)), z[:, None, :]) == 0)


def test_exp_info_driver_zero_below_threshold():
    pen, ut = InfoCost([0.5, 0.5]), Exponential(1.0)
    mk = info_market(2)
    z = np.array([[0.3, -0.2]])   # z^2 < 2 C / kappa = 1
    assert np.all(optimal_control(pen, ut, mk, 0, z) == 0)
    assert info_cost_driver_closed_form(pen, ut, z)[0] == pytest.approx(0.5 * (0.09 + 0.04))


@given(arrays(float, (2,), elements=st.floats(-3, 3)))
def test_info_cost_driver_matches_closed_form(zv):
    z = zv[None, :]
    for pen, ut in ((InfoCost([0.01, 0.3]), Power(0.4)), (InfoCost([0.2, 0.05]), Exponential(1.5))):
        mk = info_market(2)
        k = optimal_control(pen, ut, mk, 0, z)
        g = objective(pen, ut, mk, k, z)
        assert g[0] == pytest.approx(info_cost_driver_closed_form(pen, ut, z)[0], abs=1e-12)


def test_info_cost_driver_continuous_across_threshold():
    pen, ut, mk = InfoCost([0.3]), Exponential(1.0), info_market(1)
    zc = np.sqrt(2 * 0.3 / 1.0)
    eps = 1e-9
    z = np.array([[zc - eps], [zc + eps]])
    f = driver_from_penalty(pen, ut, mk)(0, None, np.zeros((2, 1)), z[:, None, :])[:, 0]
    assert abs(f[1] - f[0]) < 1e-8


def test_diversification_beta2_first_order_condition(rng):
    mk = market([0.1, 0.05])
    for ut in (Power(0.5), Exponential(1.0)):
        pen = Diversification(W2, 2.0)
        z = rng.normal(size=(50, 2))
        k = optimal_control(pen, ut, mk, 0, z)
        B, m, kap = pen.B, mk.m, ut.kappa
        pm = k @ m
        if isinstance(ut, Power):
            grad = -kap * (pm - z) @ m.T + 2 * k @ B @ B.T - mk.theta + pm @ m.T
        else:
            grad = kap * (pm - z) @ m.T + 2 * k @ B @ B.T - mk.theta
        assert np.max(np.abs(grad)) < 1e-10


@given(arrays(float, (4, 2), elements=st.floats(-5, 5)))
def test_projection_idempotent(v):
    for C in (ClosedSet("box", lo=[-1, 0], hi=[1, 2]), ClosedSet("ball", radius=0.7),
              ClosedSet("cone"), ClosedSet("zero"), ClosedSet("all")):
        p = C.project(v)
        assert np.allclose(C.project(p), p, atol=1e-14)
        assert np.all(C.contains(p))


def test_unsupported_and_invalid_configs():
    with pytest.raises(ConfigurationError):
        Power(1.5)
    with pytest.raises(ConfigurationError):
        Exponential(0.0)
    with pytest.raises(UnsupportedError):
        optimal_control(Diversification(W2, 3.0), Exponential(1.0), market([0.1, 0.1]), 0,
                        np.zeros((1, 2)))
    with pytest.raises(UnsupportedError):
        optimal_control(InfoCost([0.1, 0.1]), Exponential(1.0), market([0.1, 0.1]), 0,
                        np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        optimal_control(Diversification(W2, 3.0), Power(1.0), market([0.1, 0.1]), 0,
                        np.zeros((1, 2)))


@pytest.fixture(scope="module")
def ens2():
    return simulate(StandardBM(2), TimeGrid.uniform(1.0, 32), 20000, 11)


def test_zero_control_keeps_wealth_constant(ens2):
    mk = market([0.1, 0.05])
    D = ControlProcess(np.zeros((ens2.P, ens2.N, 2)))
    for dyn, x in (("multiplicative", 2.0), ("additive", -1.0)):
        X = simulate_wealth(mk, D, ClosedSet("all"), dyn, ens2, x)
        assert np.all(X == x)


def test_additive_wealth_is_exact_sum(ens2):
    mk = market([0.1, 0.05])
    c = np.array([0.4, -0.2])
    D = ControlProcess(np.broadcast_to(c, (ens2.P, ens2.N, 2)).copy())
    X = simulate_wealth(mk, D, ClosedSet("all"), "additive", ens2, 1.0)
    expected = 1.0 + (c @ mk.theta) * ens2.dA.sum(axis=1) + (ens2.values[:, -1] - ens2.values[:, 0]) @ c
    assert np.allclose(X[:, -1], expected, atol=1e-12)


def test_exact_and_euler_wealth_agree_as_grid_refines():
    mk = market([0.1, 0.05])
    c = np.array([0.4, -0.2])
    errs = []
    for N in (16, 64, 256):
        e = simulate(StandardBM(2), TimeGrid.uniform(1.0, N), 2000, 5)
        D = ControlProcess(np.broadcast_to(c, (e.P, e.N, 2)).copy())
        Xe = simulate_wealth(mk, D, ClosedSet("all"), "multiplicative", e, 1.0)
        Xu = simulate_wealth(mk, D, ClosedSet("all"), "multiplicative", e, 1.0, scheme="euler")
        errs.append(np.sqrt(np.mean((Xe[:, -1] - Xu[:, -1]) ** 2)))
    assert errs[0] > errs[1] > errs[2]


def test_inadmissible_control_rejected(ens2):
    D = ControlProcess(np.full((ens2.P, ens2.N, 2), 0.5))
    with pytest.raises(InvalidInputError):
        simulate_wealth(market([0.1, 0.05]), D, ClosedSet("zero"), "additive", ens2, 0.0)


def test_zero_set_exponential_has_driver_quadratic_and_zero_control(ens2):
    mk = market([0.0, 0.0])
    pen, ut = ClosedSet("zero"), Exponential(1.5)
    z = np.array([[0.3, -0.4]])
    assert np.all(optimal_control(pen, ut, mk, 0, z) == 0)
    f = driver_from_penalty(pen, ut, mk)
    assert f(0, None, np.zeros((1, 1)), z[:, None, :])[0, 0] == pytest.approx(0.75 * 0.25)


def test_zero_terminal_exponential_gives_zero_Y(ens2):
    mk = market([0.0, 0.0])
    pen, ut = ClosedSet("ball", radius=0.5), Exponential(1.0)
    xi = TerminalFunctional(lambda p: np.zeros((p.shape[0], 1)), DXi=0.0, CXi=0.0)
    f, R = prepare_driver(pen, ut, mk, xi, ens2)
    sol = solve(ens2, xi, f, RegressionBasis(2))
    assert np.max(np.abs(sol.Y)) < 1e-12
    assert np.max(np.abs(sol.Z)) < 1e-12
    assert closed_form_value(ut, 0.0) == -1.0


def test_utility_values_match_closed_form_at_time_zero():
    X = np.array([2.0]); Y = np.array([0.3])
    assert utility_values(Power(0.5), X, Y)[0] == pytest.approx(closed_form_value(Power(0.5, 2.0), 0.3))
    assert utility_values(Exponential(2.0), np.array([0.0]), Y)[0] == pytest.approx(
        closed_form_value(Exponential(2.0), 0.3))


def test_verify_martingale_small_scale():
    ens = simulate(StandardBM(1), TimeGrid.uniform(1.0, 16), 20000, 3)
    xi = TerminalFunctional(lambda p: 0.3 * np.sin(p[:, -1, :1]), DXi=0.3, CXi=0.3)
    rep = verify_martingale_method(market([0.2]), ClosedSet("all"), Exponential(1.0), xi, ens,
                                   basis=RegressionBasis(5))
    assert rep.value_ok
    assert rep.dominance_ok
    s = rep.summary()
    assert set(s) >= {"Y0", "closed_form", "value_ok", "dominance_ok", "drift_ok"}
