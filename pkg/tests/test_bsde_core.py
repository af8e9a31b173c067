import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsdelab.bsde_core import (Driver, Lipschitz, LocallyLipschitzZ, Multi, OneDim,
                               RegressionBasis, TerminalFunctional, check_comparison,
                               smallness_radius, solve, stability_gap, truncate_driver, y_bound,
                               z_bound)
from bsdelab.errors import DivergenceError, InvalidInputError, UnsupportedError
from bsdelab.martingale_lab import StandardBM, StoppedScaledBM, TimeGrid, simulate

nonneg = st.floats(0, 5, allow_nan=False)


def _ens(n=1, N=16, P=4000, seed=3):
    return simulate(StandardBM(n), TimeGrid.uniform(1.0, N), P, seed)


def test_zero_driver_martingale_terminal():
    ens = _ens(n=2)
    xi = TerminalFunctional(lambda p: p[:, -1, 0])
    sol = solve(ens, xi, Driver.zero())
    assert np.allclose(sol.Y[:, :, 0], ens.values[:, :, 0], atol=1e-10)
    assert np.allclose(sol.Z[:, :, 0, 0], 1.0, atol=1e-10)
    assert np.allclose(sol.Z[:, :, 0, 1], 0.0, atol=1e-10)


def test_terminal_exactness_and_constant_driver():
    ens = _ens()
    xi = TerminalFunctional(lambda p: np.sin(p[:, -1, 0]), DXi=1.0, CXi=1.0)
    sol = solve(ens, xi, Driver.constant(0.2))
    assert np.array_equal(sol.Y[:, -1, 0], np.sin(ens.values[:, -1, 0]))
    c = TerminalFunctional(lambda p: np.full(p.shape[0], 2.0))
    s = solve(ens, c, Driver.constant(0.25))
    A = ens.clockA
    assert np.allclose(s.Y[:, :, 0], 2.0 + 0.25 * (A[:, -1:] - A), atol=1e-12)
    assert np.allclose(s.Z, 0.0, atol=1e-12)


def test_linear_driver_converges_in_N():
    errs = []
    for N in (8, 16, 32):
        ens = _ens(N=N, P=500)
        c = TerminalFunctional(lambda p: np.ones(p.shape[0]))
        s = solve(ens, c, Driver.linear_y(0.5))
        A = ens.clockA
        errs.append(np.max(np.abs(s.Y[:, :, 0] - np.exp(0.5 * (A[:, -1:] - A)))))
    assert errs[0] > errs[1] > errs[2]


def test_implicit_matches_exact_fixed_point():
    ens = _ens(N=8, P=500)
    c = TerminalFunctional(lambda p: np.ones(p.shape[0]))
    s = solve(ens, c, Driver.linear_y(0.5), implicit=True, picard_iters=1)
    # implicit scheme: Y_i = Y_{i+1} / (1 - alpha dA)
    expected = (1.0 / (1 - 0.5 * 0.125)) ** np.arange(8, -1, -1)
    assert np.allclose(s.Y[0, :, 0], expected, rtol=1e-9)


def test_picard_residual_non_increasing():
    ens = _ens(N=16, P=20000)
    xi = TerminalFunctional(lambda p: np.sin(p[:, -1, 0]), DXi=1.0)
    f = Driver(lambda i, p, y, z: 0.5 * np.sin(y) + 0.25 * z[:, :, 0], Lipschitz(0.5, 0.25))
    s = solve(ens, xi, f, RegressionBasis(5), picard_iters=4)
    tot = s.residual_history.sum(axis=1)
    assert np.all(tot[1:] <= tot[:-1] * 1.1)


def test_solver_rejects_local_driver_and_reports_divergence():
    ens = _ens(N=4, P=200)
    xi = TerminalFunctional(lambda p: p[:, -1, 0])
    loc = Driver(lambda i, p, y, z: z[:, :, 0] ** 2, LocallyLipschitzZ(0.0, lambda x: 2 * x))
    with pytest.raises(UnsupportedError):
        solve(ens, xi, loc)
    bad = Driver(lambda i, p, y, z: np.full_like(y, np.inf if i == 2 else 0.0))
    with pytest.raises(DivergenceError, match="step 2"):
        solve(ens, xi, bad)


def test_declared_bound_checked():
    ens = _ens(N=4, P=200)
    with pytest.raises(InvalidInputError):
        TerminalFunctional(lambda p: 3 * np.ones(p.shape[0]), CXi=1.0)(ens.values)
    with pytest.raises(InvalidInputError):
        Driver(lambda i, p, y, z: y, LocallyLipschitzZ(0.0, lambda x: -x))


def test_truncation_examples():
    f = Driver(lambda i, p, y, z: np.sum(z ** 2, axis=(1, 2))[:, None],
               LocallyLipschitzZ(0.0, lambda x: 2 * x))
    g = truncate_driver(f, 1.0)
    y = np.zeros((1, 1))
    z = np.array([[[2.0, 0.0, 0.0]]])
    assert g(0, None, y, z)[0, 0] == pytest.approx(1.0)
    small = np.array([[[0.3, -0.4, 0.1]]])
    assert g(0, None, y, small)[0, 0] == f(0, None, y, small)[0, 0]
    assert g(0, None, y, np.zeros((1, 1, 3)))[0, 0] == 0.0
    assert g.regularity == Lipschitz(2.0, 2.0)


@given(st.floats(0.1, 5), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_truncation_idempotent(R, zz):
    f = Driver(lambda i, p, y, z: np.sum(z ** 2, axis=(1, 2))[:, None] + y,
               LocallyLipschitzZ(1.0, lambda x: 2 * x))
    g = truncate_driver(f, R)
    gg = truncate_driver(g, R)
    z = np.array(zz).reshape(1, 1, 3)
    y = np.ones((1, 1))
    assert gg(0, None, y, z)[0, 0] == pytest.approx(g(0, None, y, z)[0, 0], rel=1e-12, abs=1e-12)


def test_bound_examples():
    assert y_bound(1.0, 0.0, 0.0, 3.0, 3.0) == 1.0
    assert y_bound(1.0, 1.0, 1.0, 0.0, 0.0) == pytest.approx(np.sqrt(2) * np.exp(0.5), abs=1e-4)
    assert y_bound(1.0, 1.0, 1.0, 0.0, 0.0) == pytest.approx(2.3316, abs=1e-4)
    assert z_bound(Multi(1.0, 0.0, 0.0, 2.0, 2.0)) == 1.0
    assert z_bound(OneDim(1.5, 0.4, 2.0, 0.0, 3)) == np.sqrt(3) * (1.5 + 0.8)


@given(nonneg, nonneg, nonneg, st.floats(0.01, 5), st.integers(1, 6))
def test_onedim_bound_degenerations(DXi, Df, K, Cy, n):
    assert z_bound(OneDim(DXi, Df, 0.0, Cy, n)) == np.sqrt(n) * DXi
    assert z_bound(OneDim(DXi, Df, K, 0.0, n)) == float(np.sqrt(n) * (DXi + Df * K))
    # continuity of the Cy -> 0 limit
    lim = z_bound(OneDim(DXi, Df, K, 1e-9, n))
    assert lim == pytest.approx(z_bound(OneDim(DXi, Df, K, 0.0, n)), rel=1e-6, abs=1e-9)


@given(nonneg, nonneg, nonneg, nonneg)
def test_y_bound_k_zero(CXi, Cf, Cy, Cz):
    assert y_bound(CXi, Cf, 0.0, Cy, Cz) == float(np.sqrt(CXi ** 2 + Cf ** 2))


def test_smallness_radius_examples():
    R = smallness_radius(1.0, 0.0, 0.5, lambda x: 0.0)
    assert R == pytest.approx(np.exp(0.25), rel=1e-12)
    assert smallness_radius(1.3, 0.7, 0.0, lambda x: x * x) == pytest.approx(1.3, rel=1e-12)
    assert smallness_radius(1.0, 0.0, 8.0, lambda x: x + x * x / 2, Rmax=1e3) is None


@given(st.floats(0.1, 3), st.floats(1e-4, 0.05))
def test_smallness_radius_satisfies_inequality(DXi, K):
    rho = lambda x: x + 0.5 * x * x
    R = smallness_radius(DXi, 0.0, K, rho)
    if R is not None:
        assert DXi * np.exp(0.5 * K * (rho(R) + 1) ** 2) <= R * (1 + 1e-9)


def test_bounds_hold_on_lipschitz_example():
    ens = _ens(N=50, P=10000)
    xi = TerminalFunctional(lambda p: np.sin(p[:, -1, 0]), DXi=1.0, CXi=1.0)
    f = Driver(lambda i, p, y, z: 0.5 * np.sin(y) + 0.25 * z[:, :, 0], Lipschitz(0.5, 0.25))
    s = solve(ens, xi, f, RegressionBasis(5))
    K = ens.K
    assert np.abs(s.Y).max() <= 1.05 * y_bound(1.0, 0.0, K, 0.5, 0.25)
    assert np.abs(s.Z).max() <= 1.10 * z_bound(Multi(1.0, 0.0, K, 0.5, 0.25))


def test_stability_and_comparison():
    ens = _ens(N=16, P=10000)
    xi = TerminalFunctional(lambda p: np.sin(p[:, -1, 0]))
    xb = TerminalFunctional(lambda p: np.sin(p[:, -1, 0]) + 1)
    f = Driver.zero()
    s, sb = solve(ens, xi, f), solve(ens, xb, f)
    gap = stability_gap(s, sb, 1.0, 0.0, ens.K, 0.0, 0.0)
    assert gap["ok"]
    assert gap["sup_t"] == pytest.approx(1.0, rel=1e-9)
    same = stability_gap(s, s, 0.0, 0.0, ens.K, 0.0, 0.0)
    assert same["measured"] == 0.0 and same["ok"]
    assert stability_gap(s, sb, 0.3, 0.1, 0.0, 1.0, 1.0)["bound"] == pytest.approx(2 * 0.4)
    assert check_comparison(s, sb)["pass"]
    assert check_comparison(s, s)["violations"] == 0
    assert not check_comparison(sb, s)["pass"]
    other = _ens(N=16, P=10000, seed=4)
    with pytest.raises(InvalidInputError):
        stability_gap(s, solve(other, xi, f), 1.0, 0.0, ens.K, 0.0, 0.0)


def test_comparison_rejects_vector_y():
    ens = _ens(N=4, P=200)
    xi = TerminalFunctional(lambda p: p[:, -1, :1].repeat(2, axis=1), d=2)
    s = solve(ens, xi, Driver.zero(d=2))
    with pytest.raises(UnsupportedError):
        check_comparison(s, s)


def test_stopped_model_solution_and_csv():
    ens = simulate(StoppedScaledBM(1.0, 0.5), TimeGrid.uniform(1.0, 8), 2000, 1)
    xi = TerminalFunctional(lambda p: p[:, -1, 0], DXi=1.0, CXi=1.0)
    s = solve(ens, xi, Driver.zero())
    buf = io.StringIO()
    s.export_csv(buf, max_paths=2)
    assert buf.getvalue().splitlines()[0] == "path,time,Y1,Z1_1,Z1_2,residual"


def test_local_basis_exact_for_linear_and_bounded_in_tails():
    from bsdelab.bsde_core import LocalLinearBasis
    ens = simulate(StandardBM(1), TimeGrid.uniform(1.0, 16), 4000, 9)
    xi = TerminalFunctional(lambda p: p[:, -1, 0], DXi=1.0)
    sol = solve(ens, xi, Driver.zero(), LocalLinearBasis(8))
    assert np.max(np.abs(sol.Y[:, :, 0] - ens.values[:, :, 0])) < 1e-10
    assert np.max(np.abs(sol.Z - 1.0)) < 1e-10
    # a bounded terminal value gives bounded estimates, even on extreme paths
    xi = TerminalFunctional(lambda p: np.sin(p[:, -1, 0]), DXi=1.0, CXi=1.0)
    sol = solve(ens, xi, Driver.zero(), LocalLinearBasis(16))
    assert np.max(np.abs(sol.Z)) <= 1.0 + 1e-9


def test_local_basis_handles_empty_cells():
    from bsdelab.bsde_core import LocalLinearBasis
    rng = np.random.default_rng(0)
    x = np.concatenate([np.zeros(500), rng.normal(size=500)])[:, None]   # heavy ties
    dM = rng.normal(size=(1000, 1)) * 0.1
    y = (2.0 + 3.0 * dM[:, 0])[:, None]
    cm, Z, diag = LocalLinearBasis(16).fit(x, dM, y)
    assert np.allclose(cm, 2.0) and np.allclose(Z, 3.0)
