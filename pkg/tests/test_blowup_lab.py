import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsdelab import blowup_lab as bl
from bsdelab.errors import ConfigurationError, DomainError


@pytest.fixture(scope="module")
def cfg():
    return bl.CounterexampleConfig(0.5)


@pytest.fixture(scope="module")
def flow(cfg):
    g = bl.RadialGrid(1.0 / 512, t_max=0.5)
    return bl.solve_pde(bl.build_g0(cfg, g.r), g, hold_steps=200)


@given(st.floats(0.05, 0.95))
def test_choose_lambda_condition(eps):
    lam = bl.choose_lambda(eps, margin=1.0)
    assert lam ** 2 >= (2 + eps) / eps * (1 - 1e-6)
    assert bl.choose_lambda(eps) == pytest.approx(1.05 * lam, rel=1e-12)
    assert np.cos(bl.phi(0.0, eps, lam)) == 1.0


def test_lambda_eps_one_limit():
    # the open interval excludes eps = 1; approach it from below
    assert bl.choose_lambda(0.999999, margin=1.0) == pytest.approx(np.sqrt(3), rel=1e-5)


def test_g0_constraints(cfg):
    r = np.linspace(0, 1, 2049)
    g0 = bl.build_g0(cfg, r)
    assert g0[0] == 0.0
    assert g0[-1] == pytest.approx(2 * np.pi, abs=1e-12)
    assert np.all(g0 - bl.lower_bound(r, cfg.epsilon, cfg.lam) >= -1e-14)
    assert bl.lower_bound(1.0, cfg.epsilon, cfg.lam) < 2 * np.pi
    assert bl.lower_bound(0.0, cfg.epsilon, cfg.lam) == 0.0
    with pytest.raises(ConfigurationError):
        bl.build_g0(bl.CounterexampleConfig(0.5, lam=0.1), r)


def test_cfl_rejected():
    with pytest.raises(ConfigurationError):
        bl.RadialGrid(0.01, dt=0.3 * 0.01 ** 2)


def test_zero_profile_stays_zero():
    g = bl.RadialGrid(1.0 / 64, t_max=0.1)
    s = bl.solve_pde(np.zeros(g.J + 1), g, boundary=(0.0, 0.0), blow_threshold=np.inf)
    assert np.all(s.g == 0.0)


def test_stationary_profile():
    g = bl.RadialGrid(1.0 / 128, t_max=1.0)
    g0 = bl.stationary_profile(g.r)
    s = bl.solve_pde(g0, g, boundary=(0.0, float(g0[-1])), blow_threshold=np.inf)
    assert np.max(np.abs(s.g - g0)) <= 1e-3


def test_blow_up_detected_and_held(flow):
    assert flow.blow_up_time is not None and 0 < flow.blow_up_time < 0.5
    assert flow.hold_min_trace >= flow.threshold / 2
    assert np.all(flow.g[:, 0] == 0.0)
    assert np.allclose(flow.g[:, -1], 2 * np.pi)
    with pytest.raises(DomainError):
        flow.profile(flow.blow_up_time + 0.01, 0.5)


def test_u_field_sphere_and_tangency(flow):
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.7, 0.7, size=(300, 2))
    t = 0.5 * flow.blow_up_time
    j = flow.snapshot_index(flow.times[np.argmin(np.abs(flow.times - t))])
    u, G = bl.u_field(flow, float(flow.times[j]), x, gradient=True)
    assert np.max(np.abs(np.linalg.norm(u, axis=1) - 1)) <= 1e-10
    # derivatives of a sphere-valued map are tangent: u . du = 0
    tang = np.einsum("pc,pcb->pb", u, G)
    # central differences leave an O(step^2 |grad u|^3) defect
    scale = 1.0 + np.linalg.norm(G, axis=1) ** 2
    assert np.max(np.abs(tang) / scale) < 1e-3
    assert np.allclose(bl.u_field(flow, 0.0, np.zeros((1, 2))), [[0.0, 0.0, 1.0]])


def test_u_is_south_pole_where_g_is_pi():
    r = np.linspace(0, 1, 65)
    sol = bl.PDESolution(r, np.array([0.0]), (np.pi * r)[None, :], np.array([0.0]), np.array([0.0]),
                         None, bl.RadialGrid(1 / 64))
    assert np.allclose(bl.u_field(sol, 0.0, np.array([[1.0, 0.0]])), [[0.0, 0.0, -1.0]], atol=1e-12)


def test_certificate_regimes(cfg):
    D = bl.terminal_lipschitz(cfg)
    R = bl.certificate(1e-5, D)
    assert R is not None and R >= D
    assert bl.certificate(0.1, D) is None


def test_verify_small_delta_certified(cfg):
    rep = bl.verify_counterexample(1e-5, cfg, P=2000, N=8, dr=1 / 256, levels=(4, 8),
                                   residual_points=100)
    assert rep.regime == "certified"
    assert rep.sup_Z <= 1.1 * rep.certificate_R
    assert rep.sphere_error <= 1e-10
    assert rep.residual[1] < rep.residual[0]


def test_verify_beyond_blowup(cfg, flow):
    rep = bl.verify_counterexample(flow.blow_up_time, cfg, P=2000, N=16, pde=flow)
    assert rep.certificate_R is None
    assert rep.frac_Z_above[1e2] > 0
    R = bl.certificate(1e-5, bl.terminal_lipschitz(cfg))
    assert rep.sup_Z > 10 * R
