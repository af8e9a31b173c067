"""Radial harmonic-map heat flow, its sphere-valued field and the quadratic BSDE
counterexample built from it.

The flow is

    g_t = g_rr + g_r / r - sin(g) cos(g) / r^2,   g(t, 0) = 0,  g(t, 1) = 2 pi,

and ``u(t, x) = (x1/r sin g, x2/r sin g, cos g)`` with ``r = |x|`` solves the
harmonic-map heat flow into the unit sphere.  With M the stopped scaled planar
Brownian motion, ``Y_t = u(T - t, M_t)`` and ``Z_t = grad u(T - t, M_t)`` solve
the BSDE with driver ``|Z m|^2 Y / (2 (|Y| v 1))``.  When the flow's gradient
blows up at the origin before the backward horizon, Z cannot stay bounded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numba
import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import CubicSpline

from .bsde_core import smallness_radius
from .errors import ConfigurationError, DomainError, NumericalInstabilityError
from .martingale_lab import StoppedScaledBM, TimeGrid, simulate

TWO_PI = 2.0 * np.pi


# ------------------------------------------------------------------ profile

def phi(r, epsilon, lam):
    """arccos((lam^2 - r^(2+2eps)) / (lam^2 + r^(2+2eps))), written as 2 arctan(r^(1+eps)/lam)."""
    return 2.0 * np.arctan(np.asarray(r, dtype=float) ** (1.0 + epsilon) / lam)


def stationary_profile(r):
    """2 arctan(r) = arccos((1 - r^2) / (1 + r^2)), a steady state of the flow."""
    return 2.0 * np.arctan(np.asarray(r, dtype=float))


def lower_bound(r, epsilon, lam):
    return stationary_profile(r) + phi(r, epsilon, lam)


def choose_lambda(epsilon: float, margin: float = 1.05, scan_points: int = 20001) -> float:
    """Smallest lam on a scan with cos(phi(1)) >= 1/(1+eps), refined by bisection, times margin.

    At r = 1 the condition reads (lam^2 - 1)/(lam^2 + 1) >= 1/(1 + eps), i.e.
    lam^2 >= (2 + eps)/eps; r = 1 is the worst case because phi increases in r.
    """
    if not 0 < epsilon < 1:
        raise ConfigurationError("epsilon must lie in (0, 1)")
    ok = lambda lam: np.cos(phi(1.0, epsilon, lam)) >= 1.0 / (1.0 + epsilon)
    grid = np.geomspace(1e-3, 1e4, scan_points)
    good = np.flatnonzero([ok(x) for x in grid])
    if good.size == 0:
        raise ConfigurationError("no admissible lambda on the scan")
    j = good[0]
    lo, hi = (grid[j - 1], grid[j]) if j > 0 else (0.0, grid[0])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return float(margin * hi)


def smoothstep(r):
    r = np.clip(np.asarray(r, dtype=float), 0.0, 1.0)
    return r * r * (3.0 - 2.0 * r)


@dataclass
class CounterexampleConfig:
    epsilon: float = 0.5
    lam: Optional[float] = None
    delta: float = 0.1
    boundary: float = TWO_PI

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        if self.lam is None:
            self.lam = choose_lambda(self.epsilon)
        if self.lam <= 0:
            raise ConfigurationError("lambda must be positive")

    def cos_phi_ok(self, r) -> bool:
        return bool(np.all(np.cos(phi(r, self.epsilon, self.lam)) >= 1.0 / (1.0 + self.epsilon) - 1e-15))


def build_g0(config: CounterexampleConfig, r: np.ndarray) -> np.ndarray:
    """bound(r) + (g(1) - bound(1)) s(r) with s the cubic smoothstep."""
    r = np.asarray(r, dtype=float)
    if not config.cos_phi_ok(r):
        raise ConfigurationError("lambda too small: cos(phi) < 1/(1+eps) on the grid")
    b = lower_bound(r, config.epsilon, config.lam)
    b1 = float(lower_bound(1.0, config.epsilon, config.lam))
    lift = config.boundary - b1
    if lift < 0:
        raise ConfigurationError("lower bound exceeds the boundary value at r = 1")
    return b + lift * smoothstep(r)


def g0_derivative(config: CounterexampleConfig, r):
    r = np.asarray(r, dtype=float)
    e, lam = config.epsilon, config.lam
    lift = config.boundary - float(lower_bound(1.0, e, lam))
    q = r ** (1 + e) / lam
    dphi = 2.0 * (1 + e) * r ** e / lam / (1 + q * q)
    return 2.0 / (1 + r * r) + dphi + lift * 6.0 * r * (1 - r)


def terminal_lipschitz(config: CounterexampleConfig, num: int = 20001) -> float:
    """sup over the unit disk of the Frobenius norm of grad u0: sqrt(g0'^2 + sin^2 g0 / r^2)."""
    r = np.linspace(1e-9, 1.0, num)
    g = build_g0(config, r)
    return float(np.max(np.sqrt(g0_derivative(config, r) ** 2 + (np.sin(g) / r) ** 2)))


# ---------------------------------------------------------------- PDE solver

@dataclass
class RadialGrid:
    dr: float
    dt: Optional[float] = None
    t_max: float = 1.0
    stability_factor: float = 0.25

    def __post_init__(self):
        J = 1.0 / self.dr
        if abs(J - round(J)) > 1e-9 or J < 4:
            raise ConfigurationError("dr must divide 1 into at least 4 cells")
        if self.dt is None:
            self.dt = 0.2 * self.dr ** 2
        if self.dt > self.stability_factor * self.dr ** 2 * (1 + 1e-12):
            raise ConfigurationError(f"dt={self.dt:g} violates the explicit stability limit "
                                     f"{self.stability_factor} dr^2 = {self.stability_factor * self.dr ** 2:g}")

    @property
    def J(self) -> int:
        return int(round(1.0 / self.dr))

    @property
    def r(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.J + 1)


@numba.njit(cache=True)
def _heat_flow_steps(g, dr, dt, nsteps, thr, bc0, bc1, trace, t_offset_step):
    """Advance up to nsteps explicit steps; trace[k] receives the origin slope after step k.

    Returns (steps taken, status) with status 0 = ok, 1 = threshold crossed,
    2 = non-finite interior value.
    """
    J = g.shape[0] - 1
    new = np.empty_like(g)
    inv2 = 1.0 / (2.0 * dr)
    invsq = 1.0 / (dr * dr)
    for k in range(nsteps):
        for j in range(1, J):
            rj = j * dr
            gr = (g[j + 1] - g[j - 1]) * inv2
            grr = (g[j + 1] - 2.0 * g[j] + g[j - 1]) * invsq
            new[j] = g[j] + dt * (grr + gr / rj - np.sin(g[j]) * np.cos(g[j]) / (rj * rj))
        new[0] = bc0
        new[J] = bc1
        bad = False
        for j in range(J + 1):
            g[j] = new[j]
            if not np.isfinite(new[j]):
                bad = True
        tr = (4.0 * g[1] - g[2] - 3.0 * g[0]) * inv2
        trace[t_offset_step + k] = tr
        if bad:
            return k + 1, 2
        if tr > thr:
            return k + 1, 1
    return nsteps, 0


@dataclass
class PDESolution:
    r: np.ndarray
    times: np.ndarray             # snapshot times
    g: np.ndarray                 # len(times) x len(r)
    trace_times: np.ndarray
    boundary_deriv_trace: np.ndarray
    blow_up_time: Optional[float]
    grid: RadialGrid = field(repr=False)
    threshold: float = 1e3
    hold_min_trace: Optional[float] = None
    _splines: dict = field(default_factory=dict, repr=False)

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def snapshot_index(self, t: float, atol: float = 1e-12) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > atol * max(1.0, abs(t)):
            return -1
        return j

    def spline(self, j: int) -> CubicSpline:
        sp = self._splines.get(j)
        if sp is None:
            sp = CubicSpline(self.r, self.g[j])
            self._splines[j] = sp
        return sp

    def profile(self, t: float, r) -> np.ndarray:
        """g(t, r): spline in r at a stored snapshot, linear in t between snapshots.

        Beyond r = 1 the spline extrapolates smoothly (used by gradient stencils).
        """
        if self.blow_up_time is not None and t > self.blow_up_time + 1e-14:
            raise DomainError(f"t={t} lies beyond the detected blow-up time {self.blow_up_time}")
        if t < -1e-14 or t > self.t_end + 1e-14:
            raise DomainError(f"t={t} outside the computed window [0, {self.t_end}]")
        j = self.snapshot_index(t)
        if j >= 0:
            return self.spline(j)(r)
        k = int(np.searchsorted(self.times, t)) - 1
        k = min(max(k, 0), len(self.times) - 2)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1 - w) * self.spline(k)(r) + w * self.spline(k + 1)(r)

    def trace_rows(self):
        return np.column_stack([self.trace_times, self.boundary_deriv_trace])


def solve_pde(g0: np.ndarray, grid: RadialGrid, blow_threshold: float = 1e3,
              boundary=(0.0, TWO_PI), snapshot_every: Optional[int] = None,
              hold_steps: int = 0) -> PDESolution:
    """Explicit finite differences, direct stencil at every interior node, g(., 0) pinned.

    Stops at ``t_max`` or once the one-sided origin slope exceeds the threshold.
    With ``hold_steps > 0`` integration continues that many steps past the
    crossing and records the smallest slope seen, to guard against a spurious
    transient crossing.  Snapshots are stored every ``snapshot_every`` steps.
    """
    g = np.array(g0, dtype=float, copy=True)
    if g.shape != (grid.J + 1,):
        raise ConfigurationError("initial profile does not match the radial grid")
    g[0], g[-1] = boundary
    nsteps = int(np.ceil(grid.t_max / grid.dt - 1e-9))
    if snapshot_every is None:
        snapshot_every = max(1, nsteps // 400)
    trace = np.empty(nsteps + hold_steps + 1)
    trace[0] = (4 * g[1] - g[2] - 3 * g[0]) / (2 * grid.dr)
    snaps = [g.copy()]
    snap_t = [0.0]
    done = 0
    blow = None
    while done < nsteps:
        chunk = min(snapshot_every, nsteps - done)
        taken, status = _heat_flow_steps(g, grid.dr, grid.dt, chunk, blow_threshold,
                                         boundary[0], boundary[1], trace, done + 1)
        done += taken
        if status == 2:
            raise NumericalInstabilityError(f"non-finite values at t={done * grid.dt:.6g}")
        snaps.append(g.copy())
        snap_t.append(done * grid.dt)
        if status == 1:
            blow = done * grid.dt
            break
    hold_min = None
    if blow is not None and hold_steps > 0:
        gh = g.copy()
        taken, status = _heat_flow_steps(gh, grid.dr, grid.dt, hold_steps, np.inf,
                                         boundary[0], boundary[1], trace, done + 1)
        hold_min = float(np.min(trace[done: done + taken + 1]))
    trace = trace[:done + 1]
    return PDESolution(grid.r, np.array(snap_t), np.array(snaps),
                       np.arange(done + 1) * grid.dt, trace, blow, grid, blow_threshold, hold_min)


# ------------------------------------------------------------------ u field

def _u_from_profile(x, gval):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    s = np.sin(gval)
    safe = np.where(r > 0, r, 1.0)
    c1 = np.where(r > 0, x[..., 0] / safe, 0.0)
    c2 = np.where(r > 0, x[..., 1] / safe, 0.0)
    return np.stack([c1 * s, c2 * s, np.cos(gval)], axis=-1)


def u_field(sol: PDESolution, t: float, x, gradient: bool = False, step: Optional[float] = None):
    """u(t, x) for x of shape (..., 2) with |x| <= 1; optionally the 3 x 2 gradient.

    The gradient uses central differences in x with step dr/2 (default).
    """
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r > 1.0 + 1e-12):
        raise DomainError("u is only defined on the closed unit disk")
    u = _u_from_profile(x, sol.profile(t, r))
    if not gradient:
        return u
    hstep = step if step is not None else 0.5 * sol.grid.dr
    grad = np.empty(x.shape[:-1] + (3, 2))
    for b in range(2):
        e = np.zeros(2)
        e[b] = hstep
        xp, xm = x + e, x - e
        up = _u_from_profile(xp, sol.profile(t, np.linalg.norm(xp, axis=-1)))
        um = _u_from_profile(xm, sol.profile(t, np.linalg.norm(xm, axis=-1)))
        grad[..., :, b] = (up - um) / (2 * hstep)
    return u, grad


# ------------------------------------------------------------ counterexample

def counterexample_driver_value(Y, Zm):
    """|Z m|^2 Y / (2 (|Y| v 1)), vectorized over leading axes (Y: ... x 3, Zm: ... x 3 x 2)."""
    nY = np.linalg.norm(Y, axis=-1, keepdims=True)
    return 0.5 * np.sum(Zm * Zm, axis=(-2, -1))[..., None] * Y / np.maximum(nY, 1.0)


def rho_counterexample(x):
    return x + 0.5 * x * x


def certificate(delta: float, DXi: float, Rmax: float = 1e3) -> Optional[float]:
    """R with D_xi exp(2 delta (R + R^2/2 + 1)^2) <= R (K = 4 delta, D_f = 0)."""
    return smallness_radius(DXi, 0.0, 4.0 * delta, rho_counterexample, Rmax)


@dataclass
class CounterexampleReport:
    delta: float
    K: float
    DXi: float
    certificate_R: Optional[float]
    sup_Z: float
    frac_Z_above: dict
    sphere_error: float
    blow_up_time: Optional[float]
    evaluated_until: float
    residual_dt: List[float] = field(default_factory=list)
    residual: List[float] = field(default_factory=list)
    regime: str = ""

    @property
    def residual_orders(self) -> List[float]:
        r = self.residual
        return [float(np.log2(r[k] / r[k + 1])) for k in range(len(r) - 1)]

    def summary(self) -> dict:
        return {"delta": self.delta, "K": self.K, "DXi": self.DXi,
                "certificate_R": self.certificate_R, "sup_Z": self.sup_Z,
                "frac_Z_above": {str(k): v for k, v in self.frac_Z_above.items()},
                "sphere_error": self.sphere_error, "blow_up_time": self.blow_up_time,
                "evaluated_until": self.evaluated_until, "residual_dt": self.residual_dt,
                "residual": self.residual, "residual_orders": self.residual_orders,
                "regime": self.regime}


def _pde_for_window(config, delta, N, dr, hold_steps=0):
    """Heat flow over backward time [0, delta] with snapshots exactly at delta j / N."""
    grid_r = RadialGrid(dr)
    h = delta / N
    k = int(np.ceil(h / (0.2 * dr * dr)))
    rg = RadialGrid(dr, h / k, delta * (1 + 1e-12))
    g0 = build_g0(config, rg.r)
    return solve_pde(g0, rg, snapshot_every=k, hold_steps=hold_steps)


def one_step_residual(pde: PDESolution, delta: float, N: int, x: np.ndarray,
                      nodes: int = 12, margin_sd: float = 6.0):
    """Mean one-step defect of the counterexample BSDE at the points x (Q x 2).

    For each grid step ``t_i -> t_{i+1}`` on [0, delta] the conditional
    expectation of ``u(delta - t_{i+1}, x + dM)`` with dM ~ N(0, 2 dt I) is
    computed by tensor Gauss-Hermite quadrature, and the defect
    ``u - E[u_next] - f(u, grad u m) dA`` is averaged over the points that
    lie at least ``margin_sd`` increment standard deviations inside the disk.
    """
    dt = delta / N
    sd = np.sqrt(2.0 * dt)
    gx, gw = hermgauss(nodes)
    X1, X2 = np.meshgrid(gx, gx, indexing="ij")
    W = (np.outer(gw, gw) / np.pi).ravel()
    off = np.sqrt(2.0) * sd * np.stack([X1.ravel(), X2.ravel()], axis=-1)
    inside = np.linalg.norm(x, axis=1) <= 1.0 - margin_sd * sd
    xs = x[inside]
    m = np.eye(2) / np.sqrt(2.0)
    tot = []
    for i in range(N):
        s_i = delta - i * dt
        s_n = delta - (i + 1) * dt
        u, gu = u_field(pde, s_i, xs, gradient=True)
        pts = xs[:, None, :] + off[None, :, :]
        un = u_field(pde, s_n, pts)
        Eu = np.einsum("k,qkc->qc", W, un)
        f = counterexample_driver_value(u, gu @ m)
        dfct = u - Eu - f * 4.0 * dt
        tot.append(np.mean(np.linalg.norm(dfct, axis=1)))
    return float(np.mean(tot)), int(inside.sum())


def verify_counterexample(delta: float, config: CounterexampleConfig, P: int = 10000,
                          N: int = 32, seed: int = 0, dr: float = 1.0 / 512,
                          levels: Sequence[int] = (), residual_points: int = 400,
                          thresholds: Sequence[float] = (1e2,),
                          pde: Optional[PDESolution] = None,
                          residual_dr: float = 1.0 / 2048) -> CounterexampleReport:
    """Evaluate Y = u(T - t, M_t), Z = grad u(T - t, M_t) on a stopped ensemble with T = delta.

    ``levels`` lists additional step counts for the residual-decay study
    (e.g. (N, 2N, 4N)), each solved on the radial step ``residual_dr`` so the
    spatial error stays below the one-step defect; sup |Z| is measured over nodes with positive clock
    increment up to the blow-up time when blow-up occurs inside the window.
    """
    DXi = terminal_lipschitz(config)
    K = 4.0 * delta
    R = certificate(delta, DXi)
    if pde is None:
        pde = _pde_for_window(config, delta, N, dr)
    model = StoppedScaledBM(delta, delta)
    grid = TimeGrid.uniform(delta, N)
    ens = simulate(model, grid, P, seed)
    limit = pde.blow_up_time if pde.blow_up_time is not None else pde.t_end
    supZ = 0.0
    counts = {L: 0 for L in thresholds}
    any_above = {L: np.zeros(P, dtype=bool) for L in thresholds}
    sphere = 0.0
    for i in range(N + 1):
        s = delta - grid.times[i]
        if s > limit + 1e-12:
            continue
        j = pde.snapshot_index(s, atol=1e-9)
        s_eval = pde.times[j] if j >= 0 else s
        if i == N:
            Y = u_field(pde, s_eval, ens.values[:, i])
        else:
            Y, G = u_field(pde, s_eval, ens.values[:, i], gradient=True)
            act = ens.dA[:, i] > 0
            if act.any():
                nz = np.linalg.norm(G[act].reshape(int(act.sum()), -1), axis=1)
                supZ = max(supZ, float(nz.max()))
                for L in thresholds:
                    any_above[L][np.flatnonzero(act)[nz >= L]] = True
        sphere = max(sphere, float(np.max(np.abs(np.linalg.norm(Y, axis=1) - 1.0))))
    frac = {L: float(any_above[L].mean()) for L in thresholds}
    rep = CounterexampleReport(delta, K, DXi, R, supZ, frac, sphere, pde.blow_up_time, float(limit))
    if levels:
        rng = np.random.default_rng(seed)
        rad = np.sqrt(rng.uniform(0, 1, residual_points)) * 0.9
        ang = rng.uniform(0, TWO_PI, residual_points)
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        for Nl in levels:
            pl = _pde_for_window(config, delta, Nl, residual_dr)
            if pl.blow_up_time is not None:
                break
            res, _ = one_step_residual(pl, delta, Nl, pts)
            rep.residual_dt.append(delta / Nl)
            rep.residual.append(res)
    if R is not None:
        rep.regime = "certified" if supZ <= 1.1 * R else "certificate violated"
    elif pde.blow_up_time is not None and pde.blow_up_time <= delta + 1e-12:
        rep.regime = "blow-up"
    else:
        rep.regime = "uncertified"
    return rep
