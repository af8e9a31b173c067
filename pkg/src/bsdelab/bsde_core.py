"""Regression-based backward solver for BSDEs driven by a continuous martingale.

The discrete scheme on a grid ``t_0 < ... < t_N`` is

    Y_N = xi(path)
    Y_i = E_i[Y_{i+1}] + f(t_i, path, y*, Z_i m_i) dA_i

with ``E_i`` the least-squares projection onto functions of the path up to
``t_i``.  ``E_i[Y_{i+1}]`` and ``Z_i`` come from one joint regression of
``Y_{i+1}`` on ``[phi, phi * dM^1, ..., phi * dM^n]``: the coefficients on
``phi`` give the conditional mean and those on ``phi * dM^j`` give the
``j``-th column of ``Z_i`` as a function of the state.  In the population
limit this is the same as ``E_i[Y_{i+1} dM*] (m m* dA)^{-1}``, but the
martingale part of ``Y_{i+1}`` is explained instead of left as noise.

Drivers receive the z-argument ``Z m`` (shape P x d x n).  Paths are passed
as the full ``P x (N+1) x n`` array together with the step index; a driver
must only read columns ``<= step``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial.hermite_e import hermevander
from scipy.linalg import cho_factor, cho_solve

from .errors import DiagnosticsError, DivergenceError, InvalidInputError, UnsupportedError
from .martingale_lab import MartingaleEnsemble


# ---------------------------------------------------------------- regularity

@dataclass(frozen=True)
class Lipschitz:
    Cy: float
    Cz: float

    def __post_init__(self):
        if self.Cy < 0 or self.Cz < 0:
            raise InvalidInputError("Lipschitz constants must be nonnegative")


@dataclass(frozen=True)
class LocallyLipschitzZ:
    Cy: float
    rho: Callable[[float], float]


@dataclass(frozen=True)
class LocallyLipschitzBoth:
    rho: Callable[[float], float]


Regularity = Union[Lipschitz, LocallyLipschitzZ, LocallyLipschitzBoth]


def check_nondecreasing(rho, upper: float = 100.0, num: int = 257) -> bool:
    xs = np.linspace(0.0, upper, num)
    vals = np.array([float(rho(x)) for x in xs])
    return bool(np.all(np.diff(vals) >= -1e-12 * (1 + np.abs(vals[1:]))))


# ------------------------------------------------------- problem ingredients

@dataclass
class TerminalFunctional:
    """xi(path) with sup-norm Lipschitz constant DXi and optional bound CXi."""
    func: Callable[[np.ndarray], np.ndarray]
    DXi: float = 0.0
    CXi: Optional[float] = None
    d: int = 1

    def __post_init__(self):
        if self.DXi < 0 or (self.CXi is not None and self.CXi < 0):
            raise InvalidInputError("terminal constants must be nonnegative")

    def __call__(self, paths: np.ndarray) -> np.ndarray:
        out = np.asarray(self.func(paths), dtype=float).reshape(paths.shape[0], self.d)
        if self.CXi is not None:
            worst = np.max(np.linalg.norm(out, axis=1)) if out.size else 0.0
            if worst > self.CXi * (1 + 1e-9) + 1e-12:
                raise InvalidInputError(f"|xi| reaches {worst:.6g} > declared CXi={self.CXi}")
        return out

    @classmethod
    def from_values(cls, values, DXi=0.0) -> "TerminalFunctional":
        values = np.asarray(values, dtype=float)
        d = 1 if values.ndim == 1 else values.shape[1]
        return cls(lambda paths: values, DXi=DXi, d=d)


@dataclass
class Driver:
    """f(step, paths, y, zm) -> P x d, with declared regularity constants.

    ``y`` has shape P x d and ``zm`` (the product Z m) has shape P x d x n.
    """
    func: Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    regularity: Regularity = field(default_factory=lambda: Lipschitz(0.0, 0.0))
    Df: float = 0.0
    Cf: Optional[float] = None
    d: int = 1

    def __post_init__(self):
        if self.Df < 0 or (self.Cf is not None and self.Cf < 0):
            raise InvalidInputError("driver constants must be nonnegative")
        rho = getattr(self.regularity, "rho", None)
        if rho is not None and not check_nondecreasing(rho):
            raise InvalidInputError("rho must be nondecreasing")

    def __call__(self, step, paths, y, zm):
        out = np.asarray(self.func(step, paths, y, zm), dtype=float)
        if out.ndim == 1 and y.ndim == 2:
            out = out[:, None]
        return np.broadcast_to(out, y.shape)

    @property
    def is_lipschitz(self) -> bool:
        return isinstance(self.regularity, Lipschitz)

    @classmethod
    def zero(cls, d=1) -> "Driver":
        return cls(lambda i, p, y, z: np.zeros_like(y), Lipschitz(0.0, 0.0), 0.0, 0.0, d)

    @classmethod
    def constant(cls, beta: float, d=1) -> "Driver":
        return cls(lambda i, p, y, z: np.full_like(y, beta), Lipschitz(0.0, 0.0), 0.0, None, d)

    @classmethod
    def linear_y(cls, alpha: float, d=1) -> "Driver":
        return cls(lambda i, p, y, z: alpha * y, Lipschitz(abs(alpha), 0.0), 0.0, 0.0, d)


def truncate_driver(f: Driver, R: float) -> Driver:
    """Evaluate f at the radial projection ``z R / (|z| v R)``; Lipschitz with Cy = Cz = rho(R)."""
    if R <= 0:
        raise InvalidInputError("truncation radius must be positive")
    reg = f.regularity
    if isinstance(reg, Lipschitz):
        L = Lipschitz(reg.Cy, reg.Cz)
    else:
        r = float(reg.rho(R))
        L = Lipschitz(r, r)

    def g(step, paths, y, zm):
        nz = np.sqrt(np.sum(zm * zm, axis=tuple(range(1, zm.ndim))))
        scale = R / np.maximum(nz, R)
        return f(step, paths, y, zm * scale.reshape((-1,) + (1,) * (zm.ndim - 1)))

    out = Driver(g, L, f.Df, f.Cf, f.d)
    out.truncation_radius = R
    out.untruncated = f
    return out


# ---------------------------------------------------------------- regression

def _multi_indices(k: int, degree: int):
    return [a for a in itertools.product(range(degree + 1), repeat=k) if sum(a) <= degree]


@dataclass
class RegressionBasis:
    """Hermite polynomials (total degree <= ``degree``) of the standardized state.

    The state is ``M_t`` plus the columns returned by ``path_features``;
    each feature callable maps ``(paths, step)`` to a ``P x k`` array.
    """
    degree: int = 2
    ridge: float = 0.0
    path_features: Sequence[Callable[[np.ndarray, int], np.ndarray]] = ()

    def __post_init__(self):
        if self.ridge < 0:
            raise InvalidInputError("ridge parameter must be >= 0")
        if self.degree < 0:
            raise InvalidInputError("degree must be >= 0")

    def state(self, paths, step):
        cols = [paths[:, step, :]]
        for feat in self.path_features:
            v = np.asarray(feat(paths, step), dtype=float)
            cols.append(v.reshape(v.shape[0], -1))
        return np.concatenate(cols, axis=1)

    def design(self, state: np.ndarray) -> np.ndarray:
        mu = state.mean(axis=0)
        sd = state.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        if not keep.any() or self.degree == 0:
            return np.ones((state.shape[0], 1))
        x = (state[:, keep] - mu[keep]) / sd[keep]
        V = [hermevander(x[:, j], self.degree) for j in range(x.shape[1])]
        cols = []
        for a in _multi_indices(x.shape[1], self.degree):
            c = np.ones(x.shape[0])
            for j, aj in enumerate(a):
                if aj:
                    c = c * V[j][:, aj]
            cols.append(c)
        return np.column_stack(cols)

    def fit(self, state, dM, target):
        """Joint regression of ``target`` on the design and design x dM."""
        return _joint_regression(self.design(state), dM, target, self.ridge)


@dataclass
class LocalLinearBasis:
    """Local linear regression on equiprobable cells of the state.

    Each state coordinate is cut at its empirical quantiles into ``cells``
    bins; inside every cell of the tensor partition the target is fitted on
    ``[1, x - xbar, dM]``: linear in the state for the conditional mean and
    constant in the cell for Z.  Fits stay local, so unlike global
    polynomials they do not extrapolate wildly at tail states.  Cells are
    merged (fewer bins) when they would hold under ``min_per_cell`` paths
    per coefficient.
    """
    cells: int = 16
    ridge: float = 0.0
    min_per_cell: int = 20
    path_features: Sequence[Callable[[np.ndarray, int], np.ndarray]] = ()

    def __post_init__(self):
        if self.cells < 1:
            raise InvalidInputError("cells must be >= 1")
        if self.ridge < 0:
            raise InvalidInputError("ridge parameter must be >= 0")

    state = RegressionBasis.state

    def fit(self, state, dM, target):
        Pa = state.shape[0]
        n = dM.shape[1]
        sd = state.std(axis=0)
        x = state[:, sd > 1e-12 * (1.0 + np.abs(state.mean(axis=0)))]
        k = x.shape[1]
        q = 1 + k
        ncol = q + n
        if Pa < ncol:
            raise DiagnosticsError(f"{Pa} active paths cannot determine {ncol} regression coefficients")
        c = self.cells
        if k:
            c = max(1, min(c, int((Pa / (self.min_per_cell * ncol)) ** (1.0 / k))))
        cell = np.zeros(Pa, dtype=np.int64)
        for j in range(k):
            edges = np.quantile(x[:, j], np.linspace(0.0, 1.0, c + 1)[1:-1])
            cell = cell * c + np.searchsorted(edges, x[:, j], side="right")
        ncell = c ** k
        cnt = np.bincount(cell, minlength=ncell).astype(float)
        safe = np.maximum(cnt, 1.0)
        F = np.ones((Pa, q))
        for j in range(k):
            mu = np.bincount(cell, x[:, j], ncell) / safe
            dev = x[:, j] - mu[cell]
            s = np.sqrt(np.bincount(cell, dev ** 2, ncell) / safe)
            s[s == 0] = 1.0
            F[:, 1 + j] = dev / s[cell]
        X = np.empty((Pa, ncol))
        X[:, :q] = F
        X[:, q:] = dM
        d = target.shape[1]
        order = np.argsort(cell, kind="stable")
        starts = np.searchsorted(cell[order], np.arange(ncell))
        Xs = X[order]
        full = cnt > 0
        G = np.zeros((ncell, ncol, ncol))
        R = np.zeros((ncell, ncol, d))
        G[full] = np.add.reduceat(Xs[:, :, None] * Xs[:, None, :], starts[full], axis=0)
        R[full] = np.add.reduceat(Xs[:, :, None] * target[order][:, None, :], starts[full], axis=0)
        dg = np.sqrt(np.einsum("cii->ci", G))
        dg[dg == 0] = 1.0
        Gs = G / (dg[:, :, None] * dg[:, None, :])
        ev = np.linalg.eigvalsh(Gs)
        lam = np.full(ncell, self.ridge)
        weak = (ev[:, 0] <= 1e-12 * np.maximum(ev[:, -1], 1e-300)) & (lam == 0.0)
        lam[weak] = 1e-10
        Gs = Gs + lam[:, None, None] * np.eye(ncol)
        coef = np.linalg.solve(Gs, R / dg[:, :, None]) / dg[:, :, None]
        cb = coef[cell]                                  # Pa x ncol x d
        cond_mean = np.einsum("pq,pqd->pd", F, cb[:, :q])
        Z = np.moveaxis(cb[:, q:], 1, 2)                # Pa x d x n
        cond = float(np.max(np.sqrt((ev[:, -1] + lam) / np.maximum(ev[:, 0] + lam, 1e-300))[full]))
        return cond_mean, Z, {"cond": cond, "rescued": bool(weak[full].any()), "features": ncell * q}


def _joint_regression(Phi, dM, target, ridge):
    """Fit target ~ Phi a + sum_j (Phi dM_j) b_j; returns fitted a-part, b-part, diagnostics.

    Normal equations on the column-scaled design, Cholesky solve plus one step
    of iterative refinement.  A near-singular design gets an automatic ridge.
    """
    Pa, K = Phi.shape
    n = dM.shape[1]
    ncol = K * (n + 1)
    if Pa < ncol:
        raise DiagnosticsError(f"{Pa} active paths cannot determine {ncol} regression coefficients")
    X = np.empty((Pa, ncol))
    X[:, :K] = Phi
    for j in range(n):
        X[:, K * (j + 1):K * (j + 2)] = Phi * dM[:, j:j + 1]
    G = X.T @ X
    if not np.all(np.isfinite(G)):
        raise DiagnosticsError("non-finite regression design")
    dg = np.sqrt(np.diag(G))
    dg[dg == 0] = 1.0
    Gs = G / np.outer(dg, dg)
    ev = np.linalg.eigvalsh(Gs)
    rescued = False
    lam = ridge
    if ev[0] <= 1e-13 * ev[-1] and lam == 0.0:
        lam, rescued = 1e-10, True
    Gs = Gs + lam * np.eye(ncol)
    cond = float(np.sqrt((ev[-1] + lam) / max(ev[0] + lam, 1e-300)))
    try:
        cf = cho_factor(Gs, check_finite=False)
    except np.linalg.LinAlgError:
        raise DiagnosticsError(f"regression design is singular even after ridge {lam:g}")
    rhs = X.T @ target / dg[:, None]
    coef = cho_solve(cf, rhs, check_finite=False)
    if lam == 0.0:
        r = target - X @ (coef / dg[:, None])
        coef = coef + cho_solve(cf, X.T @ r / dg[:, None], check_finite=False)
    coef = coef / dg[:, None]
    cond_mean = Phi @ coef[:K]
    Z = np.stack([Phi @ coef[K * (j + 1):K * (j + 2)] for j in range(n)], axis=-1)
    return cond_mean, Z, {"cond": cond, "rescued": rescued, "features": K}


# ---------------------------------------------------------------- solution

@dataclass
class DiscreteBSDESolution:
    Y: np.ndarray                 # P x (N+1) x d
    Z: np.ndarray                 # P x N x d x n
    residual: np.ndarray          # per-step mean abs one-step defect of the last sweep
    residual_history: np.ndarray  # sweeps x N
    picard_iterations: int
    diagnostics: dict
    ensemble: MartingaleEnsemble = field(repr=False)
    start_index: int = 0

    @property
    def Y0(self) -> np.ndarray:
        return self.Y[:, self.start_index].mean(axis=0)

    def Zm(self) -> np.ndarray:
        return np.einsum("pidk,ikl->pidl", self.Z, self.ensemble.m_steps)

    def export_csv(self, target, max_paths: Optional[int] = None):
        from .martingale_lab import _savetxt
        P = self.Y.shape[0] if max_paths is None else min(self.Y.shape[0], max_paths)
        N = self.Z.shape[1]
        d, n = self.Z.shape[2], self.Z.shape[3]
        t = self.ensemble.grid.times
        Zpad = np.concatenate([self.Z[:P], np.full((P, 1, d, n), np.nan)], axis=1)
        res = np.concatenate([self.residual, [0.0]])
        cols = [np.repeat(np.arange(P), N + 1), np.tile(t, P)]
        cols += [self.Y[:P, :, a].ravel() for a in range(d)]
        cols += [Zpad[:, :, a, b].ravel() for a in range(d) for b in range(n)]
        cols.append(np.tile(res, P))
        header = ["path", "time"] + [f"Y{a + 1}" for a in range(d)]
        header += [f"Z{a + 1}_{b + 1}" for a in range(d) for b in range(n)] + ["residual"]
        fmt = ["%d"] + ["%.17g"] * (len(cols) - 1)
        return _savetxt(target, np.column_stack(cols), fmt, ",".join(header))


def _times_m(Zi, mi):
    P, d, n = Zi.shape
    return (Zi.reshape(P * d, n) @ mi).reshape(P, d, n)


def _fixed_point(f, i, paths, cond, zm, dA, iters=20, tol=1e-10):
    y = cond.copy()
    for _ in range(iters):
        y_new = cond + f(i, paths, y, zm) * dA[:, None]
        if np.max(np.abs(y_new - y)) <= tol:
            return y_new
        y = y_new
    return y


def solve(ensemble: MartingaleEnsemble, xi: TerminalFunctional, f: Driver,
          basis: Optional[RegressionBasis] = None, picard_iters: int = 3,
          implicit: bool = False, start_index: int = 0,
          terminal_values: Optional[np.ndarray] = None) -> DiscreteBSDESolution:
    """Backward regression scheme with global Picard sweeps.

    Sweep 1 evaluates the driver at the current (explicit or implicit) y and the
    freshly regressed Z.  Later sweeps evaluate it at the previous sweep's
    (Y, Z).  Sweeps stop early once consecutive sweeps agree to round-off.
    Nodes before ``start_index`` are left as NaN.
    """
    if not f.is_lipschitz:
        raise UnsupportedError("locally Lipschitz drivers must be truncated before solving")
    if picard_iters < 1:
        raise InvalidInputError("picard_iters must be >= 1")
    basis = basis or RegressionBasis()
    paths = ensemble.values
    P, N, n = ensemble.P, ensemble.N, ensemble.n
    d = xi.d
    # time-major working copies: every per-step slice below is contiguous
    MT = np.ascontiguousarray(paths.transpose(1, 0, 2))
    dMT = np.diff(MT, axis=0)
    dAT = np.ascontiguousarray(ensemble.dA.T)
    m = ensemble.m_steps
    xiv = xi(paths) if terminal_values is None else np.asarray(terminal_values, float).reshape(P, d)

    history = []
    Yp = Zp = None
    conds = np.zeros(N)
    rescued = np.zeros(N, dtype=bool)
    used = 0
    for sweep in range(picard_iters):
        Y = np.full((N + 1, P, d), np.nan)
        Z = np.zeros((N, P, d, n))
        Y[N] = xiv
        res = np.zeros(N)
        for i in range(N - 1, start_index - 1, -1):
            dAi = dAT[i]
            act = dAi > 0
            n_act = int(np.count_nonzero(act))
            target = Y[i + 1]
            if n_act == 0:
                Y[i] = target
                continue
            every = n_act == P
            if basis.path_features:
                state = basis.state(paths if every else paths[act], i)
            else:
                state = MT[i] if every else MT[i][act]
            cm, Za, diag = basis.fit(state, dMT[i] if every else dMT[i][act],
                                     target if every else target[act])
            conds[i] = diag["cond"]
            rescued[i] = diag["rescued"]
            if every:
                cond = cm
                Z[i] = Za
            else:
                cond = target.copy()
                cond[act] = cm
                Z[i][act] = Za
            zm = _times_m(Z[i], m[i])
            if sweep == 0:
                ystar = _fixed_point(f, i, paths, cond, zm, dAi) if implicit else cond
                fv = f(i, paths, ystar, zm)
            else:
                fv = f(i, paths, Yp[i], _times_m(Zp[i], m[i]))
            Y[i] = cond + fv * dAi[:, None]
            if not (np.all(np.isfinite(Y[i])) and np.all(np.isfinite(Z[i]))):
                raise DivergenceError(f"non-finite solution at step {i}", step=i)
            res[i] = np.mean(np.abs(Y[i] - cond - f(i, paths, Y[i], zm) * dAi[:, None]))
        history.append(res)
        used = sweep + 1
        if Yp is not None:
            sl = slice(start_index, N + 1)
            scale = 1.0 + np.max(np.abs(Y[sl]))
            if (np.max(np.abs(Y[sl] - Yp[sl])) <= 1e-13 * scale
                    and np.max(np.abs(Z[start_index:] - Zp[start_index:])) <= 1e-13 * scale):
                break
        Yp, Zp = Y, Z
    Y = np.moveaxis(Y, 0, 1)
    Z = np.moveaxis(Z, 0, 1)
    return DiscreteBSDESolution(Y, Z, history[-1], np.array(history), used,
                                {"condition": conds, "ridge_rescued": rescued},
                                ensemble, start_index)


# ------------------------------------------------------------------- bounds

def y_bound(CXi, Cf, K, Cy, Cz) -> float:
    return float(np.sqrt(CXi ** 2 + Cf ** 2) * np.exp(0.5 * K * (2 * Cy + Cz ** 2 + 1)))


@dataclass(frozen=True)
class Multi:
    DXi: float
    Df: float
    K: float
    Cy: float
    Cz: float


@dataclass(frozen=True)
class OneDim:
    DXi: float
    Df: float
    K: float
    Cy: float
    n: int


def z_bound(kind: Union[Multi, OneDim]) -> float:
    if isinstance(kind, Multi):
        return float(np.sqrt(kind.DXi ** 2 + kind.Df ** 2 * kind.K)
                     * np.exp(0.5 * kind.K * (2 * kind.Cy + kind.Cz ** 2 + 1)))
    rn = np.sqrt(kind.n)
    if kind.Cy == 0:
        return float(rn * (kind.DXi + kind.Df * kind.K))
    # (D_xi + q) e^{Cy K} - q rearranged so that K = 0 gives D_xi exactly
    q = kind.Df / kind.Cy
    return float(rn * (kind.DXi * np.exp(kind.Cy * kind.K) + q * np.expm1(kind.Cy * kind.K)))


def smallness_lhs(R, DXi, Df, K, rho) -> float:
    with np.errstate(over="ignore"):
        return float(np.sqrt(DXi ** 2 + Df ** 2 * K) * np.exp(0.5 * K * (float(rho(R)) + 1) ** 2))


def smallness_radius(DXi, Df, K, rho, Rmax=1e3, resolution=4096) -> Optional[float]:
    """Smallest R in (0, Rmax] with sqrt(DXi^2+Df^2 K) exp(K (rho(R)+1)^2 / 2) <= R.

    Scans a geometric grid, then bisects on the first bracketing interval.
    Returns None when the scan finds no admissible R.
    """
    c0 = np.sqrt(DXi ** 2 + Df ** 2 * K)
    if c0 == 0:
        return 0.0
    gap = lambda R: smallness_lhs(R, DXi, Df, K, rho) - R
    grid = np.geomspace(Rmax * 1e-9, Rmax, resolution)
    vals = np.array([gap(R) for R in grid])
    ok = np.flatnonzero(vals <= 0)
    if ok.size == 0:
        return None
    j = ok[0]
    if j == 0:
        lo, hi = 0.0, grid[0]
        # gap(0+) = lhs(0) > 0 since c0 > 0
    else:
        lo, hi = grid[j - 1], grid[j]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) <= 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * hi:
            break
    return float(hi)


def stability_constant(K, Cy, Cz) -> float:
    return float(2.0 * np.exp(K * (2 * Cy + 2 * Cz ** 2 + 2)))


def h2_norms(sol: DiscreteBSDESolution, solBar: DiscreteBSDESolution):
    """Discrete sup_t E|dY_t|^2, E sum |dY|^2 dA and E sum |dZ m|^2 dA."""
    ens = sol.ensemble
    s = max(sol.start_index, solBar.start_index)
    dY = sol.Y[:, s:] - solBar.Y[:, s:]
    dZm = np.einsum("pidk,ikl->pidl", sol.Z[:, s:] - solBar.Z[:, s:], ens.m_steps[s:])
    dA = ens.dA[:, s:]
    sup_t = float(np.max(np.mean(np.sum(dY ** 2, axis=2), axis=0)))
    yH2 = float(np.mean(np.sum(np.sum(dY[:, 1:] ** 2, axis=2) * dA, axis=1)))
    zH2 = float(np.mean(np.sum(np.sum(dZm ** 2, axis=(2, 3)) * dA, axis=1)))
    return sup_t, yH2, zH2


def driver_gap_norm_sq(f: Driver, fbar: Driver, solBar: DiscreteBSDESolution) -> float:
    """Monte Carlo estimate of E sum |f - fbar|^2 dA at (Ybar, Zbar m)."""
    ens = solBar.ensemble
    Zm = solBar.Zm()
    tot = np.zeros(ens.P)
    for i in range(solBar.start_index, ens.N):
        g = f(i, ens.values, solBar.Y[:, i], Zm[:, i]) - fbar(i, ens.values, solBar.Y[:, i], Zm[:, i])
        tot += np.sum(g ** 2, axis=1) * ens.dA[:, i]
    return float(np.mean(tot))


def stability_gap(sol, solBar, deltaXiNormSq, driverGapNormSq, K, Cy, Cz,
                  atol=1e-8, rtol=1e-6) -> dict:
    if sol.ensemble is not solBar.ensemble and not sol.ensemble.same_noise(solBar.ensemble):
        raise InvalidInputError("stability comparison needs both solutions on the same ensemble")
    if sol.Y.shape != solBar.Y.shape or sol.Z.shape != solBar.Z.shape:
        raise InvalidInputError("solution shapes differ")
    sup_t, yH2, zH2 = h2_norms(sol, solBar)
    measured = sup_t + yH2 + zH2
    bound = stability_constant(K, Cy, Cz) * (deltaXiNormSq + driverGapNormSq)
    return {"measured": measured, "bound": bound, "sup_t": sup_t, "y_H2": yH2, "z_H2": zH2,
            "ok": bool(measured <= bound + atol + rtol * abs(bound))}


def check_comparison(sol: DiscreteBSDESolution, solBar: DiscreteBSDESolution,
                     tol: float = 1e-8) -> dict:
    """Count nodes where Y > Ybar + tol (scalar BSDEs only)."""
    if sol.Y.shape[2] != 1 or solBar.Y.shape[2] != 1:
        raise UnsupportedError("comparison is only defined for d = 1")
    s = max(sol.start_index, solBar.start_index)
    Y = sol.Y[:, s:, 0]
    Yb = solBar.Y[:, s:, 0]
    scale = 1.0 + np.maximum(np.abs(Y), np.abs(Yb))
    viol = Y > Yb + tol * scale
    count = int(viol.sum())
    return {"violations": count, "fraction": count / viol.size, "nodes": int(viol.size),
            "max_excess": float(np.max(Y - Yb)), "pass": count == 0}
