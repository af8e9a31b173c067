"""Path derivatives of BSDE solutions by bump-and-resolve, the linearized BSDE,
and the delta-hedging check ``grad_u Y_u = Z_u``.

The bump is ``M + h e 1_{[t_u, T]}`` with the base noise reused.  Only nodes
at or after ``t_u`` are re-solved on the bumped ensemble; earlier nodes are
functionals of the unchanged path prefix, so their quotients are exactly 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .bsde_core import (DiscreteBSDESolution, Driver, Lipschitz, RegressionBasis,
                        TerminalFunctional, solve)
from .errors import DiagnosticsError, InvalidInputError
from .martingale_lab import MartingaleEnsemble, StoppedScaledBM, bump_ensemble


@dataclass(frozen=True)
class BumpSpec:
    u_index: int
    e: tuple
    h: Optional[float] = None   # None -> 1e-4 sqrt(K)

    def __post_init__(self):
        e = np.asarray(self.e, dtype=float).ravel()
        if abs(np.linalg.norm(e) - 1.0) > 1e-12:
            raise InvalidInputError("bump direction must be a unit vector")
        if self.h is not None and self.h == 0:
            raise InvalidInputError("bump size h must be nonzero")
        object.__setattr__(self, "e", tuple(e))

    def size(self, ensemble: MartingaleEnsemble) -> float:
        return self.h if self.h is not None else 1e-4 * np.sqrt(ensemble.K)

    @classmethod
    def unit(cls, u_index, i, n, h=None) -> "BumpSpec":
        e = np.zeros(n)
        e[i] = 1.0
        return cls(u_index, tuple(e), h)


@dataclass
class BSDEProblem:
    xi: TerminalFunctional
    f: Driver
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    picard_iters: int = 3
    implicit: bool = False

    def solve(self, ensemble, start_index=0, terminal_values=None) -> DiscreteBSDESolution:
        return solve(ensemble, self.xi, self.f, self.basis, self.picard_iters, self.implicit,
                     start_index, terminal_values)


@dataclass
class NablaResult:
    dY: np.ndarray      # P x (N+1) x d
    dZ: np.ndarray      # P x N x d x n
    h: float
    bump: BumpSpec
    central: bool


def _resolve_bumped(problem, ensemble, u, e, h):
    bumped = bump_ensemble(ensemble, u, e, h)
    return problem.solve(bumped, start_index=u)


def numeric_nabla(problem: BSDEProblem, ensemble: MartingaleEnsemble, bump: BumpSpec,
                  central: bool = False,
                  base: Optional[DiscreteBSDESolution] = None) -> NablaResult:
    """Node-wise difference quotients of (Y, Z) under the path bump."""
    u = bump.u_index
    if not 0 <= u <= ensemble.N:
        raise InvalidInputError(f"bump index {u} outside the grid")
    h = bump.size(ensemble)
    e = np.asarray(bump.e)
    P, N, n = ensemble.P, ensemble.N, ensemble.n
    d = problem.xi.d
    dY = np.zeros((P, N + 1, d))
    dZ = np.zeros((P, N, d, n))
    up = _resolve_bumped(problem, ensemble, u, e, h)
    if central:
        lo = _resolve_bumped(problem, ensemble, u, e, -h)
        dY[:, u:] = (up.Y[:, u:] - lo.Y[:, u:]) / (2 * h)
        dZ[:, u:] = (up.Z[:, u:] - lo.Z[:, u:]) / (2 * h)
    else:
        if base is None:
            base = problem.solve(ensemble, start_index=u)
        dY[:, u:] = (up.Y[:, u:] - base.Y[:, u:]) / h
        dZ[:, u:] = (up.Z[:, u:] - base.Z[:, u:]) / h
    return NablaResult(dY, dZ, h, bump, central)


# ------------------------------------------------------------ linearization

@dataclass
class LinearCoeffs:
    """Coefficients of g(t, y, z) = zeta + eta y + theta . z, stored time-major.

    zeta: N x P x d, eta: N x P x d x d, theta: N x P x d x d x n where
    ``(theta . z)_c = sum_{a,b} theta[c, a, b] z[a, b]``.
    """
    zeta: np.ndarray
    eta: np.ndarray
    theta: np.ndarray
    u_index: int = 0

    def driver(self) -> Driver:
        zeta, eta, theta = self.zeta, self.eta, self.theta

        def g(i, paths, y, z):
            return (zeta[i] + np.einsum("pcd,pd->pc", eta[i], y)
                    + np.einsum("pcab,pab->pc", theta[i], z))
        Cy = float(np.max(np.linalg.norm(eta, ord=2, axis=(-2, -1)))) if eta.size else 0.0
        th = theta.reshape(theta.shape[:3] + (-1,))
        Cz = float(np.max(np.linalg.norm(th, ord=2, axis=(-2, -1)))) if th.size else 0.0
        return Driver(g, Lipschitz(Cy, Cz), 0.0, None, zeta.shape[-1])


def linearized_coeffs(f: Driver, base: DiscreteBSDESolution, bump: BumpSpec,
                      fd_step: float = 1e-6) -> LinearCoeffs:
    """zeta by path-bump quotient of f at frozen (Y, Zm); eta, theta by central differences."""
    ens = base.ensemble
    u = bump.u_index
    h = bump.size(ens)
    bumped = bump_ensemble(ens, u, np.asarray(bump.e), h)
    P, N, n = ens.P, ens.N, ens.n
    d = base.Y.shape[2]
    zeta = np.zeros((N, P, d))
    eta = np.zeros((N, P, d, d))
    theta = np.zeros((N, P, d, d, n))
    Zm = base.Zm()
    paths = ens.values
    for i in range(u, N):
        y = np.ascontiguousarray(base.Y[:, i])
        z = np.ascontiguousarray(Zm[:, i])
        zeta[i] = (f(i, bumped.values, y, z) - f(i, paths, y, z)) / h
        for k in range(d):
            dy = np.zeros(d)
            dy[k] = fd_step
            eta[i, :, :, k] = (f(i, paths, y + dy, z) - f(i, paths, y - dy, z)) / (2 * fd_step)
        for a in range(d):
            for b in range(n):
                dz = np.zeros((d, n))
                dz[a, b] = fd_step
                theta[i, :, :, a, b] = (f(i, paths, y, z + dz) - f(i, paths, y, z - dz)) / (2 * fd_step)
        for name, arr in (("zeta", zeta[i]), ("eta", eta[i]), ("theta", theta[i])):
            if not np.all(np.isfinite(arr)):
                raise DiagnosticsError(f"non-finite {name} estimate at step {i}")
    return LinearCoeffs(zeta, eta, theta, u)


def terminal_derivative(xi: TerminalFunctional, ensemble: MartingaleEnsemble,
                        bump: BumpSpec) -> np.ndarray:
    """Bump quotient of xi along the path, P x d."""
    h = bump.size(ensemble)
    bumped = bump_ensemble(ensemble, bump.u_index, np.asarray(bump.e), h)
    return (xi(bumped.values) - xi(ensemble.values)) / h


def solve_differentiated(coeffs: LinearCoeffs, Xi: np.ndarray, ensemble: MartingaleEnsemble,
                         basis: Optional[RegressionBasis] = None, picard_iters: int = 3):
    """Solve the linear BSDE with driver zeta + eta y + theta.z and terminal Xi from u on.

    Returns (U, V) with U: P x (N+1) x d and V: P x N x d x n, zero before u.
    """
    g = coeffs.driver()
    Xi = np.asarray(Xi, dtype=float).reshape(ensemble.P, -1)
    xi = TerminalFunctional(lambda p: Xi, d=Xi.shape[1])
    u = coeffs.u_index
    sol = solve(ensemble, xi, g, basis, picard_iters, False, u)
    U = np.zeros(sol.Y.shape)
    V = np.zeros(sol.Z.shape)
    U[:, u:] = sol.Y[:, u:]
    V[:, u:] = sol.Z[:, u:]
    return U, V


# ------------------------------------------------------------ delta hedge

@dataclass
class HedgeRecord:
    u_index: int
    direction: int
    h: float
    max_abs: float
    mean_abs: float
    rms: float
    near_stop_nodes: int
    quotient: np.ndarray = field(repr=False)
    z_projection: np.ndarray = field(repr=False)


@dataclass
class DeltaHedgeReport:
    records: List[HedgeRecord]
    tolerance: float
    pre_bump_max: float

    @property
    def max_rms(self) -> float:
        return max(r.rms for r in self.records)

    @property
    def max_abs(self) -> float:
        return max(r.max_abs for r in self.records)

    @property
    def mean_abs(self) -> float:
        return float(np.mean([r.mean_abs for r in self.records]))

    @property
    def passed(self) -> bool:
        return self.max_rms <= self.tolerance and self.pre_bump_max == 0.0

    def summary(self) -> dict:
        return {"max_rms_discrepancy": self.max_rms, "max_abs_discrepancy": self.max_abs,
                "mean_abs_discrepancy": self.mean_abs, "tolerance": self.tolerance,
                "pre_bump_max_quotient": self.pre_bump_max, "pass": self.passed,
                "instants": sorted({r.u_index for r in self.records})}

    def rows(self):
        """(u, direction, h, rms, max_abs, mean_abs, near_stop_nodes) per record."""
        return [(r.u_index, r.direction, r.h, r.rms, r.max_abs, r.mean_abs, r.near_stop_nodes)
                for r in self.records]


def delta_hedge_check(problem: BSDEProblem, ensemble: MartingaleEnsemble,
                      u_indices: Iterable[int], h: Optional[float] = None,
                      directions: Optional[Sequence[int]] = None,
                      base: Optional[DiscreteBSDESolution] = None) -> DeltaHedgeReport:
    """Compare the bump quotient of Y at u with Z_u e_i* for each instant and direction.

    The per-instant discrepancy is measured in root-mean-square over paths
    (the derivative is an L2 limit); max and mean absolute values are reported
    too.  For the stopped model, paths whose stopping node is u or u+1 are
    excluded from the statistics and counted separately.
    """
    base = base if base is not None else problem.solve(ensemble)
    n = ensemble.n
    directions = range(n) if directions is None else directions
    h = h if h is not None else 1e-4 * np.sqrt(ensemble.K)
    records = []
    pre = 0.0
    for u in u_indices:
        if not 0 <= u < ensemble.N:
            raise InvalidInputError("hedge instants must satisfy 0 <= u < N")
        for i in directions:
            bs = BumpSpec.unit(u, i, n, h)
            nab = numeric_nabla(problem, ensemble, bs, base=base)
            pre = max(pre, float(np.max(np.abs(nab.dY[:, :u]))) if u > 0 else 0.0)
            q = nab.dY[:, u]
            zp = base.Z[:, u, :, i]
            keep = np.ones(ensemble.P, dtype=bool)
            if isinstance(ensemble.model, StoppedScaledBM) and ensemble.stop_index is not None:
                s = ensemble.stop_index
                near = (s == u) | (s == u + 1)
                keep = ~near & ((s < 0) | (s > u)) & (ensemble.dA[:, u] > 0)
            disc = np.linalg.norm(q[keep] - zp[keep], axis=1)
            records.append(HedgeRecord(u, i, h, float(disc.max()) if disc.size else 0.0,
                                       float(disc.mean()) if disc.size else 0.0,
                                       float(np.sqrt(np.mean(disc ** 2))) if disc.size else 0.0,
                                       int((~keep).sum()), q, zp))
    tol = max(1e-2, 20 * h)
    return DeltaHedgeReport(records, tol, pre)
