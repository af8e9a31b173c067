"""Portfolio selection by the martingale optimality principle.

Market: ``dS^i / S^i = theta^i dA + dM^i`` with deterministic invertible m.
For a penalty p and utility (power or exponential) the pointwise objective is

    power:        G(pi, z) = -kappa/2 |pi m - z|^2 + p(pi) - pi theta + |pi m|^2 / 2
    exponential:  G(pi, z) =  kappa/2 |pi m - z|^2 + p(pi) - pi theta

with ``z = Z m`` a row vector.  The optimal control map is ``k(z) = argmin G``
and the BSDE driver is ``f(z) = G(k(z), z)``.  After solving BSDE(xi, f), the
candidate ``Delta_s = k(Z_s m_s)`` attains ``x^kappa e^{-kappa Y_0} / kappa``
(power) or ``-exp(-kappa (x - Y_0))`` (exponential).

Rows are handled in batches: z has shape (..., n).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr, ndtri

from .bsde_core import (Driver, Lipschitz, LocallyLipschitzZ, OneDim, RegressionBasis,
                        TerminalFunctional, solve, truncate_driver, z_bound)
from .errors import (ConfigurationError, DivergenceError, InvalidInputError,
                     UnsupportedError)
from .martingale_lab import MartingaleEnsemble, MartingaleModel, StandardBM


# ------------------------------------------------------------------ market

@dataclass
class MarketModel:
    theta: np.ndarray
    model: MartingaleModel

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if self.theta.size != self.model.dim:
            raise ConfigurationError("theta must have one entry per asset")
        m = self.m
        if abs(np.linalg.det(m)) < 1e-14:
            raise ConfigurationError("volatility factor m must be invertible")

    @property
    def n(self) -> int:
        return self.model.dim

    @property
    def m(self) -> np.ndarray:
        return self.model.volatility()

    @property
    def m_inv(self) -> np.ndarray:
        return np.linalg.inv(self.m)

    @property
    def m_scalar(self) -> Optional[float]:
        m = self.m
        c = m[0, 0]
        return float(c) if np.allclose(m, c * np.eye(self.n), atol=1e-15) else None

    @property
    def a(self) -> np.ndarray:
        """Row (m^{-1} theta)*, the drift expressed in the pi m coordinates."""
        return self.m_inv @ self.theta


# ---------------------------------------------------------------- penalties

@dataclass
class ClosedSet:
    """Investment constraint pi in C (penalty 0 on C, +inf off C).

    Built-in kinds: ``all`` (R^n), ``zero`` ({0}), ``box`` ([lo, hi]
    componentwise), ``ball`` (|pi| <= radius) and ``cone`` (pi >= 0).  A
    custom set supplies ``projector`` and, for risk-neutral power utility,
    ``linear_argmin``; custom sets must be cones or star-shaped about 0 for the
    scaled projection used below to be exact.
    """
    kind: str = "all"
    lo: Optional[Sequence[float]] = None
    hi: Optional[Sequence[float]] = None
    radius: Optional[float] = None
    projector: Optional[Callable[[np.ndarray], np.ndarray]] = None
    linear_min: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in ("all", "zero", "box", "ball", "cone", "custom"):
            raise ConfigurationError(f"unknown closed set kind {self.kind!r}")
        if self.kind == "box":
            if self.lo is None or self.hi is None:
                raise ConfigurationError("box needs lo and hi")
            self.lo = np.asarray(self.lo, dtype=float)
            self.hi = np.asarray(self.hi, dtype=float)
            if np.any(self.lo > self.hi):
                raise ConfigurationError("box needs lo <= hi")
        if self.kind == "ball" and (self.radius is None or self.radius < 0):
            raise ConfigurationError("ball needs a nonnegative radius")
        if self.kind == "custom" and self.projector is None:
            raise ConfigurationError("custom set needs a projector")

    def project(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if self.kind == "all":
            return v.copy()
        if self.kind == "zero":
            return np.zeros_like(v)
        if self.kind == "box":
            return np.clip(v, self.lo, self.hi)
        if self.kind == "ball":
            nv = np.linalg.norm(v, axis=-1, keepdims=True)
            return v * np.minimum(1.0, self.radius / np.maximum(nv, 1e-300))
        if self.kind == "cone":
            return np.maximum(v, 0.0)
        return np.asarray(self.projector(v), dtype=float)

    def project_scaled(self, v: np.ndarray, c: float) -> np.ndarray:
        """Projection onto c C = {c pi : pi in C}."""
        return c * self.project(np.asarray(v) / c)

    def contains(self, pi: np.ndarray, tol: float = 1e-10) -> np.ndarray:
        pi = np.asarray(pi, dtype=float)
        return np.linalg.norm(self.project(pi) - pi, axis=-1) <= tol * (1 + np.linalg.norm(pi, axis=-1))

    def penalty(self, pi: np.ndarray) -> np.ndarray:
        return np.where(self.contains(pi), 0.0, np.inf)

    @property
    def bound(self) -> float:
        """sup |pi| over C (inf if unbounded)."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "box":
            return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))
        if self.kind == "ball":
            return float(self.radius)
        return np.inf

    def linear_argmin(self, g: np.ndarray) -> np.ndarray:
        """argmin over pi in C of pi . g (bounded sets only)."""
        g = np.asarray(g, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(g)
        if self.kind == "box":
            return np.where(g > 0, self.lo, np.where(g < 0, self.hi, np.clip(0.0, self.lo, self.hi)))
        if self.kind == "ball":
            ng = np.linalg.norm(g, axis=-1, keepdims=True)
            return np.where(ng > 0, -self.radius * g / np.maximum(ng, 1e-300), 0.0)
        if self.kind == "custom" and self.linear_min is not None:
            return np.asarray(self.linear_min(g), dtype=float)
        raise ConfigurationError("a linear objective needs a bounded constraint set")


@dataclass
class Diversification:
    """p(pi) = |pi (I - w)|^beta."""
    w: np.ndarray
    beta: float = 2.0

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        if self.w.shape[0] != self.w.shape[1]:
            raise ConfigurationError("w must be square")
        if self.beta <= 1:
            raise ConfigurationError("beta must exceed 1")

    @property
    def B(self) -> np.ndarray:
        return np.eye(self.w.shape[0]) - self.w

    def penalty(self, pi):
        return np.linalg.norm(np.asarray(pi) @ self.B, axis=-1) ** self.beta


@dataclass
class InfoCost:
    """p(pi) = sum_i C_i 1{pi_i != 0}."""
    C: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float).ravel()
        if np.any(self.C < 0):
            raise ConfigurationError("information costs must be nonnegative")

    def penalty(self, pi):
        return np.sum(self.C * (np.asarray(pi) != 0), axis=-1)


PenaltySpec = Union[ClosedSet, Diversification, InfoCost]


@dataclass(frozen=True)
class Power:
    kappa: float
    x: float = 1.0

    def __post_init__(self):
        if self.kappa == 0 or self.kappa > 1:
            raise ConfigurationError("power utility needs kappa in (-inf, 0) or (0, 1]")
        if self.x <= 0:
            raise ConfigurationError("power utility needs positive initial wealth")


@dataclass(frozen=True)
class Exponential:
    kappa: float
    x: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ConfigurationError("exponential utility needs kappa > 0")


UtilitySpec = Union[Power, Exponential]


# ------------------------------------------------------------ objective G

def objective(penalty: PenaltySpec, utility: UtilitySpec, market: MarketModel,
              pi: np.ndarray, z: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    z = np.asarray(z, dtype=float)
    m = market.m
    pm = pi @ m
    k = utility.kappa
    pen = penalty.penalty(pi)
    lin = pi @ market.theta
    if isinstance(utility, Power):
        return -0.5 * k * np.sum((pm - z) ** 2, axis=-1) + pen - lin + 0.5 * np.sum(pm ** 2, axis=-1)
    return 0.5 * k * np.sum((pm - z) ** 2, axis=-1) + pen - lin


def _require_info_market(market: MarketModel):
    n = market.n
    if np.any(market.theta != 0):
        raise UnsupportedError("information-cost examples assume theta = 0")
    if not np.allclose(market.m, np.eye(n) / np.sqrt(n), atol=1e-15):
        raise UnsupportedError("information-cost examples assume m = I / sqrt(n)")


def optimal_control(penalty: PenaltySpec, utility: UtilitySpec, market: MarketModel,
                    s: int, z: np.ndarray) -> np.ndarray:
    """k(s, z) = argmin_pi G(s, pi, z) for the six supported (penalty, utility) pairs."""
    z = np.asarray(z, dtype=float)
    m, n, k = market.m, market.n, utility.kappa
    if isinstance(penalty, ClosedSet):
        c = market.m_scalar
        if c is None and penalty.kind != "all":
            raise UnsupportedError("constraint sets need a scalar volatility factor m = c I")
        a = market.a
        if isinstance(utility, Power):
            if k < 1:
                target = (a - k * z) / (1.0 - k)
                v = penalty.project_scaled(target, c) if c is not None else target
                return v @ market.m_inv
            return penalty.linear_argmin((z - a) @ m.T)
        v = z + a / k
        v = penalty.project_scaled(v, c) if c is not None else v
        return v @ market.m_inv
    if isinstance(penalty, Diversification):
        B = penalty.B
        if isinstance(utility, Power):
            if k < 1:
                if penalty.beta != 2:
                    raise UnsupportedError("power diversification with kappa < 1 needs beta = 2")
                H = 2.0 * B @ B.T + (1.0 - k) * m @ m.T
                rhs = market.theta - k * z @ m.T
            else:
                if np.linalg.cond(B) > 1e12:
                    raise ConfigurationError("I - w must be invertible for risk-neutral diversification")
                Binv = np.linalg.inv(B)
                Binv_T = Binv.T
                q = market.theta - z @ m.T
                r = q @ Binv_T
                nr = np.linalg.norm(r, axis=-1, keepdims=True)
                beta = penalty.beta
                with np.errstate(divide="ignore", invalid="ignore"):
                    coef = np.where(nr > 0, (nr ** (2.0 - beta) / beta) ** (1.0 / (beta - 1.0)), 0.0)
                return coef * (r @ Binv)
        else:
            if penalty.beta != 2:
                raise UnsupportedError("exponential diversification needs beta = 2")
            H = 2.0 * B @ B.T + k * m @ m.T
            rhs = market.theta + k * z @ m.T
        try:
            Hinv = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            raise ConfigurationError("diversification system matrix is singular")
        if np.linalg.cond(H) > 1e12:
            raise ConfigurationError("diversification system matrix is singular")
        return rhs @ Hinv.T
    if isinstance(penalty, InfoCost):
        _require_info_market(market)
        rn = np.sqrt(n)
        if isinstance(utility, Power):
            if k >= 1:
                raise UnsupportedError("power information-cost example needs kappa < 1")
            active = z ** 2 > 2.0 * (1.0 - k) * penalty.C / k ** 2
            return np.where(active, -k * rn * z / (1.0 - k), 0.0)
        active = z ** 2 > 2.0 * penalty.C / k
        return np.where(active, rn * z, 0.0)
    raise UnsupportedError(f"unsupported penalty {type(penalty).__name__}")


def _rho_for(penalty, utility, market) -> Optional[Callable[[float], float]]:
    """Local Lipschitz modulus of f in z, from |grad f| = |kappa (pi* m - z)| (envelope)."""
    k = abs(utility.kappa)
    mn = float(np.linalg.norm(market.m, 2))
    th = float(np.linalg.norm(market.theta))
    a = float(np.linalg.norm(market.a))
    if isinstance(penalty, ClosedSet):
        if isinstance(utility, Power) and utility.kappa == 1:
            R = penalty.bound * mn
            return lambda x: R + x
        if isinstance(utility, Power):
            return lambda x: k * (x + mn * np.linalg.norm(market.m_inv, 2) * (a + k * x) / (1 - utility.kappa))
        return lambda x: 2 * k * x + a
    if isinstance(penalty, Diversification):
        B = penalty.B
        if isinstance(utility, Power) and utility.kappa == 1:
            L = float(np.linalg.norm(np.linalg.inv(B), 2))
            beta = penalty.beta
            return lambda x: mn * L * (L * (th + mn * x) / beta) ** (1.0 / (beta - 1.0)) + x
        kk = utility.kappa
        H = 2 * B @ B.T + ((1 - kk) if isinstance(utility, Power) else kk) * market.m @ market.m.T
        Hn = float(np.linalg.norm(np.linalg.inv(H), 2))
        return lambda x: k * (mn * Hn * (k * mn * x + th) + x)
    if isinstance(penalty, InfoCost) and isinstance(utility, Power):
        kk = utility.kappa
        return lambda x: k * (x + k * x / (1 - kk))
    return None


def driver_from_penalty(penalty: PenaltySpec, utility: UtilitySpec, market: MarketModel) -> Driver:
    """f(s, z) = G(s, k(s, z), z) with declared regularity.

    Only the exponential information-cost driver is globally Lipschitz
    (Cz = max_j sqrt(2 kappa C_j)); the others grow quadratically in z and
    are declared locally Lipschitz with the modulus from ``_rho_for``.
    """
    def f(step, paths, y, zm):
        z = zm[:, 0, :]
        pi = optimal_control(penalty, utility, market, step, z)
        return objective(penalty, utility, market, pi, z)[:, None]

    if isinstance(penalty, InfoCost) and isinstance(utility, Exponential):
        _require_info_market(market)
        Cz = float(np.max(np.sqrt(2.0 * utility.kappa * penalty.C))) if penalty.C.size else 0.0
        Cf = None
        return Driver(f, Lipschitz(0.0, Cz), 0.0, Cf, 1)
    # probe the supported combination once so misuse fails at construction
    optimal_control(penalty, utility, market, 0, np.zeros((1, market.n)))
    return Driver(f, LocallyLipschitzZ(0.0, _rho_for(penalty, utility, market)), 0.0, None, 1)


def info_cost_driver_closed_form(penalty: InfoCost, utility: UtilitySpec, z: np.ndarray) -> np.ndarray:
    """Closed forms of f for the information-cost examples."""
    z = np.asarray(z, dtype=float)
    k = utility.kappa
    if isinstance(utility, Exponential):
        return 0.5 * k * np.sum(np.minimum(z ** 2, 2.0 * penalty.C / k), axis=-1)
    return -0.5 * k * np.sum(z ** 2, axis=-1) + np.sum(
        np.minimum(penalty.C - k ** 2 * z ** 2 / (2.0 * (1.0 - k)), 0.0), axis=-1)


# ------------------------------------------------------------------ wealth

@dataclass
class ControlProcess:
    values: np.ndarray   # P x N x n

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("control has non-finite entries")

    @property
    def bound(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1))) if self.values.size else 0.0


def _step_penalty(penalty, D):
    p = penalty.penalty(D)
    if np.any(~np.isfinite(p)):
        raise InvalidInputError("control leaves the admissible set")
    return p


def simulate_wealth(market: MarketModel, control: ControlProcess, penalty: PenaltySpec,
                    dynamics: str, ensemble: MartingaleEnsemble, x: float,
                    scheme: str = "exact") -> np.ndarray:
    """Wealth paths P x (N+1).

    ``multiplicative`` uses the exact exponential step by default
    (``scheme='euler'`` gives the naive product), ``additive`` the direct sum.
    """
    D = control.values
    P, N = ensemble.P, ensemble.N
    dM = ensemble.increments
    dA = ensemble.dA
    m = ensemble.m_steps
    X = np.empty((P, N + 1))
    if dynamics == "multiplicative":
        if x <= 0:
            raise InvalidInputError("multiplicative wealth needs x > 0")
        logX = np.full(P, np.log(x))
        X[:, 0] = x
        for i in range(N):
            Di = D[:, i]
            drift = -_step_penalty(penalty, Di) + Di @ market.theta
            if scheme == "euler":
                X[:, i + 1] = X[:, i] * (1.0 + drift * dA[:, i] + np.sum(Di * dM[:, i], axis=1))
                continue
            vol2 = np.sum((Di @ m[i]) ** 2, axis=1)
            logX = logX + (drift - 0.5 * vol2) * dA[:, i] + np.sum(Di * dM[:, i], axis=1)
            X[:, i + 1] = np.exp(logX)
    elif dynamics == "additive":
        X[:, 0] = x
        for i in range(N):
            Di = D[:, i]
            drift = -_step_penalty(penalty, Di) + Di @ market.theta
            X[:, i + 1] = X[:, i] + drift * dA[:, i] + np.sum(Di * dM[:, i], axis=1)
    else:
        raise InvalidInputError(f"unknown wealth dynamics {dynamics!r}")
    if not np.all(np.isfinite(X)):
        raise DivergenceError("non-finite wealth")
    return X


def utility_values(utility: UtilitySpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """U = (X e^{-Y})^kappa / kappa or -exp(-kappa (X - Y)), elementwise."""
    k = utility.kappa
    if isinstance(utility, Power):
        return np.exp(k * (np.log(X) - Y)) / k
    return -np.exp(-k * (X - Y))


def closed_form_value(utility: UtilitySpec, Y0: float) -> float:
    k = utility.kappa
    if isinstance(utility, Power):
        return float(utility.x ** k * np.exp(-k * Y0) / k)
    return float(-np.exp(-k * (utility.x - Y0)))


def _dynamics(utility):
    return "multiplicative" if isinstance(utility, Power) else "additive"


# ------------------------------------------------------------ verification

Perturbation = Tuple[str, Callable[[np.ndarray, np.random.Generator], np.ndarray]]


def default_perturbations(n: int) -> List[Perturbation]:
    """Under/over-investment, a constant tilt either way and an independent bounded control."""
    out: List[Perturbation] = []
    for s in (0.0, 0.25, 0.5, 0.75, 0.9, 1.1, 1.5):
        out.append((f"scale_{s:g}", lambda D, rng, s=s: s * D))
    tilt = np.full(n, 0.1)
    out.append(("tilt_plus", lambda D, rng: D + tilt))
    out.append(("tilt_minus", lambda D, rng: D - tilt))

    def rand(D, rng):
        b = max(float(np.max(np.abs(D))), 0.1)
        return rng.uniform(-b, b, size=D.shape)
    out.append(("random", rand))
    return out


def _admissible(penalty, D):
    if isinstance(penalty, ClosedSet):
        return penalty.project(D)
    return D


@dataclass
class ControlResult:
    name: str
    value: float
    se: float
    closed_form: float
    combined_se: float
    passed: bool
    paired_diff: float = 0.0
    paired_se: float = 0.0
    max_drift_z: float = 0.0


@dataclass
class MartingaleMethodReport:
    Y0: float
    Y0_se: float
    closed_form: float
    closed_form_se: float
    optimal: ControlResult
    perturbed: List[ControlResult]
    drift_z: np.ndarray            # per-step (mean increment / SE) of the optimal U
    drift_ok: bool
    truncation_radius: Optional[float]
    control_bound: float
    drift_sigmas: float = 3.0
    solution: object = field(repr=False, default=None)

    @property
    def sign_sigmas(self) -> float:
        """One-sided threshold for the perturbed drift signs: the per-step
        false-alarm rate of ``drift_sigmas`` spread over the N steps."""
        alpha = ndtr(-self.drift_sigmas) / max(len(self.drift_z), 1)
        return float(-ndtri(alpha))

    @property
    def value_ok(self) -> bool:
        return self.optimal.passed

    @property
    def dominance_ok(self) -> bool:
        return all(r.passed for r in self.perturbed)

    @property
    def supermartingale_ok(self) -> bool:
        return all(r.max_drift_z <= self.sign_sigmas for r in self.perturbed)

    @property
    def passed(self) -> bool:
        return self.value_ok and self.dominance_ok and self.drift_ok and self.supermartingale_ok

    def rows(self):
        """(control, MC value, SE, closed-form value, pass)."""
        return [(r.name, r.value, r.se, r.closed_form, r.passed) for r in [self.optimal] + self.perturbed]

    def summary(self) -> dict:
        return {"Y0": self.Y0, "Y0_se": self.Y0_se, "closed_form": self.closed_form,
                "closed_form_se": self.closed_form_se, "optimal_value": self.optimal.value,
                "optimal_se": self.optimal.se, "value_ok": self.value_ok,
                "dominance_ok": self.dominance_ok, "drift_ok": self.drift_ok,
                "supermartingale_ok": self.supermartingale_ok,
                "max_abs_drift_z": float(np.max(np.abs(self.drift_z))),
                "max_perturbed_drift_z": max((r.max_drift_z for r in self.perturbed), default=0.0),
                "sign_sigmas": self.sign_sigmas,
                "truncation_radius": self.truncation_radius, "control_bound": self.control_bound,
                "pass": self.passed}


def prepare_driver(penalty, utility, market, xi: TerminalFunctional, ensemble,
                   margin: float = 1.1):
    """Driver ready for the Lipschitz solver: locally Lipschitz drivers are truncated
    at margin * sqrt(n) (D_xi + D_f/C_y ...) from the one-dimensional Z bound."""
    f = driver_from_penalty(penalty, utility, market)
    if f.is_lipschitz:
        return f, None
    reg = f.regularity
    R = margin * z_bound(OneDim(xi.DXi, f.Df, ensemble.K, reg.Cy, ensemble.n))
    if R <= 0:
        R = 1e-12
    return truncate_driver(f, R), R


def verify_martingale_method(market: MarketModel, penalty: PenaltySpec, utility: UtilitySpec,
                             xi: TerminalFunctional, ensemble: MartingaleEnsemble,
                             perturbations: Optional[Sequence[Perturbation]] = None,
                             basis: Optional[RegressionBasis] = None, picard_iters: int = 3,
                             seed: int = 0, drift_sigmas: float = 3.0) -> MartingaleMethodReport:
    f, R = prepare_driver(penalty, utility, market, xi, ensemble)
    sol = solve(ensemble, xi, f, basis, picard_iters)
    P, N = ensemble.P, ensemble.N
    Zm = sol.Zm()[:, :, 0, :]                       # P x N x n
    D = np.empty_like(Zm)
    fvals = np.empty((P, N))
    for i in range(N):
        D[:, i] = optimal_control(penalty, utility, market, i, Zm[:, i])
        fvals[:, i] = objective(penalty, utility, market, D[:, i], Zm[:, i])
    xiv = xi(ensemble.values)[:, 0]
    Y0 = float(np.mean(sol.Y[:, 0, 0]))
    # pathwise representation of Y0 gives its Monte Carlo standard error
    rep = xiv + np.sum(fvals * ensemble.dA, axis=1) - np.einsum("pin,pin->p", sol.Z[:, :, 0, :],
                                                                  ensemble.increments)
    Y0_se = float(np.std(rep, ddof=1) / np.sqrt(P))
    cf = closed_form_value(utility, Y0)
    cf_se = abs(utility.kappa * cf) * Y0_se
    dyn = _dynamics(utility)

    def evaluate(name, Dc):
        X = simulate_wealth(market, ControlProcess(Dc), penalty, dyn, ensemble, utility.x)
        U = utility_values(utility, X[:, -1], xiv)
        return U, X

    U_opt, X_opt = evaluate("optimal", D)
    v_opt = float(U_opt.mean())
    se_opt = float(U_opt.std(ddof=1) / np.sqrt(P))
    comb = float(np.hypot(se_opt, cf_se))
    optimal = ControlResult("optimal", v_opt, se_opt, cf, comb, abs(v_opt - cf) <= 2 * comb)

    # martingale drift of U along the optimal control
    Uproc = utility_values(utility, X_opt, sol.Y[:, :, 0])
    inc = np.diff(Uproc, axis=1)
    se_inc = inc.std(axis=0, ddof=1) / np.sqrt(P)
    mean_inc = inc.mean(axis=0)
    drift_z = np.where(se_inc > 0, mean_inc / np.where(se_inc > 0, se_inc, 1.0),
                       np.where(np.abs(mean_inc) > 1e-14, np.inf, 0.0))
    drift_ok = bool(np.all(np.abs(drift_z) <= drift_sigmas))

    rng = np.random.default_rng(seed)
    perturbed = []
    for name, fn in (perturbations if perturbations is not None
                     else default_perturbations(market.n)):
        Dp = _admissible(penalty, fn(D, rng))
        Up, Xp = evaluate(name, Dp)
        vp = float(Up.mean())
        sep = float(Up.std(ddof=1) / np.sqrt(P))
        combp = float(np.hypot(sep, cf_se))
        diff = Up - U_opt
        Uproc_p = utility_values(utility, Xp, sol.Y[:, :, 0])
        incp = np.diff(Uproc_p, axis=1)
        sep_inc = incp.std(axis=0, ddof=1) / np.sqrt(P)
        zp = np.where(sep_inc > 0, incp.mean(axis=0) / np.where(sep_inc > 0, sep_inc, 1.0), 0.0)
        perturbed.append(ControlResult(name, vp, sep, cf, combp, vp <= cf + 2 * combp,
                                       float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(P)),
                                       float(np.max(zp))))
    return MartingaleMethodReport(Y0, Y0_se, cf, cf_se, optimal, perturbed, drift_z, drift_ok,
                                  R, float(np.max(np.linalg.norm(D, axis=-1))), drift_sigmas, sol)
