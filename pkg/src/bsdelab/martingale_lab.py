"""Martingale models, seeded path ensembles, clock/volatility and path utilities.

Two models are built in:

* ``StandardBM(n)``: M is an n-dimensional standard Brownian motion, so
  ``[M,M]_t = t I``, the clock is ``A_t = n t`` and ``m = I / sqrt(n)``.
* ``StoppedScaledBM(T, delta)``: M is zero until ``T - delta``, then
  ``sqrt(2) (W - W_{T-delta})`` for a planar Brownian motion W, stopped when
  ``|M|`` reaches 1.  ``m = I / sqrt(2)`` and the clock grows at rate 4 while
  active and unstopped, so ``A_T <= 4 delta``.

Noise comes from a single Philox counter stream keyed by the seed; path ``i``
owns the counter block ``[i N n, (i+1) N n)``, so it does not depend on how
many other paths are drawn.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError, InvalidInputError

_BARRIER_W = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise InvalidInputError("a time grid needs at least two instants")
        if t[0] != 0.0:
            raise InvalidInputError("time grid must start at 0")
        if not np.all(np.diff(t) > 0):
            raise InvalidInputError("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 1 or T <= 0:
            raise InvalidInputError("uniform grid needs T > 0 and N >= 1")
        return cls(np.linspace(0.0, T, N + 1))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > atol * max(1.0, self.T):
            raise ConfigurationError(f"instant {t} is not a grid point")
        return j

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


@dataclass(frozen=True)
class StandardBM:
    n: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("dimension n must be >= 1")

    @property
    def dim(self) -> int:
        return self.n

    def volatility(self) -> np.ndarray:
        return np.eye(self.n) / np.sqrt(self.n)

    def clock_bound(self, grid: TimeGrid) -> float:
        return self.n * grid.T

    def validate(self, grid: TimeGrid):
        pass


@dataclass(frozen=True)
class StoppedScaledBM:
    T: float
    delta: float

    barrier = 1.0  # on |M|; equals 1/sqrt(2) on the underlying W

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigurationError("activation window delta must be positive")
        if self.delta > self.T:
            raise ConfigurationError(f"delta={self.delta} exceeds horizon T={self.T}")

    @property
    def dim(self) -> int:
        return 2

    def volatility(self) -> np.ndarray:
        return np.eye(2) / np.sqrt(2.0)

    def clock_bound(self, grid: Optional[TimeGrid] = None) -> float:
        return 4.0 * self.delta

    def validate(self, grid: TimeGrid):
        if abs(grid.T - self.T) > 1e-12 * max(1.0, self.T):
            raise ConfigurationError("grid horizon does not match model horizon T")

    def active_dt(self, grid: TimeGrid) -> np.ndarray:
        """Length of each grid step lying inside the activation window."""
        t0 = self.T - self.delta
        lo = np.maximum(grid.times[:-1], t0)
        return np.clip(grid.times[1:] - lo, 0.0, None)


MartingaleModel = Union[StandardBM, StoppedScaledBM]


@dataclass(frozen=True, eq=False)
class MartingaleEnsemble:
    model: MartingaleModel
    grid: TimeGrid
    values: np.ndarray          # P x (N+1) x n
    dA: np.ndarray              # P x N clock increments
    m_steps: np.ndarray         # N x n x n
    seed: int
    free_increments: np.ndarray = field(repr=False)  # unstopped noise increments, P x N x n
    stop_index: Optional[np.ndarray] = None          # first node at the barrier, -1 if never
    bump_spec: Optional[tuple] = None

    @property
    def P(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def n(self) -> int:
        return self.values.shape[2]

    @property
    def K(self) -> float:
        return self.model.clock_bound(self.grid)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    @property
    def clockA(self) -> np.ndarray:
        out = np.zeros((self.P, self.N + 1))
        np.cumsum(self.dA, axis=1, out=out[:, 1:])
        return out

    def same_noise(self, other: "MartingaleEnsemble") -> bool:
        return (self.model == other.model and self.grid == other.grid
                and self.seed == other.seed and self.P == other.P)


def standard_normals(seed: int, P: int, N: int, n: int, first_path: int = 0,
                     chunk_paths: int = 16384) -> np.ndarray:
    """Counter-addressed standard normals, shape P x N x n.

    Path ``i`` always consumes the same block of the Philox stream, so the
    draws for a path are independent of P and of ``first_path``.
    """
    per_path = N * n
    out = np.empty((P, N, n))
    flat = out.reshape(P, per_path)
    for start in range(0, P, chunk_paths):
        stop = min(P, start + chunk_paths)
        bg = np.random.Philox(key=int(seed))
        # one Philox counter step yields four raw draws
        off = (first_path + start) * per_path
        bg.advance(off // 4)
        if off % 4:
            bg.random_raw(off % 4)
        raw = bg.random_raw((stop - start) * per_path)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        flat[start:stop] = ndtri(u).reshape(stop - start, per_path)
    return out


def _assemble(model, grid, free_inc, bump=None):
    """Build path values, clock increments and stopping indices from noise."""
    P, N, n = free_inc.shape
    X = np.zeros((P, N + 1, n))
    np.cumsum(free_inc, axis=1, out=X[:, 1:])
    if bump is not None:
        u, e, h = bump
        X[:, u:] += h * np.asarray(e, dtype=float)
    if isinstance(model, StandardBM):
        dA = np.broadcast_to(model.n * grid.dt, (P, N)).copy()
        return X, dA, None
    act = model.active_dt(grid)
    vals = X
    stop = np.full(P, -1, dtype=np.int64)
    stopped = np.zeros(P, dtype=bool)
    for j in range(N + 1):
        if stopped.any():
            vals[stopped, j] = vals[stopped, j - 1]
        r = np.linalg.norm(vals[:, j], axis=1)
        hit = ~stopped & (r >= model.barrier)
        if hit.any():
            vals[hit, j] /= r[hit, None]
            stop[hit] = j
            stopped |= hit
    node = np.arange(N)
    running = (stop[:, None] < 0) | (stop[:, None] > node[None, :])
    dA = np.where(running, 4.0 * act[None, :], 0.0)
    return vals, dA, stop


def _free_increments(model, grid, normals):
    if isinstance(model, StandardBM):
        return normals * np.sqrt(grid.dt)[None, :, None]
    act = model.active_dt(grid)
    return normals * np.sqrt(2.0 * act)[None, :, None]


def simulate(model: MartingaleModel, grid: TimeGrid, P: int, seed: int) -> MartingaleEnsemble:
    if P < 1:
        raise InvalidInputError("path count P must be >= 1")
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(np.asarray(grid, dtype=float))
    model.validate(grid)
    normals = standard_normals(seed, P, grid.N, model.dim)
    free = _free_increments(model, grid, normals)
    del normals
    vals, dA, stop = _assemble(model, grid, free)
    m = np.broadcast_to(model.volatility(), (grid.N, model.dim, model.dim)).copy()
    return MartingaleEnsemble(model, grid, vals, dA, m, int(seed), free, stop)


def clock_and_volatility(model: MartingaleModel, grid: TimeGrid, path: np.ndarray):
    """Clock increments and volatility factors along one path (N+1 x n).

    For the stopped model the step on which the path first sits at the barrier
    (at its left node) and every later step carry no clock.
    """
    path = np.asarray(path, dtype=float)
    N = grid.N
    m = np.broadcast_to(model.volatility(), (N, model.dim, model.dim)).copy()
    if isinstance(model, StandardBM):
        return model.n * grid.dt, m
    act = model.active_dt(grid)
    r = np.linalg.norm(path, axis=-1)
    at_barrier = np.flatnonzero(r[:N] >= model.barrier - 1e-12)
    dA = 4.0 * act
    if at_barrier.size:
        dA = dA.copy()
        dA[at_barrier[0]:] = 0.0
    return dA, m


def bump(path: np.ndarray, u_index: int, e, h: float) -> np.ndarray:
    """Return ``path + h e 1_{[t_u, T]}`` (path may be N+1 x n or P x N+1 x n)."""
    e = np.asarray(e, dtype=float).ravel()
    if abs(np.linalg.norm(e) - 1.0) > 1e-12:
        raise InvalidInputError("bump direction must be a unit vector")
    out = np.array(path, dtype=float, copy=True)
    if out.ndim == 2:
        out[u_index:] += h * e
    else:
        out[:, u_index:] += h * e
    return out


def bump_ensemble(ens: MartingaleEnsemble, u_index: int, e, h: float) -> MartingaleEnsemble:
    """Bumped ensemble sharing the base noise; stopping is recomputed on the bumped paths."""
    e = np.asarray(e, dtype=float).ravel()
    if abs(np.linalg.norm(e) - 1.0) > 1e-12:
        raise InvalidInputError("bump direction must be a unit vector")
    if not 0 <= u_index <= ens.N:
        raise InvalidInputError(f"bump index {u_index} outside grid")
    if isinstance(ens.model, StandardBM):
        vals = bump(ens.values, u_index, e, h)
        return MartingaleEnsemble(ens.model, ens.grid, vals, ens.dA, ens.m_steps, ens.seed,
                                  ens.free_increments, None, (u_index, e, h))
    vals, dA, stop = _assemble(ens.model, ens.grid, ens.free_increments, (u_index, e, h))
    return MartingaleEnsemble(ens.model, ens.grid, vals, dA, ens.m_steps, ens.seed,
                              ens.free_increments, stop, (u_index, e, h))


def partition_indices(grid: TimeGrid, k: Union[int, Sequence[float]]) -> np.ndarray:
    """Grid indices of the partition points t_0^k < ... < t_k^k."""
    if np.isscalar(k):
        if int(k) < 1:
            raise InvalidInputError("partition size k must be >= 1")
        pts = np.linspace(0.0, grid.T, int(k) + 1)
    else:
        pts = np.asarray(k, dtype=float)
    idx = np.searchsorted(grid.times, pts)
    idx = np.clip(idx, 0, grid.N)
    lo = np.clip(idx - 1, 0, grid.N)
    pick = np.where(np.abs(grid.times[lo] - pts) < np.abs(grid.times[idx] - pts), lo, idx)
    if np.any(np.abs(grid.times[pick] - pts) > 1e-9 * max(1.0, grid.T)):
        raise ConfigurationError("partition points are not aligned with the time grid")
    return pick


def grid_restrict(path: np.ndarray, grid: TimeGrid, k) -> np.ndarray:
    """Piecewise-constant path sum_i (gamma(t_i) - gamma(t_{i-1})) 1_{[t_i, T]} on the grid.

    At a grid instant t the value is gamma(t_j) - gamma(0) with t_j the last
    partition point <= t.
    """
    path = np.asarray(path, dtype=float)
    idx = partition_indices(grid, k)
    last = np.searchsorted(grid.times[idx], grid.times, side="right") - 1
    src = idx[last]
    if path.ndim == 2:
        return path[src] - path[0]
    return path[:, src] - path[:, :1]


def export_csv(ens: MartingaleEnsemble, target, max_paths: Optional[int] = None):
    """One row per (path, time) node: path, time, M components, cumulative A."""
    P = ens.P if max_paths is None else min(ens.P, max_paths)
    N1 = ens.N + 1
    A = ens.clockA[:P]
    pid = np.repeat(np.arange(P), N1)
    t = np.tile(ens.grid.times, P)
    cols = [pid, t] + [ens.values[:P, :, j].ravel() for j in range(ens.n)] + [A.ravel()]
    header = ",".join(["path", "time"] + [f"M{j + 1}" for j in range(ens.n)] + ["A"])
    data = np.column_stack(cols)
    fmt = ["%d"] + ["%.17g"] * (data.shape[1] - 1)
    return _savetxt(target, data, fmt, header)


def _savetxt(target, data, fmt, header):
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, "w", newline="\n") as fh:
            np.savetxt(fh, data, fmt=fmt, delimiter=",", header=header, comments="", newline="\n")
        return target
    np.savetxt(target, data, fmt=fmt, delimiter=",", header=header, comments="", newline="\n")
    return target


def _model_dict(model):
    if isinstance(model, StandardBM):
        return {"kind": "StandardBM", "n": model.n}
    return {"kind": "StoppedScaledBM", "T": model.T, "delta": model.delta}


def model_from_dict(d) -> MartingaleModel:
    kind = d.get("kind")
    if kind == "StandardBM":
        return StandardBM(int(d.get("n", 1)))
    if kind == "StoppedScaledBM":
        return StoppedScaledBM(float(d["T"]), float(d["delta"]))
    raise ConfigurationError(f"unknown model kind {kind!r}")


def save_ensemble(ens: MartingaleEnsemble, target):
    meta = {"model": _model_dict(ens.model), "seed": ens.seed}
    arrays = dict(times=ens.grid.times, values=ens.values, dA=ens.dA, m_steps=ens.m_steps,
                  free_increments=ens.free_increments,
                  meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
    if ens.stop_index is not None:
        arrays["stop_index"] = ens.stop_index
    np.savez_compressed(target, **arrays)


def load_ensemble(source) -> MartingaleEnsemble:
    with np.load(source) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        stop = z["stop_index"] if "stop_index" in z.files else None
        return MartingaleEnsemble(model_from_dict(meta["model"]), TimeGrid(z["times"]),
                                  z["values"], z["dA"], z["m_steps"], int(meta["seed"]),
                                  z["free_increments"], stop)
