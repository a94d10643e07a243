r"""Training data: SDE trajectories, lagged snapshot pairs, flows and grids.

Overdamped Langevin dynamics :math:`dX_t = -\nabla V(X_t)\,dt +
\sqrt{2\beta^{-1}}\,dW_t` are integrated with Euler--Maruyama. Built-in
potentials have compiled gradient kernels so that single long trajectories
(millions of steps) run at native speed; custom potentials fall back to a
vectorized Python loop with the same random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numba
import numpy as np

from . import io
from .errors import InsufficientData, InvalidDomain, InvalidShape, TrajectoryDiverged, UnknownSystem

__all__ = [
    "BICKLEY_CONSTANTS",
    "FlowSystem",
    "PotentialSystem",
    "SnapshotDataset",
    "bickley_flow",
    "bickley_trajectories",
    "builtin_potential",
    "euler_maruyama",
    "lagged_pairs",
    "sample_grid",
    "simulate_pairs",
]

_CHUNK = 1 << 16


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------
@dataclass
class SnapshotDataset:
    """Snapshot matrices with optional time-lagged partners.

    Attributes
    ----------
    X : (d, m) ndarray
        States at time t (or standalone samples).
    Y : (d, m) ndarray or None
        States at time t + lag_time.
    lag_time : float or None
        Present iff ``Y`` is present.
    source : dict
        System name, parameters and seed that produced the data.
    """

    X: np.ndarray
    Y: Optional[np.ndarray] = None
    lag_time: Optional[float] = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] < 1:
            raise InvalidShape(f"X must be (d, m) with m >= 1, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidShape("X has non-finite entries")
        self.X = X
        if self.Y is not None:
            Y = np.asarray(self.Y, dtype=np.float64)
            if Y.ndim == 1:
                Y = Y[None, :]
            if Y.shape != X.shape:
                raise InvalidShape(f"Y {Y.shape} must match X {X.shape}")
            if self.lag_time is None:
                raise InvalidShape("paired data needs a lag_time")
            self.Y = Y
        elif self.lag_time is not None:
            raise InvalidShape("lag_time given without Y")

    @property
    def dim(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.X.shape[1]

    @property
    def paired(self):
        return self.Y is not None

    def save(self, directory):
        """Write ``X.topd`` (and ``Y.topd``) plus a ``dataset.json`` sidecar."""
        directory = Path(directory)
        io.write_matrix(directory / "X.topd", self.X)
        if self.paired:
            io.write_matrix(directory / "Y.topd", self.Y)
        meta = {"dim": self.dim, "m": self.m, "lag_time": self.lag_time, "paired": self.paired, "source": self.source}
        io.write_json(directory / "dataset.json", meta)
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = io.read_json(directory / "dataset.json")
        X = io.read_matrix(directory / "X.topd")
        Y = io.read_matrix(directory / "Y.topd") if meta.get("paired") else None
        return cls(X, Y, meta.get("lag_time"), meta.get("source", {}))

    def to_csv(self, path_x, path_y=None):
        header = [f"x{i + 1}" for i in range(self.dim)]
        io.write_csv(path_x, header, self.X.T)
        if path_y is not None and self.paired:
            io.write_csv(path_y, header, self.Y.T)

    @classmethod
    def from_csv(cls, path_x, path_y=None, lag_time=None, source=None):
        _, X = io.read_csv(path_x)
        Y = io.read_csv(path_y)[1].T if path_y is not None else None
        return cls(X.T, Y, lag_time if Y is not None else None, source or {})


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------
_OU, _LEMON, _TRIPLE, _HARMONIC = 0, 1, 2, 3


@dataclass(frozen=True)
class PotentialSystem:
    """A potential energy with analytic gradient and an inverse temperature.

    ``V`` maps ``(d, m)`` points to ``(m,)`` energies and ``grad`` to a
    ``(d, m)`` array. ``kernel`` selects a compiled gradient for the
    Euler--Maruyama loop (``None`` for custom systems).
    """

    name: str
    dim: int
    V: Callable
    grad: Callable
    beta: float = 1.0
    params: dict = field(default_factory=dict)
    kernel: Optional[int] = None
    kernel_params: tuple = ()

    def with_beta(self, beta):
        return PotentialSystem(self.name, self.dim, self.V, self.grad, beta,
                               {**self.params, "beta": beta}, self.kernel, self.kernel_params)


def _pts(X, d):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and d == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] != d:
        raise InvalidShape(f"expected points of shape ({d}, m), got {X.shape}")
    return X


def _ou(alpha=1.0, beta=4.0, dim=1):
    if alpha <= 0:
        raise ValueError("alpha must be positive")

    def V(X):
        X = _pts(X, dim)
        return 0.5 * alpha * np.sum(X * X, axis=0)

    def grad(X):
        return alpha * _pts(X, dim)

    return PotentialSystem("ou", dim, V, grad, beta, {"alpha": alpha, "beta": beta, "dim": dim},
                           _OU, (float(alpha),))


def _lemon_slice(n_wells=5, beta=2.0):
    if n_wells < 2:
        raise ValueError("lemon_slice needs n_wells >= 2")
    n = n_wells

    def V(X):
        x, y = _pts(X, 2)
        r = np.hypot(x, y)
        return np.cos(n * np.arctan2(y, x)) + 10.0 * (r - 1.0) ** 2

    def grad(X):
        x, y = _pts(X, 2)
        r2 = x * x + y * y
        r = np.sqrt(r2)
        dth = -n * np.sin(n * np.arctan2(y, x))
        dr = 20.0 * (r - 1.0)
        return np.vstack([dr * x / r - dth * y / r2, dr * y / r + dth * x / r2])

    return PotentialSystem("lemon_slice", 2, V, grad, beta, {"n_wells": n, "beta": beta},
                           _LEMON, (float(n),))


def _triple_well(beta=2.0):
    def V(X):
        x, y = _pts(X, 2)
        return (3.0 * np.exp(-x**2 - (y - 1 / 3) ** 2) - 3.0 * np.exp(-x**2 - (y - 5 / 3) ** 2)
                - 5.0 * np.exp(-(x - 1) ** 2 - y**2) - 5.0 * np.exp(-(x + 1) ** 2 - y**2)
                + 0.2 * x**4 + 0.2 * (y - 1 / 3) ** 4)

    def grad(X):
        x, y = _pts(X, 2)
        e1 = 3.0 * np.exp(-x**2 - (y - 1 / 3) ** 2)
        e2 = -3.0 * np.exp(-x**2 - (y - 5 / 3) ** 2)
        e3 = -5.0 * np.exp(-(x - 1) ** 2 - y**2)
        e4 = -5.0 * np.exp(-(x + 1) ** 2 - y**2)
        gx = -2 * x * (e1 + e2) - 2 * (x - 1) * e3 - 2 * (x + 1) * e4 + 0.8 * x**3
        gy = -2 * (y - 1 / 3) * e1 - 2 * (y - 5 / 3) * e2 - 2 * y * (e3 + e4) + 0.8 * (y - 1 / 3) ** 3
        return np.vstack([gx, gy])

    return PotentialSystem("triple_well", 2, V, grad, beta, {"beta": beta}, _TRIPLE, ())


def _harmonic(omega=1.0, mass=1.0, dim=1):
    """Quantum harmonic oscillator potential ``m omega^2 |x|^2 / 2``."""
    k = mass * omega * omega

    def V(X):
        X = _pts(X, dim)
        return 0.5 * k * np.sum(X * X, axis=0)

    def grad(X):
        return k * _pts(X, dim)

    return PotentialSystem("qho", dim, V, grad, 1.0, {"omega": omega, "mass": mass, "dim": dim},
                           _HARMONIC, (float(k),))


_BUILTINS = {"ou": _ou, "lemon_slice": _lemon_slice, "triple_well": _triple_well, "qho": _harmonic}


def builtin_potential(name, **params) -> PotentialSystem:
    """Return one of the benchmark potentials.

    ``ou(alpha, beta, dim)``, ``lemon_slice(n_wells, beta)``,
    ``triple_well(beta)`` or ``qho(omega, mass, dim)``.
    """
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise UnknownSystem(f"unknown potential {name!r}; expected one of {sorted(_BUILTINS)}") from None
    return factory(**params)


@numba.njit(cache=True)
def _grad_kernel(kind, p, x, g):
    if kind == 0 or kind == 3:
        for i in range(x.shape[0]):
            g[i] = p[0] * x[i]
    elif kind == 1:
        n = p[0]
        r2 = x[0] * x[0] + x[1] * x[1]
        r = math.sqrt(r2)
        dth = -n * math.sin(n * math.atan2(x[1], x[0]))
        dr = 20.0 * (r - 1.0)
        g[0] = dr * x[0] / r - dth * x[1] / r2
        g[1] = dr * x[1] / r + dth * x[0] / r2
    else:
        a, b = x[0], x[1]
        e1 = 3.0 * math.exp(-a * a - (b - 1.0 / 3.0) ** 2)
        e2 = -3.0 * math.exp(-a * a - (b - 5.0 / 3.0) ** 2)
        e3 = -5.0 * math.exp(-(a - 1.0) ** 2 - b * b)
        e4 = -5.0 * math.exp(-(a + 1.0) ** 2 - b * b)
        g[0] = -2.0 * a * (e1 + e2) - 2.0 * (a - 1.0) * e3 - 2.0 * (a + 1.0) * e4 + 0.8 * a**3
        g[1] = -2.0 * (b - 1.0 / 3.0) * e1 - 2.0 * (b - 5.0 / 3.0) * e2 - 2.0 * b * (e3 + e4) + 0.8 * (b - 1.0 / 3.0) ** 3


@numba.njit(cache=True)
def _em_chunk(kind, p, x, noise, h, s, out, step0, every):
    """Advance ``x`` in place through ``noise``; returns the first bad step or -1."""
    d = x.shape[0]
    g = np.empty(d)
    for k in range(noise.shape[0]):
        _grad_kernel(kind, p, x, g)
        bad = False
        for i in range(d):
            x[i] = x[i] - h * g[i] + s * noise[k, i]
            if not math.isfinite(x[i]):
                bad = True
        step = step0 + k + 1
        if bad:
            return step
        if step % every == 0:
            j = step // every
            for i in range(d):
                out[i, j] = x[i]
    return -1


def _stream_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


def euler_maruyama(system: PotentialSystem, x0, steps: int, h: float, seed: int = 0, record_every: int = 1):
    r"""Integrate overdamped Langevin dynamics.

    Uses :math:`X_{k+1} = X_k - h \nabla V(X_k) + \sqrt{2/\beta}\,\Delta W_k`
    with :math:`\Delta W_k \sim \mathcal{N}(0, h)` per coordinate.

    Parameters
    ----------
    system : PotentialSystem
        ``beta = inf`` switches the noise off.
    x0 : (d,) or (B, d) array_like
        Initial point(s). Each gets its own RNG stream spawned from ``seed``,
        so trajectory ``b`` of a batch is independent of the batch size.
    steps : int
    h : float
    record_every : int
        Keep every ``record_every``-th state (the initial state is kept).

    Returns
    -------
    ndarray
        ``(d, steps // record_every + 1)`` for a single initial point,
        ``(B, d, steps // record_every + 1)`` for a batch.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    if steps < 0 or record_every < 1:
        raise ValueError("steps must be >= 0 and record_every >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    X0 = np.atleast_2d(x0)
    if X0.shape[1] != system.dim:
        raise InvalidShape(f"initial points must have dimension {system.dim}, got {X0.shape}")
    if not np.all(np.isfinite(X0)):
        raise InvalidShape("initial points must be finite")
    B, d = X0.shape
    s = math.sqrt(2.0 / system.beta) if np.isfinite(system.beta) else 0.0
    sqh = math.sqrt(h)
    n_rec = steps // record_every + 1
    out = np.empty((B, d, n_rec))
    out[:, :, 0] = X0
    gens = [np.random.default_rng(ss) for ss in _stream_seeds(seed, B)]
    state = X0.copy()
    compiled = system.kernel is not None
    p = np.asarray(system.kernel_params, dtype=np.float64) if compiled else None
    for start in range(0, steps, _CHUNK):
        c = min(_CHUNK, steps - start)
        noise = np.stack([g.standard_normal((c, d)) for g in gens]) * sqh
        if compiled:
            for b in range(B):
                bad = _em_chunk(system.kernel, p, state[b], noise[b], h, s, out[b], start, record_every)
                if bad >= 0:
                    raise TrajectoryDiverged(bad)
        else:
            for k in range(c):
                state = state - h * system.grad(state.T).T + s * noise[:, k, :]
                step = start + k + 1
                if not np.all(np.isfinite(state)):
                    raise TrajectoryDiverged(step)
                if step % record_every == 0:
                    out[:, :, step // record_every] = state
    return out[0] if single else out


def lagged_pairs(trajectory, lag_steps: int, stride: int = 1, h: float = 1.0, m: Optional[int] = None,
                 source: Optional[dict] = None) -> SnapshotDataset:
    """Cut a ``(d, T)`` trajectory into time-lagged pairs.

    ``X`` holds states at indices ``0, stride, 2*stride, ...`` and ``Y`` the
    states ``lag_steps`` later; only complete pairs are kept (at most ``m``).
    ``h`` is the time between stored states, so ``lag_time = lag_steps * h``.
    """
    if lag_steps < 1 or stride < 1:
        raise ValueError("lag_steps and stride must be >= 1")
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim == 1:
        traj = traj[None, :]
    T = traj.shape[1]
    idx = np.arange(0, T - lag_steps, stride)
    if m is not None:
        if len(idx) < m:
            raise InsufficientData(f"trajectory yields {len(idx)} pairs, {m} requested")
        idx = idx[:m]
    if len(idx) == 0:
        raise InsufficientData(f"trajectory of length {T} has no pairs at lag {lag_steps}")
    return SnapshotDataset(traj[:, idx], traj[:, idx + lag_steps], lag_steps * h, dict(source or {}))


def simulate_pairs(system: PotentialSystem, m: int, lag_steps: int, h: float, seed: int = 0,
                   burn_in: int = 1000, stride: Optional[int] = None, x0=None) -> SnapshotDataset:
    """Simulate one long trajectory and cut ``m`` lagged pairs from it.

    The first ``burn_in`` steps are discarded. ``stride`` defaults to
    ``lag_steps`` (each ``Y`` is the next ``X``). Only the states that end
    up in a pair are stored.
    """
    if m < 1:
        raise InsufficientData(f"m must be >= 1, got {m}")
    stride = lag_steps if stride is None else stride
    every = math.gcd(stride, lag_steps)
    if burn_in % every:
        burn_in += every - burn_in % every
    steps = burn_in + (m - 1) * stride + lag_steps
    if x0 is None:
        x0 = np.zeros(system.dim)
        if system.name == "lemon_slice":
            x0[0] = 1.0
    traj = euler_maruyama(system, x0, steps, h, seed, record_every=every)[:, burn_in // every:]
    source = {"system": system.name, "params": dict(system.params), "seed": seed, "h": h,
              "lag_steps": lag_steps, "stride": stride, "burn_in": burn_in}
    return lagged_pairs(traj, lag_steps // every, stride // every, h * every, m, source)


# ---------------------------------------------------------------------------
# Bickley jet
# ---------------------------------------------------------------------------
_U0 = 5.4138
BICKLEY_CONSTANTS = {
    "U0": _U0,
    "L0": 1.77,
    # 20 / pi makes the field exactly 20-periodic in x
    "r0": 20.0 / math.pi,
    "c": (0.1446 * _U0, 0.205 * _U0, 0.461 * _U0),
    "eps": (0.075, 0.15, 0.3),
    "k_mult": (2.0, 4.0, 6.0),
}


@numba.njit(cache=True)
def _bickley_velocity(x, y, t, U0, L0, c, eps, k):
    sech2 = 1.0 / math.cosh(y / L0) ** 2
    th = math.tanh(y / L0)
    S = 0.0
    Sx = 0.0
    for n in range(3):
        ph = k[n] * (x - c[n] * t)
        S += eps[n] * math.cos(ph)
        Sx -= eps[n] * k[n] * math.sin(ph)
    return U0 * sech2 * (1.0 + 2.0 * th * S), U0 * L0 * sech2 * Sx


@numba.njit(cache=True)
def _bickley_rk4(X, t0, n_steps, h, U0, L0, c, eps, k):
    m = X.shape[1]
    out = np.empty_like(X)
    for p in range(m):
        x = X[0, p]
        y = X[1, p]
        t = t0
        for _ in range(n_steps):
            u1, v1 = _bickley_velocity(x, y, t, U0, L0, c, eps, k)
            u2, v2 = _bickley_velocity(x + 0.5 * h * u1, y + 0.5 * h * v1, t + 0.5 * h, U0, L0, c, eps, k)
            u3, v3 = _bickley_velocity(x + 0.5 * h * u2, y + 0.5 * h * v2, t + 0.5 * h, U0, L0, c, eps, k)
            u4, v4 = _bickley_velocity(x + h * u3, y + h * v3, t + h, U0, L0, c, eps, k)
            x += h / 6.0 * (u1 + 2.0 * u2 + 2.0 * u3 + u4)
            y += h / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
            t += h
        out[0, p] = x
        out[1, p] = y
    return out


@dataclass(frozen=True)
class FlowSystem:
    r"""Planar non-autonomous flow given by a stream function.

    ``velocity(x, y, t)`` returns :math:`(-\partial_y\Phi, \partial_x\Phi)`.
    """

    name: str
    velocity: Callable
    stream: Callable
    domain: tuple
    periodic: tuple
    constants: dict = field(default_factory=dict)


def bickley_flow(**overrides) -> FlowSystem:
    r"""Bickley jet with stream function

    .. math::

        \Phi = -U_0 L_0 \tanh(y/L_0)
               + U_0 L_0 \operatorname{sech}^2(y/L_0)
                 \sum_{n=1}^{3} \varepsilon_n \cos(k_n (x - c_n t)),
        \qquad k_n = \texttt{k\_mult}_n / r_0 .
    """
    const = {**BICKLEY_CONSTANTS, **overrides}
    U0, L0 = const["U0"], const["L0"]
    c = np.asarray(const["c"], dtype=np.float64)
    eps = np.asarray(const["eps"], dtype=np.float64)
    k = np.asarray(const["k_mult"], dtype=np.float64) / const["r0"]

    def stream(x, y, t):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        waves = sum(eps[n] * np.cos(k[n] * (x - c[n] * t)) for n in range(3))
        sech2 = 1.0 / np.cosh(y / L0) ** 2
        return -U0 * L0 * np.tanh(y / L0) + U0 * L0 * sech2 * waves

    def velocity(x, y, t):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        sech2 = 1.0 / np.cosh(y / L0) ** 2
        th = np.tanh(y / L0)
        S = sum(eps[n] * np.cos(k[n] * (x - c[n] * t)) for n in range(3))
        Sx = -sum(eps[n] * k[n] * np.sin(k[n] * (x - c[n] * t)) for n in range(3))
        return U0 * sech2 * (1.0 + 2.0 * th * S), U0 * L0 * sech2 * Sx

    period = 20.0
    const = {**const, "k": k.tolist(), "period": period}
    return FlowSystem("bickley", velocity, stream, ((0.0, period), (-4.0, 4.0)), (True, False), const)


def bickley_trajectories(m: int, t0: float = 0.0, t1: float = 40.0, h: float = 0.01, seed: int = 0,
                         flow: Optional[FlowSystem] = None) -> SnapshotDataset:
    """Advect ``m`` uniformly sampled particles from ``t0`` to ``t1`` with RK4.

    Initial points are uniform on the flow's domain; final ``x`` coordinates
    are wrapped onto ``[0, period)``.
    """
    if m < 1:
        raise InsufficientData(f"m must be >= 1, got {m}")
    if t1 < t0:
        raise ValueError(f"t1 ({t1}) must not precede t0 ({t0})")
    if h <= 0:
        raise ValueError("integrator step must be positive")
    flow = flow or bickley_flow()
    (x_lo, x_hi), (y_lo, y_hi) = flow.domain
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.uniform(x_lo, x_hi, m), rng.uniform(y_lo, y_hi, m)])
    source = {"system": flow.name, "params": {"t0": t0, "t1": t1, "h": h, **flow.constants}, "seed": seed}
    if t1 == t0:
        return SnapshotDataset(X, X.copy(), 0.0, source)
    n_steps = max(1, int(round((t1 - t0) / h)))
    h_eff = (t1 - t0) / n_steps
    const = flow.constants
    Y = _bickley_rk4(X, float(t0), n_steps, h_eff, float(const["U0"]), float(const["L0"]),
                     np.asarray(const["c"], dtype=np.float64), np.asarray(const["eps"], dtype=np.float64),
                     np.asarray(const["k"], dtype=np.float64))
    bad = ~np.all(np.isfinite(Y), axis=0)
    if bad.any():
        raise TrajectoryDiverged(n_steps, f"{bad.sum()} particles left the finite range")
    Y[0] = np.mod(Y[0], const["period"])
    return SnapshotDataset(X, Y, float(t1 - t0), source)


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------
def sample_grid(domain: Sequence[Sequence[float]], m: int, mode: str = "uniform_random", seed: int = 0):
    """Sample points in an axis-aligned box (no lagged partner).

    Parameters
    ----------
    domain : sequence of (lo, hi)
        One interval per dimension.
    m : int
        Number of points. For ``regular_grid`` in ``d`` dimensions ``m`` must
        be a perfect ``d``-th power.
    mode : {"uniform_random", "regular_grid"}
    """
    box = np.asarray(domain, dtype=np.float64)
    if box.ndim == 1:
        box = box[None, :]
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 1:
        raise InvalidDomain(f"domain must be a sequence of (lo, hi) pairs, got {domain!r}")
    if np.any(~np.isfinite(box)) or np.any(box[:, 1] <= box[:, 0]):
        raise InvalidDomain(f"empty or unbounded box {box.tolist()}")
    if m < 1:
        raise InsufficientData(f"m must be >= 1, got {m}")
    d = box.shape[0]
    if mode == "uniform_random":
        rng = np.random.default_rng(seed)
        X = box[:, :1] + (box[:, 1:] - box[:, :1]) * rng.random((d, m))
    elif mode == "regular_grid":
        n = int(round(m ** (1.0 / d)))
        if n**d != m:
            raise InvalidDomain(f"regular_grid needs m to be a perfect {d}-th power, got {m}")
        axes = [np.linspace(lo, hi, n) for lo, hi in box]
        X = np.vstack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")])
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    source = {"system": "grid", "params": {"domain": box.tolist(), "mode": mode}, "seed": seed}
    return SnapshotDataset(X, None, None, source)
