r"""Analytic reference spectra, error metrics and spectral clustering.

Two systems have closed-form spectra:

* Ornstein--Uhlenbeck, :math:`dX = -\alpha X\,dt + \sqrt{2/\beta}\,dW`, with
  Koopman eigenvalues :math:`e^{-\alpha i \tau}` and eigenfunctions
  :math:`He_i(\sqrt{\alpha\beta}\,x)/\sqrt{i!}`;
* the quantum harmonic oscillator with energies :math:`\hbar\omega(i+\tfrac12)`
  and Hermite-function eigenstates.

Indices here are 0-based: function ``0`` is the constant (OU) or the ground
state (QHO).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from sklearn.cluster import kmeans_plusplus

from . import io
from .errors import ClusteringFailed, DegenerateFunction, InvalidShape

__all__ = [
    "AnalyticSpectrum",
    "ClusterAssignment",
    "analytic_reference",
    "central_range",
    "eigenfunction_error",
    "export_clusters",
    "hermite",
    "kmeans",
    "purity",
    "sector_labels",
    "spectral_cluster",
]

_KINDS = {"probabilists": "He", "He": "He", "physicists": "H", "H": "H"}


def hermite(kind: str, n: int, x):
    """Hermite polynomial of degree ``n`` by three-term recurrence.

    ``kind="probabilists"`` gives :math:`He_n` and ``"physicists"`` gives
    :math:`H_n`.

    >>> float(hermite("probabilists", 2, 2.0))
    3.0
    >>> float(hermite("physicists", 2, 1.0))
    2.0
    """
    try:
        k = _KINDS[kind]
    except KeyError:
        raise ValueError(f"kind must be 'probabilists' or 'physicists', got {kind!r}") from None
    if n < 0:
        raise ValueError(f"degree must be nonnegative, got {n}")
    x = np.asarray(x, dtype=np.float64)
    prev = np.ones_like(x)
    if n == 0:
        return prev
    cur = x.copy() if k == "He" else 2.0 * x
    for j in range(1, n):
        if k == "He":
            prev, cur = cur, x * cur - j * prev
        else:
            prev, cur = cur, 2.0 * x * cur - 2.0 * j * prev
    return cur


def _as_line(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        if x.shape[0] != 1:
            raise InvalidShape(f"reference functions are one-dimensional, got points of shape {x.shape}")
        x = x[0]
    return x


@dataclass(frozen=True)
class AnalyticSpectrum:
    """Closed-form eigenvalues and eigenfunctions of a reference system."""

    system: str
    params: dict
    value_fn: Callable[[int], float]
    function_fn: Callable[[int, np.ndarray], np.ndarray]

    def value(self, i: int) -> float:
        return self.value_fn(i)

    def values(self, n: int) -> np.ndarray:
        """First ``n`` eigenvalues (OU) or energies (QHO)."""
        return np.array([self.value_fn(i) for i in range(n)])

    def function(self, i: int, x) -> np.ndarray:
        """Evaluate function ``i`` at ``x`` (shape ``(k,)`` or ``(1, k)``)."""
        if i < 0:
            raise ValueError("function index must be nonnegative")
        return self.function_fn(i, _as_line(x))


def analytic_reference(system: str, **params) -> AnalyticSpectrum:
    """Reference spectrum for ``"ou"`` (``alpha, beta, tau``) or ``"qho"``
    (``omega, hbar, mass``).

    >>> analytic_reference("ou", alpha=1, beta=4, tau=0.5).values(2).round(5)
    array([1.     , 0.60653])
    """
    if system == "ou":
        alpha = float(params.get("alpha", 1.0))
        beta = float(params.get("beta", 4.0))
        tau = float(params.get("tau", 0.5))
        if alpha <= 0 or beta <= 0 or tau < 0:
            raise ValueError("ou needs alpha > 0, beta > 0 and tau >= 0")
        s = math.sqrt(alpha * beta)
        return AnalyticSpectrum(
            "ou", {"alpha": alpha, "beta": beta, "tau": tau},
            lambda i: math.exp(-alpha * i * tau),
            lambda i, x: hermite("probabilists", i, s * x) / math.sqrt(math.factorial(i)),
        )
    if system == "qho":
        omega = float(params.get("omega", 1.0))
        hbar = float(params.get("hbar", 1.0))
        mass = float(params.get("mass", 1.0))
        if omega <= 0 or hbar <= 0 or mass <= 0:
            raise ValueError("qho needs positive omega, hbar and mass")
        a = mass * omega / hbar

        def state(i, x):
            norm = (a / math.pi) ** 0.25 / math.sqrt(2.0**i * math.factorial(i))
            return norm * np.exp(-0.5 * a * x * x) * hermite("physicists", i, math.sqrt(a) * x)

        return AnalyticSpectrum("qho", {"omega": omega, "hbar": hbar, "mass": mass},
                                lambda i: hbar * omega * (i + 0.5), state)
    raise ValueError(f"no analytic reference for system {system!r}")


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------
def central_range(X, fraction: float = 0.9):
    """Mask of points inside the central ``fraction`` quantile box of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    q = (1.0 - fraction) / 2.0
    lo, hi = np.quantile(X, [q, 1.0 - q], axis=1)
    return np.all((X >= lo[:, None]) & (X <= hi[:, None]), axis=0)


def _compare(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.std() == 0.0 or b.std() == 0.0:
        raise DegenerateFunction("cannot correlate a function with zero variance")
    corr = float(np.corrcoef(a, b)[0, 1])
    a = a / np.sqrt(np.mean(a * a))
    b = b / np.sqrt(np.mean(b * b))
    c = np.mean(a * b)
    rmse = float(np.sqrt(max(0.0, np.mean((a - c * b) ** 2))))
    return corr, rmse


def eigenfunction_error(model, reference: AnalyticSpectrum, index: int, X, mask=None):
    """Correlation and scale-aligned RMSE between model and reference function ``index``.

    Both functions are normalized to unit root-mean-square on the points;
    the RMSE is taken after the optimal (signed) rescaling, so it is blind
    to the sign and normalization ambiguities of eigenfunctions.

    Returns
    -------
    (correlation, rmse)
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if mask is not None:
        X = X[:, np.asarray(mask, dtype=bool)]
    if not 0 <= index < model.n:
        raise ValueError(f"model has {model.n} functions; index {index} is out of range")
    return _compare(model.evaluate(X)[index], reference.function(index, X))


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------
@dataclass
class ClusterAssignment:
    """Result of k-means in spectral coordinates.

    ``centers`` is ``(k, n)``; ``inertia_history`` holds the inertia after
    each assignment step of the winning restart.
    """

    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    restart: int = 0

    @property
    def k(self):
        return self.centers.shape[0]

    def counts(self):
        return np.bincount(self.labels, minlength=self.k)


def _lloyd(Z, centers, max_iter, tol):
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = (np.einsum("ij,ij->i", Z, Z)[:, None] - 2.0 * Z @ centers.T
              + np.einsum("ij,ij->i", centers, centers)[None, :])
        new = np.argmin(d2, axis=1)
        inertia = float(np.sum(np.maximum(d2[np.arange(len(Z)), new], 0.0)))
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        moved = 0.0
        for j in range(centers.shape[0]):
            members = Z[labels == j]
            if len(members):
                c = members.mean(axis=0)
                moved = max(moved, float(np.sum((c - centers[j]) ** 2)))
                centers[j] = c
        if moved <= tol:
            d2 = (np.einsum("ij,ij->i", Z, Z)[:, None] - 2.0 * Z @ centers.T
                  + np.einsum("ij,ij->i", centers, centers)[None, :])
            labels = np.argmin(d2, axis=1)
            history.append(float(np.sum(np.maximum(d2[np.arange(len(Z)), labels], 0.0))))
            break
    return labels, centers, history


def kmeans(Z, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300, tol: float = 1e-12,
           n_threads: int = 1) -> ClusterAssignment:
    """k-means with k-means++ seeding; keeps the restart with the lowest inertia.

    ``Z`` holds one point per row. Restarts that end with an empty cluster
    are discarded; ties in inertia go to the lower restart index.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if Z.shape[0] < k:
        raise ClusteringFailed(f"{Z.shape[0]} points cannot form {k} clusters")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(restarts)]

    def one(r):
        centers, _ = kmeans_plusplus(Z, k, random_state=seeds[r])
        labels, centers, hist = _lloyd(Z, centers.copy(), max_iter, tol)
        if np.bincount(labels, minlength=k).min() == 0:
            return None
        return ClusterAssignment(labels, centers, hist[-1], hist, r)

    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            runs = list(pool.map(one, range(restarts)))
    else:
        runs = [one(r) for r in range(restarts)]
    runs = [r for r in runs if r is not None]
    if not runs:
        raise ClusteringFailed(f"all {restarts} k-means restarts produced empty clusters")
    return min(runs, key=lambda a: (a.inertia, a.restart))


def spectral_cluster(model, X, k: int, include_first: bool = True, seed: int = 0, restarts: int = 10,
                     n_functions: Optional[int] = None, weighted: bool = False,
                     n_threads: int = 1) -> ClusterAssignment:
    """Cluster points by their leading learned functions.

    The embedding uses functions ``0 .. n_functions - 1`` (default ``k``),
    dropping function ``0`` when ``include_first`` is false. With
    ``weighted`` each coordinate is scaled by ``|value|``.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    n_functions = k if n_functions is None else n_functions
    need = n_functions
    if model.n < need:
        raise ValueError(f"model has {model.n} functions; clustering needs {need}")
    F = model.evaluate(X)[:n_functions]
    vals = np.abs(model.values[:n_functions])
    if not include_first:
        F, vals = F[1:], vals[1:]
    if F.shape[0] == 0:
        raise ValueError("no spectral coordinates left to cluster")
    if weighted:
        F = F * vals[:, None]
    return kmeans(F.T, k, seed, restarts, n_threads=n_threads)


def purity(labels, truth) -> float:
    """Fraction of points whose cluster's majority truth label matches their own."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    total = 0
    for c in np.unique(labels):
        total += np.bincount(truth[labels == c]).max()
    return total / labels.size


def sector_labels(X, n_wells: int = 5) -> np.ndarray:
    """Index of the nearest well of ``cos(n theta) + 10 (r - 1)^2`` by angle.

    The wells sit at ``theta = pi/n + 2 pi j / n``.
    """
    X = np.asarray(X, dtype=np.float64)
    theta = np.arctan2(X[1], X[0])
    width = 2.0 * np.pi / n_wells
    return np.mod(np.round((theta - np.pi / n_wells) / width), n_wells).astype(np.int64)


def export_clusters(path, X, assignment: ClusterAssignment):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    header = ["index"] + [f"x{j}" for j in range(X.shape[0])] + ["label"]
    io.write_csv(path, header, ([p, *X[:, p], int(assignment.labels[p])] for p in range(X.shape[1])))
