r"""Operator learning on random features.

With :math:`\Psi_0 = R(X)` and :math:`\Psi_1 = R(Y)` (Koopman) or
:math:`\Psi_1 = (HR)(X)` (Schrödinger), the estimators

.. math::

    \hat C_{00} = \tfrac1m \Psi_0\Psi_0^\top,\quad
    \hat C_{01} = \tfrac1m \Psi_0\Psi_1^\top,\quad
    \hat C_{11} = \tfrac1m \Psi_1\Psi_1^\top

lead to closed-form output layers:

* eigenfunctions: :math:`\hat C_{01} W = \hat C_{00} W \Lambda`;
* singular functions: :math:`\hat C_{00}^{+}\hat C_{01}\hat C_{11}^{+}\hat C_{10} W = W\Lambda^2`;
* Schrödinger states: the same pencil as eigenfunctions, smallest first.

:func:`fit_iterative_basis` instead trains ``n`` output neurons
:math:`\psi = \sigma(W R(x))` by gradient ascent on
:math:`\operatorname{tr}(\hat C_{00}(W)^{+}\hat C_{01}(W))`.
"""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg as sla

from .dynamics import PotentialSystem, SnapshotDataset
from .errors import DivergedTraining, FormatError, InvalidShape, ModeMismatch
from .features import Activation, RandomFeatureMap
from .linalg import (
    DEFAULT_TOL,
    align_signs,
    regularized_pinv,
    solve_generalized_sym,
    solve_nonsym_product,
    symmetrize,
    whitener,
)

__all__ = [
    "MODES",
    "CovarianceSet",
    "SpectralModel",
    "TrainedBasisModel",
    "estimate_covariances",
    "evaluate_functions",
    "fit_eigen",
    "fit_iterative_basis",
    "fit_schrodinger",
    "fit_singular",
    "ridge_readout",
    "ridge_solve",
    "trace_objective",
]

log = logging.getLogger(__name__)

MODES = ("koopman_eigen", "singular", "schrodinger")
_SPM_MAGIC = b"SPM1"


@dataclass(frozen=True)
class CovarianceSet:
    """Empirical (1/m-scaled) covariance matrices of the feature data."""

    C00: np.ndarray
    C01: np.ndarray
    C10: np.ndarray
    C11: np.ndarray
    m: int
    target: str = "koopman"

    @property
    def feature_dim(self):
        return self.C00.shape[0]


def _potential_fn(potential):
    if potential is None:
        raise ModeMismatch("the schrodinger target needs a potential")
    if isinstance(potential, PotentialSystem):
        return potential.V
    return potential


def estimate_covariances(
    rfm: RandomFeatureMap,
    data: SnapshotDataset,
    target: str = "koopman",
    potential=None,
    hbar: float = 1.0,
    mass: float = 1.0,
    chunk_size: int = 4096,
    n_threads: int = 1,
    timings: Optional[dict] = None,
) -> CovarianceSet:
    """Accumulate the covariance matrices over column chunks.

    Chunks are featurized independently (in parallel when ``n_threads > 1``)
    and their partial sums are combined in chunk order, so the result does
    not depend on the thread count.

    Parameters
    ----------
    target : {"koopman", "schrodinger"}
        Koopman needs paired data, Schrödinger needs unpaired samples and a
        ``potential`` (a :class:`PotentialSystem` or a callable on ``(d, m)``).
    timings : dict, optional
        Receives accumulated ``"featurize"`` and ``"covariances"`` seconds.
    """
    if target == "koopman":
        if not data.paired:
            raise ModeMismatch("the koopman target needs paired (X, Y) data")
    elif target == "schrodinger":
        if data.paired:
            raise ModeMismatch("the schrodinger target expects unpaired samples, got a paired dataset")
        V = _potential_fn(potential)
    else:
        raise ValueError(f"unknown target {target!r}")
    if data.dim != rfm.input_dim:
        raise InvalidShape(f"data dimension {data.dim} does not match feature map input {rfm.input_dim}")
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")

    m = data.m
    bounds = [(a, min(a + chunk_size, m)) for a in range(0, m, chunk_size)]

    def partial(ab):
        a, b = ab
        t0 = time.perf_counter()
        P0 = rfm.evaluate(data.X[:, a:b])
        if target == "koopman":
            P1 = rfm.evaluate(data.Y[:, a:b])
        else:
            P1 = rfm.evaluate_hamiltonian(data.X[:, a:b], V, hbar, mass)
        t1 = time.perf_counter()
        sums = (P0 @ P0.T, P0 @ P1.T, P1 @ P1.T)
        return sums, t1 - t0, time.perf_counter() - t1

    if n_threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(partial, bounds))
    else:
        parts = [partial(ab) for ab in bounds]

    S00, S01, S11 = (np.array(x, copy=True) for x in parts[0][0])
    for sums, _, _ in parts[1:]:
        S00 += sums[0]
        S01 += sums[1]
        S11 += sums[2]
    if timings is not None:
        timings["featurize"] = timings.get("featurize", 0.0) + sum(p[1] for p in parts)
        timings["covariances"] = timings.get("covariances", 0.0) + sum(p[2] for p in parts)
    C00 = symmetrize(S00 / m)
    C01 = S01 / m
    C11 = symmetrize(S11 / m)
    return CovarianceSet(C00, C01, C01.T.copy(), C11, m, target)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------
@dataclass
class SpectralModel:
    """Learned eigen-, singular or Schrödinger functions.

    Function ``i`` is ``weights[:, i] @ F(x)`` where ``F(x) = R(x)`` or, for
    models produced by the iterative trainer, ``F(x) = act(basis_weights @
    R(x))``.
    """

    rfm: RandomFeatureMap
    weights: np.ndarray
    values: np.ndarray
    mode: str
    companion: Optional[np.ndarray] = None
    tol: float = DEFAULT_TOL
    symmetrize: bool = True
    basis_weights: Optional[np.ndarray] = None
    basis_activation: Optional[Activation] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != self.values.shape[0]:
            raise InvalidShape(f"weights {self.weights.shape} do not match {self.values.shape[0]} values")

    @property
    def n(self):
        return self.values.shape[0]

    def basis(self, X):
        F = self.rfm.evaluate(X)
        if self.basis_weights is not None:
            F = self.basis_activation.value(self.basis_weights @ F)
        return F

    def evaluate(self, X):
        """Evaluate all functions at the columns of ``X``; returns ``(n, k)``."""
        return self.weights.T @ self.basis(X)

    def evaluate_left(self, X):
        """Left singular functions (singular mode only)."""
        if self.companion is None:
            raise ModeMismatch("this model has no left singular functions")
        return self.companion.T @ self.basis(X)

    # serialization -----------------------------------------------------------
    def to_bytes(self):
        flags = (self.companion is not None) | (bool(self.symmetrize) << 1) | ((self.basis_weights is not None) << 2)
        N, n = self.weights.shape
        out = [self.rfm.to_bytes(),
               struct.pack("<4sBBxxIId", _SPM_MAGIC, MODES.index(self.mode), flags, n, N, self.tol),
               self.values.astype("<f8").tobytes(),
               np.ascontiguousarray(self.weights).astype("<f8").tobytes()]
        if self.companion is not None:
            out.append(np.ascontiguousarray(self.companion).astype("<f8").tobytes())
        if self.basis_weights is not None:
            out.append(struct.pack("<Bxxx", self.basis_activation.id))
            out.append(np.ascontiguousarray(self.basis_weights).astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        rfm, off = RandomFeatureMap.from_bytes(buf)
        head = struct.Struct("<4sBBxxIId")
        try:
            magic, mode_id, flags, n, N, tol = head.unpack_from(buf, off)
        except struct.error as exc:
            raise FormatError("truncated SPM1 header") from exc
        if magic != _SPM_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_SPM_MAGIC!r}")
        off += head.size

        def take(count):
            nonlocal off
            if len(buf) - off < 8 * count:
                raise FormatError("truncated SPM1 payload")
            a = np.frombuffer(buf, "<f8", count, off).astype(np.float64)
            off += 8 * count
            return a

        values = take(n)
        W = take(N * n).reshape(N, n)
        W2 = take(N * n).reshape(N, n) if flags & 1 else None
        basis = act = None
        if flags & 4:
            (act_id,) = struct.unpack_from("<Bxxx", buf, off)
            off += 4
            act = Activation(Activation.KINDS[act_id])
            basis = take(N * rfm.output_dim).reshape(N, rfm.output_dim)
        return cls(rfm, W, values, MODES[mode_id], W2, tol, bool(flags & 2), basis, act)

    def save(self, path):
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def evaluate_functions(model: SpectralModel, X):
    return model.evaluate(X)


# ---------------------------------------------------------------------------
# closed-form solvers
# ---------------------------------------------------------------------------
def _check_n(n, N):
    if not 1 <= n <= N:
        raise ValueError(f"n must lie in [1, {N}], got {n}")


def _solve_unsymmetrized(C01, C00, n, tol, order):
    # diagnostic path: eigenvalues of the whitened, non-symmetric matrix
    L = whitener(C00, tol)
    lam, V = np.linalg.eig(L.T @ C01 @ L)
    if np.abs(lam.imag).max(initial=0.0) > 1e-8 * max(np.abs(lam).max(), 1.0):
        log.warning("unsymmetrized estimator has complex eigenvalues; reporting real parts")
    idx = np.argsort(-lam.real if order == "descending" else lam.real, kind="stable")[:n]
    W = L @ V[:, idx].real
    W /= np.sqrt(np.einsum("ij,ij->j", W, C00 @ W))
    return lam.real[idx], align_signs(W)


def fit_eigen(rfm: RandomFeatureMap, data: SnapshotDataset, n: int, tol: float = DEFAULT_TOL,
              symmetrize_c01: bool = True, covariances: Optional[CovarianceSet] = None, **cov_kw) -> SpectralModel:
    """Leading Koopman eigenvalues and eigenfunctions (closed form).

    ``C01`` is replaced by ``(C01 + C10) / 2`` unless ``symmetrize_c01`` is
    false; the unsymmetrized path is a diagnostic.
    """
    cov = covariances or estimate_covariances(rfm, data, "koopman", **cov_kw)
    _check_n(n, cov.feature_dim)
    if symmetrize_c01:
        sol = solve_generalized_sym(symmetrize(cov.C01), cov.C00, n, "descending", tol)
        values, W = sol.values, sol.vectors
    else:
        values, W = _solve_unsymmetrized(cov.C01, cov.C00, n, tol, "descending")
    return SpectralModel(rfm, W, values, "koopman_eigen", None, tol, symmetrize_c01)


def fit_singular(rfm: RandomFeatureMap, data: SnapshotDataset, n: int, tol: float = DEFAULT_TOL,
                 covariances: Optional[CovarianceSet] = None, **cov_kw) -> SpectralModel:
    """Leading singular values with right (``weights``) and left
    (``companion``) singular functions."""
    cov = covariances or estimate_covariances(rfm, data, "koopman", **cov_kw)
    _check_n(n, cov.feature_dim)
    sol = solve_nonsym_product(cov.C00, cov.C01, cov.C11, cov.C10, n, tol)
    return SpectralModel(rfm, sol.vectors, sol.values, "singular", sol.companion, tol, False)


def fit_schrodinger(rfm: RandomFeatureMap, data: SnapshotDataset, n: int, potential,
                    hbar: float = 1.0, mass: float = 1.0, tol: float = DEFAULT_TOL,
                    symmetrize_c01: bool = True, covariances: Optional[CovarianceSet] = None,
                    **cov_kw) -> SpectralModel:
    """Lowest energies and states of ``H = -hbar^2/(2 mass) Laplacian + V``."""
    cov = covariances or estimate_covariances(rfm, data, "schrodinger", potential, hbar, mass, **cov_kw)
    _check_n(n, cov.feature_dim)
    if symmetrize_c01:
        sol = solve_generalized_sym(symmetrize(cov.C01), cov.C00, n, "ascending", tol)
        values, W = sol.values, sol.vectors
    else:
        values, W = _solve_unsymmetrized(cov.C01, cov.C00, n, tol, "ascending")
    return SpectralModel(rfm, W, values, "schrodinger", None, tol, symmetrize_c01)


# ---------------------------------------------------------------------------
# iterative trainer
# ---------------------------------------------------------------------------
def _trace_loss(W, R0, R1, act, tol):
    Z0 = W @ R0
    Z1 = W @ R1
    P0 = act.value(Z0)
    P1 = act.value(Z1)
    m = R0.shape[1]
    C00 = symmetrize(P0 @ P0.T / m)
    C01 = P0 @ P1.T / m
    try:
        A = regularized_pinv(C00, tol)
    except Exception:
        return np.nan, None
    return float(np.trace(A @ C01)), (Z0, Z1, P0, P1, A, C01)


def trace_objective(W, R0, R1, activation="tanh", tol=DEFAULT_TOL, gradient=True):
    r"""Trace loss :math:`\operatorname{tr}(C_{00}(W)^{+} C_{01}(W))` and its gradient.

    Parameters
    ----------
    W : (n, N) ndarray
        Output-layer weights.
    R0, R1 : (N, m) ndarray
        Random features of ``X`` and ``Y``.

    Returns
    -------
    loss : float
    grad : (n, N) ndarray or None

    Notes
    -----
    With :math:`A = C_{00}^{+}` and :math:`B = A C_{01} A`,

    .. math::

        \partial L / \partial \Psi_0 = \tfrac1m\,(A\Psi_1 - (B + B^\top)\Psi_0),\qquad
        \partial L / \partial \Psi_1 = \tfrac1m\,A\Psi_0,

    which is pushed through :math:`\Psi = \sigma(W R)` by the chain rule.
    The formula is exact where :math:`C_{00}(W)` has full rank.
    """
    act = Activation(activation) if isinstance(activation, str) else activation
    loss, cache = _trace_loss(W, R0, R1, act, tol)
    if not gradient:
        return loss
    if cache is None:
        return loss, None
    Z0, Z1, P0, P1, A, C01 = cache
    m = R0.shape[1]
    B = A @ C01 @ A
    G0 = (A @ P1 - (B + B.T) @ P0) / m
    G1 = (A @ P0) / m
    grad = (G0 * act.d1(Z0)) @ R0.T + (G1 * act.d1(Z1)) @ R1.T
    return loss, grad


@dataclass
class TrainedBasisModel:
    """Output of :func:`fit_iterative_basis`."""

    rfm: RandomFeatureMap
    weights: np.ndarray
    loss_history: list
    model: SpectralModel
    step_sizes: list = field(default_factory=list)
    activation: str = "tanh"


def fit_iterative_basis(
    rfm: RandomFeatureMap,
    data: SnapshotDataset,
    n: int,
    epochs: int = 100,
    step_size: float = 1.0,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    output_activation: str = "tanh",
    optimizer: str = "gd",
    armijo: float = 1e-4,
    max_backtracks: int = 40,
    growth: float = 2.0,
) -> TrainedBasisModel:
    """Train ``n`` output neurons by gradient ascent on the trace loss.

    Each epoch takes one full-batch step with backtracking (Armijo) line
    search, so the recorded loss never decreases. ``step_size`` is the
    initial trial step; it grows by ``growth`` after every accepted step.
    ``optimizer="preconditioned"`` scales the gradient by the pseudoinverse
    of the feature Gram matrix.

    ``loss_history`` has ``epochs + 1`` entries, starting with the loss at
    initialization. The returned ``model`` diagonalizes ``A(W)`` on the
    trained basis.
    """
    if not data.paired:
        raise ModeMismatch("iterative training needs paired (X, Y) data")
    N = rfm.output_dim
    _check_n(n, N)
    if optimizer not in ("gd", "preconditioned"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if epochs < 0 or step_size < 0:
        raise ValueError("epochs and step_size must be nonnegative")
    act = Activation(output_activation)
    R0 = rfm.evaluate(data.X)
    R1 = rfm.evaluate(data.Y)
    m = data.m
    P = None
    if optimizer == "preconditioned":
        P = regularized_pinv((R0 @ R0.T + R1 @ R1.T) / (2 * m), tol)

    Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((N, n)))
    W = np.ascontiguousarray(Q.T)
    loss, grad = trace_objective(W, R0, R1, act, tol)
    if not np.isfinite(loss):
        raise DivergedTraining(0)
    history = [loss]
    steps = []
    step = step_size
    for epoch in range(1, epochs + 1):
        D = grad @ P if P is not None else grad
        slope = float(np.sum(grad * D))
        accepted = False
        if step > 0 and slope > 0:
            trial = step
            for _ in range(max_backtracks):
                W_new = W + trial * D
                new_loss = trace_objective(W_new, R0, R1, act, tol, gradient=False)
                if np.isfinite(new_loss) and new_loss >= loss + armijo * trial * slope:
                    accepted = True
                    break
                trial *= 0.5
        if accepted:
            W = W_new
            loss, grad = trace_objective(W, R0, R1, act, tol)
            if not np.isfinite(loss) or grad is None:
                raise DivergedTraining(epoch)
            steps.append(trial)
            step = trial * growth
        else:
            steps.append(0.0)
        history.append(loss)
        log.debug("epoch %d loss %.10g step %.3g", epoch, loss, steps[-1])

    P0 = act.value(W @ R0)
    P1 = act.value(W @ R1)
    C00 = symmetrize(P0 @ P0.T / m)
    C01 = symmetrize(P0 @ P1.T / m)
    sol = solve_generalized_sym(C01, C00, n, "descending", tol)
    model = SpectralModel(rfm, sol.vectors, sol.values, "koopman_eigen", None, tol, True, W, act)
    return TrainedBasisModel(rfm, W, history, model, steps, output_activation)


# ---------------------------------------------------------------------------
# supervised readout
# ---------------------------------------------------------------------------
def ridge_solve(R, Y, gamma: float, form: str = "auto"):
    r"""Closed-form ridge output weights.

    Primal form :math:`W = Y R^\top (R R^\top + I/\gamma)^{-1}` (used when
    ``N <= m``), dual form :math:`W = Y (R^\top R + I/\gamma)^{-1} R^\top`.

    Parameters
    ----------
    R : (N, m) ndarray
        Hidden-layer outputs.
    Y : (c, m) ndarray
        Targets.
    gamma : float
        Regularization strength; larger means less regularization.
    form : {"auto", "primal", "dual"}
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    R = np.asarray(R, dtype=np.float64)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    N, m = R.shape
    if Y.shape[1] != m:
        raise InvalidShape(f"targets {Y.shape} do not match {m} samples")
    if form == "auto":
        form = "primal" if N <= m else "dual"
    if form == "primal":
        G = R @ R.T + np.eye(N) / gamma
        return sla.solve(G, R @ Y.T, assume_a="pos").T
    if form == "dual":
        G = R.T @ R + np.eye(m) / gamma
        return sla.solve(G, Y.T, assume_a="pos").T @ R.T
    raise ValueError(f"unknown form {form!r}")


def ridge_readout(rfm: RandomFeatureMap, X, Y_targets, gamma: float, form: str = "auto"):
    """Fit a linear readout on the random features of ``X``; returns ``(c, N)``."""
    return ridge_solve(rfm.evaluate(X), Y_targets, gamma, form)
