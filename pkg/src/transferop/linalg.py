r"""Dense symmetric eigensolvers used by every estimator.

All generalized problems are reduced to ordinary symmetric ones by whitening
the mass matrix: with :math:`B = U \operatorname{diag}(d) U^\top` and the
columns with :math:`d_i > \mathrm{tol} \cdot \max d` retained,
:math:`L = U_r \operatorname{diag}(d_r^{-1/2})` satisfies
:math:`L^\top B L = I`. The pencil :math:`A w = \lambda B w` then becomes the
symmetric problem :math:`L^\top A L v = \lambda v` with :math:`w = L v`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .errors import InvalidMatrix, InvalidShape, RankZero

__all__ = [
    "DEFAULT_TOL",
    "GeneralizedEigenSolution",
    "TruncationWarning",
    "align_signs",
    "regularized_pinv",
    "solve_generalized_sym",
    "solve_nonsym_product",
    "symmetrize",
    "whitener",
]

DEFAULT_TOL = 1e-10


class TruncationWarning(UserWarning):
    """Fewer eigenpairs were returned than requested."""


@dataclass(frozen=True)
class GeneralizedEigenSolution:
    """Eigenpairs of a symmetric-definite pencil.

    Attributes
    ----------
    values : (k,) ndarray
        Eigenvalues (or singular values) in the requested order.
    vectors : (dim, k) ndarray
        Column ``i`` pairs with ``values[i]``; B-orthonormal.
    rank : int
        Numerical rank of the mass matrix after the cutoff.
    truncated : bool
        True when fewer than the requested ``k`` pairs were available.
    companion : (dim, k) ndarray or None
        Second set of weights for the singular-value problem.
    """

    values: np.ndarray
    vectors: np.ndarray
    rank: int
    truncated: bool = False
    companion: Optional[np.ndarray] = None


def symmetrize(M):
    return 0.5 * (M + M.T)


def _check_square(M, name):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidShape(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidMatrix(f"{name} has non-finite entries")
    return M


def _check_tol(tol):
    if not 0.0 < tol < 1.0:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")


def align_signs(V):
    """Flip columns so the entry of largest magnitude in each is positive."""
    V = np.array(V, dtype=np.float64, copy=True)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def _eigh_cutoff(M, tol):
    d, U = sla.eigh(symmetrize(M))
    dmax = d[-1]
    if not dmax > 0.0:
        raise RankZero("matrix has no positive eigenvalues")
    keep = d > tol * dmax
    return d[keep], U[:, keep]


def regularized_pinv(M, tol=DEFAULT_TOL, return_rank=False):
    """Pseudoinverse of a symmetric PSD matrix via its eigendecomposition.

    Eigenvalues below ``tol`` times the largest one are treated as zero.

    Parameters
    ----------
    M : (n, n) array_like
        Symmetric positive semidefinite up to round-off.
    tol : float
        Relative eigenvalue cutoff in (0, 1).
    return_rank : bool
        Also return the number of retained eigenvalues.

    Returns
    -------
    pinv : (n, n) ndarray
    rank : int, optional
    """
    _check_tol(tol)
    M = _check_square(M, "M")
    d, U = _eigh_cutoff(M, tol)
    P = (U / d) @ U.T
    P = symmetrize(P)
    return (P, d.size) if return_rank else P


def whitener(B, tol=DEFAULT_TOL):
    """Return ``L`` with ``L.T @ B @ L = I`` on the retained rank of ``B``."""
    _check_tol(tol)
    B = _check_square(B, "B")
    d, U = _eigh_cutoff(B, tol)
    return U / np.sqrt(d)


def _select(k, rank):
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > rank:
        warnings.warn(
            f"requested {k} eigenpairs but the mass matrix has rank {rank}; returning {rank}",
            TruncationWarning,
            stacklevel=3,
        )
        return rank, True
    return k, False


def solve_generalized_sym(A, B, k, order="descending", tol=DEFAULT_TOL):
    """Solve ``A w = lambda B w`` for symmetric ``A`` and PSD ``B``.

    Parameters
    ----------
    A, B : (n, n) array_like
        Stiffness and mass matrices. ``A`` is symmetrized explicitly.
    k : int
        Number of eigenpairs to return.
    order : {"descending", "ascending"}
        Return the largest or the smallest ``k`` eigenvalues.
    tol : float
        Relative rank cutoff applied to ``B``.

    Returns
    -------
    GeneralizedEigenSolution
    """
    if order not in ("descending", "ascending"):
        raise ValueError(f"order must be 'descending' or 'ascending', got {order!r}")
    A = _check_square(A, "A")
    B = _check_square(B, "B")
    if A.shape != B.shape:
        raise InvalidShape(f"A {A.shape} and B {B.shape} differ")
    L = whitener(B, tol)
    rank = L.shape[1]
    k, truncated = _select(k, rank)
    lam, V = sla.eigh(symmetrize(L.T @ A @ L))
    if order == "descending":
        lam, V = lam[::-1], V[:, ::-1]
    W = align_signs(L @ V[:, :k])
    return GeneralizedEigenSolution(lam[:k].copy(), W, rank, truncated)


def solve_nonsym_product(C00, C01, C11, C10, k, tol=DEFAULT_TOL):
    r"""Singular values of the whitened cross-covariance.

    Solves :math:`C_{00}^{+} C_{01} C_{11}^{+} C_{10} w = \sigma^2 w` without
    forming the non-symmetric product: with whiteners :math:`L_0, L_1`,
    :math:`M = L_0^\top C_{01} L_1 = U S V^\top`, the weights are
    :math:`W = L_0 U` and :math:`W' = L_1 V`.

    Returns
    -------
    GeneralizedEigenSolution
        ``values`` are the singular values (descending, nonnegative),
        ``vectors`` the C00-orthonormal weights, ``companion`` the
        C11-orthonormal weights.
    """
    C00 = _check_square(C00, "C00")
    C11 = _check_square(C11, "C11")
    C01 = np.asarray(C01, dtype=np.float64)
    C10 = np.asarray(C10, dtype=np.float64)
    if C01.shape != (C00.shape[0], C11.shape[0]) or C10.shape != C01.T.shape:
        raise InvalidShape("cross-covariance shapes do not match C00/C11")
    if not (np.all(np.isfinite(C01)) and np.all(np.isfinite(C10))):
        raise InvalidMatrix("cross-covariances have non-finite entries")
    scale = max(np.abs(C01).max(), np.finfo(float).tiny)
    if np.abs(C10 - C01.T).max() > 1e-10 * scale:
        raise InvalidMatrix("C10 must equal C01.T")
    L0 = whitener(C00, tol)
    L1 = whitener(C11, tol)
    rank = min(L0.shape[1], L1.shape[1])
    k, truncated = _select(k, rank)
    U, s, Vt = sla.svd(L0.T @ C01 @ L1)
    W = L0 @ U[:, :k]
    W2 = L1 @ Vt[:k].T
    # flip both sides together so the singular triplets stay consistent
    idx = np.argmax(np.abs(W), axis=0)
    signs = np.sign(W[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return GeneralizedEigenSolution(s[:k].copy(), W * signs, rank, truncated, W2 * signs)
