"""Transfer-operator learning with random feature maps.

Frozen random hidden layers map states to features; the output layer is
then obtained in closed form from empirical covariance matrices, giving
Koopman eigenfunctions, singular functions of non-reversible dynamics, or
eigenstates of Schrödinger operators.
"""

__version__ = "0.1.0"

from .analysis import analytic_reference, hermite, spectral_cluster
from .dynamics import (
    SnapshotDataset,
    bickley_trajectories,
    builtin_potential,
    euler_maruyama,
    lagged_pairs,
    sample_grid,
    simulate_pairs,
)
from .ensemble import FitSpec, align_member, fit_ensemble
from .errors import TransferOpError
from .features import Activation, Distribution, RandomFeatureMap, sample_rfm
from .linalg import regularized_pinv, solve_generalized_sym, solve_nonsym_product
from .operators import (
    SpectralModel,
    estimate_covariances,
    fit_eigen,
    fit_iterative_basis,
    fit_schrodinger,
    fit_singular,
)

__all__ = [
    "Activation",
    "Distribution",
    "FitSpec",
    "RandomFeatureMap",
    "SnapshotDataset",
    "SpectralModel",
    "TransferOpError",
    "align_member",
    "analytic_reference",
    "bickley_trajectories",
    "builtin_potential",
    "estimate_covariances",
    "euler_maruyama",
    "fit_eigen",
    "fit_ensemble",
    "fit_iterative_basis",
    "fit_schrodinger",
    "fit_singular",
    "hermite",
    "lagged_pairs",
    "regularized_pinv",
    "sample_grid",
    "sample_rfm",
    "simulate_pairs",
    "solve_generalized_sym",
    "solve_nonsym_product",
    "spectral_cluster",
]
