"""Ensembles over independently drawn feature maps.

Every member is fitted on the same data with its own feature-map seed.
Eigenfunctions are only defined up to sign (and, for close eigenvalues, up
to order), so each member is aligned to the smallest-seed member before
means and variances are taken.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .dynamics import SnapshotDataset
from .errors import EnsembleFailed, InvalidShape, TransferOpError
from .features import Distribution, sample_rfm
from .linalg import DEFAULT_TOL
from .operators import SpectralModel, fit_eigen, fit_schrodinger, fit_singular

__all__ = [
    "AMBIGUITY_MARGIN",
    "EnsembleSummary",
    "FitSpec",
    "MemberAlignment",
    "align_member",
    "export_summary",
    "fit_ensemble",
    "fit_member",
    "knn_density",
]

log = logging.getLogger(__name__)

AMBIGUITY_MARGIN = 0.05


@dataclass(frozen=True)
class FitSpec:
    """Everything needed to fit one member apart from its seed."""

    mode: str = "koopman_eigen"
    n: int = 4
    widths: tuple = (256, 512, 256)
    activation: str = "tanh"
    distribution: Distribution = field(default_factory=Distribution)
    tol: float = DEFAULT_TOL
    symmetrize: bool = True
    potential: Optional[object] = None
    hbar: float = 1.0
    mass: float = 1.0


def fit_member(dataset: SnapshotDataset, spec: FitSpec, seed: int, timings: Optional[dict] = None) -> SpectralModel:
    """Sample a feature map with ``seed`` and fit it according to ``spec``."""
    rfm = sample_rfm(dataset.dim, spec.widths, spec.activation, spec.distribution, seed)
    kw = {"timings": timings} if timings is not None else {}
    if spec.mode == "koopman_eigen":
        return fit_eigen(rfm, dataset, spec.n, spec.tol, spec.symmetrize, **kw)
    if spec.mode == "singular":
        return fit_singular(rfm, dataset, spec.n, spec.tol, **kw)
    if spec.mode == "schrodinger":
        return fit_schrodinger(rfm, dataset, spec.n, spec.potential, spec.hbar, spec.mass, spec.tol,
                               spec.symmetrize, **kw)
    raise ValueError(f"unknown mode {spec.mode!r}")


@dataclass(frozen=True)
class MemberAlignment:
    """How one member was mapped onto the reference.

    Row ``i`` of the aligned member is ``signs[i] * member[permutation[i]]``.
    """

    seed: int
    permutation: tuple
    signs: tuple
    ambiguous: bool

    def as_dict(self):
        return {"seed": self.seed, "permutation": list(self.permutation), "signs": list(self.signs),
                "ambiguous": self.ambiguous}


def _cosines(ref, mem):
    # uncentered: a constant eigenfunction has zero variance but must still match
    nr = np.linalg.norm(ref, axis=1)
    nm = np.linalg.norm(mem, axis=1)
    G = ref @ mem.T
    with np.errstate(invalid="ignore", divide="ignore"):
        C = G / np.outer(nr, nm)
    C[~np.isfinite(C)] = 0.0
    return C, nr > 0, nm > 0


def align_member(reference, member, values=None):
    """Match member rows to reference rows greedily by absolute correlation.

    Pairs are assigned highest ``|correlation|`` first, each row used once;
    the matched row is multiplied by the sign of its correlation. Rows that
    vanish identically are matched last with sign ``+1``.

    Returns
    -------
    aligned : (n, k) ndarray
    permutation : (n,) int ndarray
    signs : (n,) float ndarray
    aligned_values : (n,) ndarray or None
        ``values[permutation]``.
    ambiguous : bool
        True if some reference row had two candidates whose ``|correlation|``
        differ by less than :data:`AMBIGUITY_MARGIN`.

    Examples
    --------
    >>> R = np.array([[1., 0, 0], [0, 1, 0], [0, 0, 1]])
    >>> M = R[[0, 2, 1]] * np.array([[1], [-1], [1]])
    >>> align_member(R, M)[1]
    array([0, 2, 1])
    """
    reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
    member = np.atleast_2d(np.asarray(member, dtype=np.float64))
    if reference.shape != member.shape:
        raise InvalidShape(f"reference {reference.shape} and member {member.shape} differ")
    n = reference.shape[0]
    C, ref_ok, mem_ok = _cosines(reference, member)
    A = np.abs(C)

    ambiguous = False
    for i in np.flatnonzero(ref_ok):
        top = np.sort(A[i, mem_ok])[::-1]
        if top.size > 1 and top[0] - top[1] < AMBIGUITY_MARGIN:
            ambiguous = True
            break

    perm = np.full(n, -1, dtype=np.int64)
    signs = np.ones(n)
    free_r = ref_ok.copy()
    free_m = mem_ok.copy()
    # stable ordering: ties resolved by (reference row, member row)
    order = np.argsort(-A, axis=None, kind="stable")
    for flat in order:
        i, j = divmod(int(flat), n)
        if free_r[i] and free_m[j]:
            perm[i] = j
            signs[i] = -1.0 if C[i, j] < 0 else 1.0
            free_r[i] = free_m[j] = False
    # degenerate rows on either side: pair the leftovers in index order
    left_r = np.flatnonzero(perm < 0)
    used = set(perm[perm >= 0].tolist())
    left_m = [j for j in range(n) if j not in used]
    for i, j in zip(left_r, left_m):
        perm[i] = j

    aligned = member[perm] * signs[:, None]
    vals = None if values is None else np.asarray(values, dtype=np.float64)[perm]
    return aligned, perm, signs, vals, ambiguous


@dataclass
class EnsembleSummary:
    """Aggregated ensemble statistics.

    ``function_mean`` and ``function_var`` are ``(n, k)`` over the
    evaluation points; variances use the population (``ddof=0``) formula.
    """

    member_count: int
    seeds: list
    values: np.ndarray
    values_mean: np.ndarray
    values_std: np.ndarray
    function_mean: np.ndarray
    function_var: np.ndarray
    alignment: list
    failures: list = field(default_factory=list)

    @property
    def function_std(self):
        return np.sqrt(self.function_var)

    def stats_dict(self):
        return {
            "member_count": self.member_count,
            "seeds": list(self.seeds),
            "values_mean": self.values_mean.tolist(),
            "values_std": self.values_std.tolist(),
            "values": self.values.tolist(),
            "alignment": [a.as_dict() for a in self.alignment],
            "failures": list(self.failures),
        }


def fit_ensemble(
    dataset: SnapshotDataset,
    spec: FitSpec,
    members: int,
    base_seed: int = 0,
    eval_points=None,
    n_threads: int = 1,
    bootstrap: bool = False,
    seeds: Optional[Sequence[int]] = None,
) -> EnsembleSummary:
    """Fit ``members`` models with seeds ``base_seed + 0 ... base_seed + members - 1``.

    Failing members are skipped and listed in ``failures``. The member with
    the smallest seed among the survivors is the alignment reference and
    the reduction runs in seed order, so the result does not depend on
    scheduling. With ``bootstrap`` each member also resamples the data
    columns with replacement (from its own seed).

    ``seeds`` overrides the default seed range (duplicates allowed).
    """
    if seeds is None:
        if members < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {members}")
        seeds = [base_seed + i for i in range(members)]
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("an ensemble needs at least 2 members")
    if eval_points is None:
        eval_points = dataset.X
    E = np.asarray(eval_points, dtype=np.float64)
    if E.ndim == 1:
        E = E[None, :]
    if E.shape[0] != dataset.dim:
        raise InvalidShape(f"evaluation points have dimension {E.shape[0]}, data has {dataset.dim}")

    def run(seed):
        try:
            data = dataset
            if bootstrap:
                idx = np.random.default_rng([seed, 0xB007]).integers(0, dataset.m, dataset.m)
                data = SnapshotDataset(dataset.X[:, idx], None if dataset.Y is None else dataset.Y[:, idx],
                                       dataset.lag_time, dataset.source)
            model = fit_member(data, spec, seed)
            return seed, model.values, model.evaluate(E), None
        except (TransferOpError, np.linalg.LinAlgError) as exc:
            log.warning("ensemble member with seed %d failed: %s", seed, exc)
            return seed, None, None, f"{type(exc).__name__}: {exc}"

    order = sorted(range(len(seeds)), key=lambda i: (seeds[i], i))
    ordered = [seeds[i] for i in order]
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(run, ordered))
    else:
        results = [run(s) for s in ordered]

    failures = [{"seed": s, "error": err} for s, _, _, err in results if err is not None]
    ok = [(s, v, F) for s, v, F, err in results if err is None]
    if len(ok) < 2:
        raise EnsembleFailed(f"only {len(ok)} of {len(seeds)} members succeeded; at least 2 are required")
    n = min(v.shape[0] for _, v, _ in ok)
    ref = ok[0][2][:n]

    values = []
    fsum = np.zeros_like(ref)
    aligned_all = []
    report = []
    for s, v, F in ok:
        aligned, perm, signs, vals, amb = align_member(ref, F[:n], v[:n])
        aligned_all.append(aligned)
        values.append(vals)
        report.append(MemberAlignment(s, tuple(int(p) for p in perm), tuple(int(x) for x in signs), bool(amb)))
    stack = np.stack(aligned_all)
    fsum = stack.sum(axis=0)
    mean = fsum / len(ok)
    var = np.mean((stack - mean) ** 2, axis=0)
    values = np.array(values)
    return EnsembleSummary(
        member_count=len(ok),
        seeds=[s for s, _, _ in ok],
        values=values,
        values_mean=values.mean(axis=0),
        values_std=values.std(axis=0),
        function_mean=mean,
        function_var=var,
        alignment=report,
        failures=failures,
    )


def knn_density(train, points, k: int = 10):
    """Unnormalized k-nearest-neighbour density ``1 / r_k^d`` at ``points``.

    ``train`` and ``points`` are ``(d, m)`` and ``(d, p)`` column arrays.
    """
    train = np.atleast_2d(np.asarray(train, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = train.shape[0]
    r, _ = cKDTree(train.T).query(points.T, k=k)
    rk = np.atleast_2d(r)[:, -1] if k > 1 else np.asarray(r)
    return 1.0 / np.maximum(rk, np.finfo(float).tiny) ** d


def export_summary(summary: EnsembleSummary, eval_points, csv_path, json_path):
    """Write per-point means and variances (CSV) and eigenvalue statistics (JSON)."""
    E = np.atleast_2d(np.asarray(eval_points, dtype=np.float64))
    d, k = E.shape
    n = summary.function_mean.shape[0]
    header = (["index"] + [f"x{j}" for j in range(d)] + [f"mean{i}" for i in range(n)]
              + [f"var{i}" for i in range(n)])
    rows = ([p, *E[:, p], *summary.function_mean[:, p], *summary.function_var[:, p]] for p in range(k))
    io.write_csv(csv_path, header, rows)
    io.write_json(json_path, summary.stats_dict())
