import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import hermite as P_H
from numpy.polynomial import hermite_e as P_He
from scipy import integrate
from sklearn.metrics import adjusted_rand_score

from transferop.analysis import (
    analytic_reference,
    central_range,
    eigenfunction_error,
    export_clusters,
    hermite,
    kmeans,
    purity,
    sector_labels,
    spectral_cluster,
)
from transferop.errors import DegenerateFunction
from transferop import io


class TestHermite:
    def test_small_values(self):
        assert hermite("probabilists", 2, 2.0) == 3.0
        assert hermite("physicists", 2, 1.0) == 2.0
        assert hermite("physicists", 0, 7.0) == 1.0

    @given(st.integers(0, 6), st.floats(-3, 3))
    def test_cross_identity(self, n, x):
        lhs = hermite("physicists", n, x)
        rhs = 2 ** (n / 2) * hermite("probabilists", n, math.sqrt(2) * x)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("n", range(7))
    def test_matches_polynomial_expansion(self, n, rng):
        x = rng.uniform(-3, 3, 50)
        e = np.eye(n + 1)[n]
        np.testing.assert_allclose(hermite("probabilists", n, x), P_He.hermeval(x, e), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(hermite("physicists", n, x), P_H.hermval(x, e), rtol=1e-10, atol=1e-10)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            hermite("chebyshev", 1, 0.0)
        with pytest.raises(ValueError):
            hermite("physicists", -1, 0.0)


class TestAnalyticReference:
    def test_ou_values(self):
        ref = analytic_reference("ou", alpha=1, beta=4, tau=0.5)
        np.testing.assert_allclose(ref.values(4), [1, 0.60653, 0.36788, 0.22313], atol=5e-6)

    def test_ou_linear_function(self):
        assert analytic_reference("ou", alpha=1, beta=4).function(1, np.array([0.5]))[0] == pytest.approx(1.0)

    def test_qho_values(self):
        np.testing.assert_allclose(analytic_reference("qho", omega=1).values(3), [0.5, 1.5, 2.5])

    def test_ou_orthonormal_monte_carlo(self, rng):
        ref = analytic_reference("ou", alpha=1, beta=4)
        x = rng.normal(0, 0.5, 100_000)
        F = np.vstack([ref.function(i, x) for i in range(4)])
        assert np.abs(F @ F.T / x.size - np.eye(4)).max() <= 0.02

    def test_qho_orthonormal_quadrature(self):
        ref = analytic_reference("qho", omega=1)
        for i in range(4):
            for j in range(4):
                val, _ = integrate.quad(lambda x: ref.function(i, x) * ref.function(j, x), -12, 12, epsabs=1e-12)
                assert val == pytest.approx(float(i == j), abs=1e-6)

    def test_qho_is_eigenstate(self):
        # -f''/2 + x^2 f / 2 = E f checked by finite differences
        ref = analytic_reference("qho", omega=1)
        x = np.linspace(-3, 3, 31)
        h = 1e-4
        for i in range(3):
            f = lambda t: ref.function(i, t)
            Hf = -(f(x + h) - 2 * f(x) + f(x - h)) / (2 * h * h) + 0.5 * x * x * f(x)
            np.testing.assert_allclose(Hf, (i + 0.5) * f(x), atol=1e-5)

    def test_unknown(self):
        with pytest.raises(ValueError):
            analytic_reference("duffing")


class _Fixed:
    """Minimal model stand-in with fixed functions."""

    def __init__(self, fns, values=None):
        self.fns = fns
        self.values = np.asarray(values if values is not None else np.ones(len(fns)))

    @property
    def n(self):
        return len(self.fns)

    def evaluate(self, X):
        X = np.atleast_2d(X)
        return np.vstack([f(X) for f in self.fns])


class TestEigenfunctionError:
    ref = analytic_reference("ou", alpha=1, beta=4)
    x = np.linspace(-1, 1, 101)[None, :]

    def test_exact(self):
        model = _Fixed([lambda X: np.ones(X.shape[1]), lambda X: 2 * X[0]])
        corr, rmse = eigenfunction_error(model, self.ref, 1, self.x)
        assert corr == pytest.approx(1.0) and rmse == pytest.approx(0.0, abs=1e-7)

    def test_negated(self):
        model = _Fixed([lambda X: np.ones(X.shape[1]), lambda X: -3 * X[0]])
        corr, rmse = eigenfunction_error(model, self.ref, 1, self.x)
        assert corr == pytest.approx(-1.0) and rmse == pytest.approx(0.0, abs=1e-7)

    def test_degenerate(self):
        model = _Fixed([lambda X: np.ones(X.shape[1])])
        with pytest.raises(DegenerateFunction):
            eigenfunction_error(model, self.ref, 0, self.x)

    def test_central_range(self, rng):
        x = rng.standard_normal((1, 10_000))
        assert central_range(x).mean() == pytest.approx(0.9, abs=1e-3)


class TestKMeans:
    def test_two_clouds(self, rng):
        z = np.concatenate([rng.normal(-5, 0.3, 100), rng.normal(5, 0.3, 100)])
        truth = np.repeat([0, 1], 100)
        res = kmeans(z[:, None], 2, seed=0)
        assert adjusted_rand_score(truth, res.labels) == 1.0
        assert np.all(res.counts() > 0)

    def test_inertia_non_increasing(self, rng):
        Z = rng.standard_normal((500, 3))
        res = kmeans(Z, 6, seed=1, restarts=3)
        assert np.all(np.diff(res.inertia_history) <= 1e-9 * res.inertia_history[0])

    def test_matches_sklearn_quality(self, rng):
        from sklearn.cluster import KMeans

        Z = np.vstack([rng.normal(c, 0.5, (100, 2)) for c in ([0, 0], [4, 0], [0, 4], [4, 4])])
        ours = kmeans(Z, 4, seed=0)
        theirs = KMeans(4, n_init=10, random_state=0).fit(Z)
        assert ours.inertia <= theirs.inertia_ * (1 + 1e-6)

    def test_deterministic(self, rng):
        Z = rng.standard_normal((200, 2))
        np.testing.assert_array_equal(kmeans(Z, 3, seed=5).labels, kmeans(Z, 3, seed=5).labels)

    def test_sign_flip_invariance(self, rng):
        Z = np.vstack([rng.normal(c, 0.4, (80, 2)) for c in ([0, 0], [3, 1], [1, 4])])
        a = kmeans(Z, 3, seed=2).labels
        b = kmeans(Z * np.array([-1.0, 1.0]), 3, seed=2).labels
        assert adjusted_rand_score(a, b) == 1.0

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((5, 1)), 1)


class TestSpectralCluster:
    def test_one_coordinate_two_clouds(self, rng):
        x = np.concatenate([rng.normal(-2, 0.2, 50), rng.normal(2, 0.2, 50)])[None, :]
        model = _Fixed([lambda X: np.ones(X.shape[1]), lambda X: np.tanh(X[0])])
        res = spectral_cluster(model, x, 2, include_first=False)
        assert purity(res.labels, np.repeat([0, 1], 50)) == 1.0

    def test_needs_enough_functions(self):
        with pytest.raises(ValueError):
            spectral_cluster(_Fixed([lambda X: X[0]]), np.zeros((1, 5)), 3)

    def test_export(self, tmp_path, rng):
        x = rng.standard_normal((1, 20))
        res = spectral_cluster(_Fixed([lambda X: X[0], lambda X: X[0] ** 2]), x, 2)
        export_clusters(tmp_path / "c.csv", x, res)
        header, vals = io.read_csv(tmp_path / "c.csv")
        assert header == ["index", "x0", "label"]
        np.testing.assert_array_equal(vals[:, 2], res.labels)


def test_sector_labels():
    th = np.pi / 5 + 2 * np.pi / 5 * np.arange(5)
    np.testing.assert_array_equal(sector_labels(np.vstack([np.cos(th), np.sin(th)])), np.arange(5))


def test_purity():
    assert purity([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert purity([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
