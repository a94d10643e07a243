import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transferop.errors import FormatError, InvalidShape, UnsupportedActivation, UnsupportedDepth
from transferop.features import Activation, Distribution, RandomFeatureMap, RandomLayer, sample_rfm


def single_layer(W, b, kind="tanh"):
    return RandomFeatureMap([RandomLayer(np.atleast_2d(W), np.atleast_1d(b), 0)], Activation(kind))


class TestActivation:
    @pytest.mark.parametrize("kind", ["tanh", "gaussian", "relu"])
    def test_derivatives_match_finite_differences(self, kind, rng):
        act = Activation(kind)
        z = rng.uniform(-3, 3, 200)
        if kind == "relu":
            z = z[np.abs(z) > 1e-3]
        h = 1e-5
        fd1 = (act.value(z + h) - act.value(z - h)) / (2 * h)
        np.testing.assert_allclose(act.d1(z), fd1, rtol=1e-6, atol=1e-9)
        if kind != "relu":
            h = 1e-4
            fd2 = (act.value(z + h) - 2 * act.value(z) + act.value(z - h)) / h**2
            np.testing.assert_allclose(act.d2(z), fd2, rtol=1e-5, atol=1e-6)

    def test_relu_has_no_second_derivative(self):
        with pytest.raises(UnsupportedActivation):
            Activation("relu").d2(np.zeros(3))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Activation("softsign")

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
    def test_bounded_activations(self, zs):
        z = np.array(zs)
        for kind in ("tanh", "gaussian"):
            assert np.all(np.abs(Activation(kind).value(z)) <= 1.0)


class TestSampleRfm:
    def test_paper_architecture(self):
        rfm = sample_rfm(2, [256, 512, 256], "tanh", seed=0)
        assert rfm.output_dim == 256 and rfm.input_dim == 2 and rfm.widths == [256, 512, 256]

    def test_degenerate_map(self):
        rfm = sample_rfm(1, [1], "tanh", Distribution(scale=0.0, bias_scale=0.0), seed=0)
        np.testing.assert_array_equal(rfm.evaluate(np.linspace(-5, 5, 11)), np.zeros((1, 11)))

    def test_determinism(self):
        a = sample_rfm(3, [20, 10], seed=42)
        b = sample_rfm(3, [20, 10], seed=42)
        for la, lb in zip(a.layers, b.layers):
            assert la.weights.tobytes() == lb.weights.tobytes()
            assert la.bias.tobytes() == lb.bias.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(sample_rfm(1, [5], seed=1).layers[0].weights,
                                  sample_rfm(1, [5], seed=2).layers[0].weights)

    def test_zero_width(self):
        with pytest.raises(InvalidShape):
            sample_rfm(2, [10, 0])

    def test_layer_reproducible_from_its_own_seed(self):
        rfm = sample_rfm(2, [7, 5], seed=9)
        layer = rfm.layers[1]
        again = RandomLayer.sample(5, 7, layer.seed, layer.distribution)
        np.testing.assert_array_equal(again.weights, layer.weights)

    def test_frozen(self):
        rfm = sample_rfm(2, [4], seed=0)
        with pytest.raises(ValueError):
            rfm.layers[0].weights[0, 0] = 1.0

    def test_uniform_family_bounds(self):
        dist = Distribution("uniform", scale=2.0, bias_scale=0.5, fan_in_scaling=False)
        layer = sample_rfm(3, [1000], distribution=dist, seed=1).layers[0]
        assert np.abs(layer.weights).max() <= 2.0 and np.abs(layer.bias).max() <= 0.5


class TestEvaluate:
    def test_single_unit_at_zero(self):
        assert single_layer(1.0, 0.0).evaluate(np.array([[0.0]]))[0, 0] == 0.0

    def test_large_input_stays_bounded(self):
        v = single_layer(1.0, 0.0).evaluate(np.array([[1e3]]))[0, 0]
        assert -1.0 <= v <= 1.0

    def test_composition(self, rng):
        rfm = sample_rfm(3, [8, 6], seed=5)
        X = rng.standard_normal((3, 10))
        l1, l2 = rfm.layers
        first = RandomFeatureMap([l1], rfm.activation)
        second = RandomFeatureMap([l2], rfm.activation)
        np.testing.assert_allclose(rfm.evaluate(X), second.evaluate(first.evaluate(X)), rtol=0, atol=0)

    def test_explicit_formula(self, rng):
        rfm = sample_rfm(2, [5], seed=1)
        X = rng.standard_normal((2, 7))
        L = rfm.layers[0]
        np.testing.assert_allclose(rfm(X), np.tanh(L.weights @ X + L.bias[:, None]), rtol=1e-15)

    def test_threads_do_not_change_result(self, rng):
        rfm = sample_rfm(2, [16, 8], seed=1)
        X = rng.standard_normal((2, 1000))
        np.testing.assert_array_equal(rfm.evaluate(X, n_threads=3, chunk_size=128), rfm.evaluate(X))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShape):
            sample_rfm(2, [4]).evaluate(np.zeros((3, 5)))

    def test_one_dimensional_input_vector(self):
        rfm = sample_rfm(1, [4])
        assert rfm.evaluate(np.zeros(6)).shape == (4, 6)


class TestHamiltonian:
    def test_free_constant_feature(self):
        rfm = single_layer(np.zeros((1, 2)), [0.3])
        out = rfm.evaluate_hamiltonian(np.ones((2, 4)), lambda X: np.zeros(X.shape[1]))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_tanh_at_origin(self):
        out = single_layer(1.0, 0.0).evaluate_hamiltonian(np.array([[0.0]]), lambda X: 0.5 * X[0] ** 2)
        assert out[0, 0] == 0.0

    @pytest.mark.parametrize("kind", ["tanh", "gaussian"])
    def test_finite_difference_laplacian(self, kind, rng):
        rfm = sample_rfm(2, [15], kind, seed=4)
        X = rng.uniform(-1, 1, (2, 20))
        V = lambda P: 0.5 * np.sum(P**2, axis=0)
        hbar, mass = 0.7, 1.3
        h = 1e-4
        lap = np.zeros((15, 20))
        for j in range(2):
            e = np.zeros((2, 1))
            e[j] = h
            lap += (rfm(X + e) - 2 * rfm(X) + rfm(X - e)) / h**2
        ref = -(hbar**2) / (2 * mass) * lap + V(X) * rfm(X)
        got = rfm.evaluate_hamiltonian(X, V, hbar, mass)
        np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-4 * np.abs(ref).max())

    def test_relu_rejected(self):
        with pytest.raises(UnsupportedActivation):
            sample_rfm(1, [3], "relu").evaluate_hamiltonian(np.zeros((1, 2)), lambda X: np.zeros(2))

    def test_deep_map_rejected(self):
        with pytest.raises(UnsupportedDepth):
            sample_rfm(1, [3, 3]).evaluate_hamiltonian(np.zeros((1, 2)), lambda X: np.zeros(2))


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        rfm = sample_rfm(2, [9, 4], "gaussian", Distribution("uniform", 1.5, 0.25, False), seed=77)
        path = tmp_path / "map.rfm"
        rfm.save(path)
        back = RandomFeatureMap.load(path)
        assert back.widths == rfm.widths and back.activation == rfm.activation and back.seed == 77
        assert back.distribution == rfm.distribution
        X = rng.standard_normal((2, 5))
        np.testing.assert_array_equal(back(X), rfm(X))

    def test_header_layout(self):
        buf = sample_rfm(3, [2], seed=0).to_bytes()
        assert buf[:4] == b"RFM1"
        assert int.from_bytes(buf[4:8], "little") == 3
        assert int.from_bytes(buf[8:12], "little") == 1

    def test_bad_magic(self):
        buf = bytearray(sample_rfm(1, [2]).to_bytes())
        buf[:4] = b"NOPE"
        with pytest.raises(FormatError):
            RandomFeatureMap.from_bytes(bytes(buf))

    def test_truncated(self):
        buf = sample_rfm(1, [2]).to_bytes()
        with pytest.raises(FormatError):
            RandomFeatureMap.from_bytes(buf[:-5])
