r"""Frozen random feature maps.

A :class:`RandomFeatureMap` stacks affine layers with randomly drawn,
fixed weights, each followed by the activation:

.. math::

    R(x) = \sigma(W_L \cdots \sigma(W_1 x + b_1) \cdots + b_L).

Features are laid out column-wise: evaluating ``m`` points of dimension
``d`` (a ``d x m`` array) yields an ``N x m`` array.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, InvalidShape, UnsupportedActivation, UnsupportedDepth

__all__ = [
    "Activation",
    "Distribution",
    "RandomFeatureMap",
    "RandomLayer",
    "sample_rfm",
]

_RFM_MAGIC = b"RFM1"


@dataclass(frozen=True)
class Activation:
    """Elementwise nonlinearity with analytic first and second derivatives.

    ``kind`` is one of ``"tanh"``, ``"relu"`` or ``"gaussian"``
    (:math:`e^{-z^2}`). ``relu`` has no second derivative.
    """

    kind: str = "tanh"

    KINDS = ("tanh", "relu", "gaussian", "identity")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {self.KINDS}")

    @property
    def id(self):
        return self.KINDS.index(self.kind)

    @property
    def bounded(self):
        return self.kind in ("tanh", "gaussian")

    @property
    def smooth(self):
        return self.kind != "relu"

    def value(self, z):
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "gaussian":
            return np.exp(-z * z)
        return np.asarray(z, dtype=np.float64).copy()

    def d1(self, z):
        if self.kind == "tanh":
            t = np.tanh(z)
            return 1.0 - t * t
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        if self.kind == "gaussian":
            return -2.0 * z * np.exp(-z * z)
        return np.ones_like(z, dtype=np.float64)

    def d2(self, z):
        if self.kind == "tanh":
            t = np.tanh(z)
            return -2.0 * t * (1.0 - t * t)
        if self.kind == "relu":
            raise UnsupportedActivation("relu has no second derivative")
        if self.kind == "gaussian":
            return (4.0 * z * z - 2.0) * np.exp(-z * z)
        return np.zeros_like(z, dtype=np.float64)


@dataclass(frozen=True)
class Distribution:
    """Sampling law for hidden weights and biases.

    Weights are drawn from ``family`` (``"normal"``: standard deviation
    ``scale``; ``"uniform"``: on ``[-scale, scale]``), divided by
    ``sqrt(fan_in)`` when ``fan_in_scaling`` is set. Biases are uniform on
    ``[-bias_scale, bias_scale]``.
    """

    family: str = "normal"
    scale: float = 1.0
    bias_scale: float = 1.0
    fan_in_scaling: bool = True

    FAMILIES = ("normal", "uniform")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ValueError(f"unknown distribution {self.family!r}; expected one of {self.FAMILIES}")
        if self.scale < 0 or self.bias_scale < 0:
            raise ValueError("distribution scales must be nonnegative")

    @property
    def id(self):
        return self.FAMILIES.index(self.family)

    def draw(self, rng, n_out, n_in):
        s = self.scale / np.sqrt(n_in) if self.fan_in_scaling else self.scale
        if self.family == "normal":
            W = rng.standard_normal((n_out, n_in)) * s
        else:
            W = rng.uniform(-1.0, 1.0, (n_out, n_in)) * s
        b = rng.uniform(-1.0, 1.0, n_out) * self.bias_scale
        return W, b


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RandomLayer:
    """One affine layer ``z -> W z + b`` with frozen entries."""

    weights: np.ndarray
    bias: np.ndarray
    seed: int
    distribution: Distribution = field(default_factory=Distribution)

    def __post_init__(self):
        W = _frozen(self.weights)
        b = _frozen(self.bias)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise InvalidShape(f"layer weights {W.shape} and bias {b.shape} do not chain")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise InvalidShape("layer entries must be finite")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @classmethod
    def sample(cls, n_out, n_in, seed, distribution):
        rng = np.random.default_rng(seed)
        W, b = distribution.draw(rng, n_out, n_in)
        return cls(W, b, int(seed), distribution)

    @property
    def shape(self):
        return self.weights.shape

    def preactivation(self, Z):
        return self.weights @ Z + self.bias[:, None]


class RandomFeatureMap:
    """Immutable stack of random layers plus an activation.

    Parameters
    ----------
    layers : sequence of RandomLayer
        Consecutive shapes must chain.
    activation : Activation
        Applied after every layer, including the last.
    seed : int
        Seed the map was sampled from (provenance only).
    """

    def __init__(self, layers: Sequence[RandomLayer], activation: Activation, seed: int = 0):
        layers = tuple(layers)
        if not layers:
            raise InvalidShape("a feature map needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise InvalidShape(f"layer shapes {prev.shape} -> {nxt.shape} do not chain")
        self._layers = layers
        self._activation = activation
        self._seed = int(seed)

    @property
    def layers(self):
        return self._layers

    @property
    def activation(self):
        return self._activation

    @property
    def seed(self):
        return self._seed

    @property
    def input_dim(self):
        return self._layers[0].shape[1]

    @property
    def output_dim(self):
        return self._layers[-1].shape[0]

    @property
    def widths(self):
        return [layer.shape[0] for layer in self._layers]

    @property
    def distribution(self):
        return self._layers[0].distribution

    def __repr__(self):
        return (
            f"RandomFeatureMap(d={self.input_dim}, widths={self.widths}, "
            f"activation={self._activation.kind!r}, seed={self._seed})"
        )

    def _as_points(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1 and self.input_dim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[0] != self.input_dim:
            raise InvalidShape(f"expected points of shape ({self.input_dim}, m), got {X.shape}")
        return X

    def _forward(self, X):
        Z = X
        for layer in self._layers:
            Z = self._activation.value(layer.preactivation(Z))
        return Z

    def evaluate(self, X, n_threads=1, chunk_size=8192):
        """Evaluate the features at the columns of ``X``.

        Parameters
        ----------
        X : (d, m) array_like
        n_threads : int
            Columns are sharded across threads when greater than one; the
            result is identical to the serial evaluation.

        Returns
        -------
        (N, m) ndarray
        """
        X = self._as_points(X)
        m = X.shape[1]
        if n_threads <= 1 or m <= chunk_size:
            return self._forward(X)
        bounds = [(i, min(i + chunk_size, m)) for i in range(0, m, chunk_size)]
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(lambda ab: self._forward(X[:, ab[0]:ab[1]]), bounds))
        return np.concatenate(parts, axis=1)

    __call__ = evaluate

    def evaluate_hamiltonian(self, X, potential: Callable, hbar=1.0, mass=1.0):
        r"""Apply :math:`H = -\frac{\hbar^2}{2m}\Delta + V` to every feature.

        For a single layer, :math:`\Delta \sigma(w_i \cdot x + b_i) =
        \sigma''(w_i \cdot x + b_i) \lVert w_i \rVert^2`.

        Parameters
        ----------
        X : (d, m) array_like
        potential : callable
            Maps a ``(d, m)`` array to ``m`` potential values.
        """
        if not self._activation.smooth:
            raise UnsupportedActivation(f"{self._activation.kind} is not twice differentiable")
        if len(self._layers) != 1:
            raise UnsupportedDepth("the Hamiltonian is only available for single-layer maps")
        X = self._as_points(X)
        layer = self._layers[0]
        Z = layer.preactivation(X)
        V = np.asarray(potential(X), dtype=np.float64).reshape(-1)
        if V.shape != (X.shape[1],):
            raise InvalidShape(f"potential returned shape {V.shape}, expected ({X.shape[1]},)")
        wnorm2 = np.einsum("ij,ij->i", layer.weights, layer.weights)
        kinetic = -(hbar * hbar) / (2.0 * mass) * self._activation.d2(Z) * wnorm2[:, None]
        return kinetic + V[None, :] * self._activation.value(Z)

    # serialization -----------------------------------------------------------
    def to_bytes(self):
        """Encode as an ``RFM1`` block (little-endian, row-major float64)."""
        dist = self.distribution
        widths = self.widths
        head = struct.pack("<4sII", _RFM_MAGIC, self.input_dim, len(widths))
        head += struct.pack(f"<{len(widths)}I", *widths)
        head += struct.pack(
            "<BBBxddQ",
            self._activation.id,
            dist.id,
            int(dist.fan_in_scaling),
            dist.scale,
            dist.bias_scale,
            self._seed & 0xFFFFFFFFFFFFFFFF,
        )
        body = []
        for layer in self._layers:
            body.append(struct.pack("<Q", layer.seed & 0xFFFFFFFFFFFFFFFF))
            body.append(layer.weights.astype("<f8").tobytes(order="C"))
            body.append(layer.bias.astype("<f8").tobytes(order="C"))
        return head + b"".join(body)

    @classmethod
    def from_bytes(cls, buf, offset=0):
        """Decode an ``RFM1`` block; returns ``(rfm, end_offset)``."""
        try:
            magic, d, n_layers = struct.unpack_from("<4sII", buf, offset)
            if magic != _RFM_MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {_RFM_MAGIC!r}")
            offset += 12
            widths = struct.unpack_from(f"<{n_layers}I", buf, offset)
            offset += 4 * n_layers
            act_id, dist_id, fan_in, scale, bias_scale, seed = struct.unpack_from("<BBBxddQ", buf, offset)
            offset += struct.calcsize("<BBBxddQ")
            activation = Activation(Activation.KINDS[act_id])
            dist = Distribution(Distribution.FAMILIES[dist_id], scale, bias_scale, bool(fan_in))
            layers = []
            n_in = d
            for n_out in widths:
                (lseed,) = struct.unpack_from("<Q", buf, offset)
                offset += 8
                W = np.frombuffer(buf, "<f8", n_out * n_in, offset).reshape(n_out, n_in)
                offset += 8 * n_out * n_in
                b = np.frombuffer(buf, "<f8", n_out, offset)
                offset += 8 * n_out
                layers.append(RandomLayer(W, b, lseed, dist))
                n_in = n_out
        except (struct.error, ValueError, IndexError) as exc:
            raise FormatError(f"truncated or corrupt RFM1 block: {exc}") from exc
        return cls(layers, activation, seed), offset

    def save(self, path):
        from .io import atomic_write_bytes

        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            buf = fh.read()
        rfm, _ = cls.from_bytes(buf)
        return rfm


def _layer_seeds(seed, n_layers):
    children = np.random.SeedSequence(seed).spawn(n_layers)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def sample_rfm(
    input_dim: int,
    layer_widths: Sequence[int],
    activation="tanh",
    distribution: Distribution | None = None,
    seed: int = 0,
) -> RandomFeatureMap:
    """Draw a random feature map.

    Each layer gets its own RNG stream spawned from ``seed``, so a layer is
    reproducible from ``(layer seed, shape, distribution)`` alone.

    Examples
    --------
    >>> rfm = sample_rfm(2, [256, 512, 256], "tanh", seed=0)
    >>> rfm.output_dim
    256
    """
    if input_dim < 1:
        raise InvalidShape(f"input_dim must be positive, got {input_dim}")
    widths = [int(w) for w in layer_widths]
    if not widths or min(widths) < 1:
        raise InvalidShape(f"layer widths must all be >= 1, got {list(layer_widths)}")
    if isinstance(activation, str):
        activation = Activation(activation)
    distribution = distribution or Distribution()
    layers = []
    n_in = input_dim
    for n_out, lseed in zip(widths, _layer_seeds(seed, len(widths))):
        layers.append(RandomLayer.sample(n_out, n_in, lseed, distribution))
        n_in = n_out
    return RandomFeatureMap(layers, activation, seed)
