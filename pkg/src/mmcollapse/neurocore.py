"""Dense float64 MLP substrate: forward/backward passes, SGD with decoupled
weight decay, softmax cross-entropy and spectral helpers.

Matrices are plain ``np.ndarray`` objects of dtype float64, samples along
rows. A layer computes ``act(x @ W.T + b)`` with ``W`` of shape (out, in).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from mmcollapse.errors import ConfigurationError, InputError

ACTIVATIONS = ("relu", "identity", "softmax-logits")


class RandomStream:
    """Seeded counter-based (Philox) random stream.

    ``child(name)`` derives an independent stream keyed by ``(seed, name)``
    so that consumers never share draws by accident.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.sha256(repr((self.seed, self.path)).encode()).digest()
        key = np.frombuffer(digest[:16], dtype="<u8").copy()
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RandomStream":
        return RandomStream(self.seed, self.path + (str(name),))

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, path={self.path})"


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape[0] != self.weight.shape[0]:
            raise ConfigurationError(
                f"weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


@dataclass
class Mlp:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer dims not compatible: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Mlp":
        return Mlp([layer.copy() for layer in self.layers])

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[-1]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    decay_factor: float = 0.9
    decay_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be >= 1")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_every)


def he_uniform_mlp(dims: list[int], stream: RandomStream, activations=None,
                   last_activation: str = "identity") -> Mlp:
    """He-uniform (fan-in) initialised MLP with zero biases."""
    if len(dims) < 2:
        raise ConfigurationError("an MLP needs at least an input and output dim")
    n_layers = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + [last_activation]
    layers = []
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / d_in)
        w = stream.uniform(-limit, limit, size=(d_out, d_in))
        layers.append(DenseLayer(w, np.zeros(d_out), activations[k]))
    return Mlp(layers)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ConfigurationError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def forward(mlp: Mlp, x) -> list[np.ndarray]:
    """Return ``[x, a_1, ..., a_L]``, the input followed by each layer output."""
    x = _as_matrix(x)
    if x.shape[1] != mlp.in_dim:
        raise ConfigurationError(
            f"input has {x.shape[1]} columns, first layer expects {mlp.in_dim}")
    acts = [x]
    h = x
    for layer in mlp.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def backward(mlp: Mlp, activations: list[np.ndarray], loss_grad):
    """Backpropagate ``loss_grad`` (dL/d output) through ``mlp``.

    Returns ``(grads, input_grad)`` where ``grads`` is a list of
    ``(dW, db)`` pairs, one per layer.
    """
    if len(activations) != len(mlp.layers) + 1:
        raise ConfigurationError("activations were not produced by this mlp")
    delta = _as_matrix(loss_grad)
    if delta.shape != activations[-1].shape:
        raise ConfigurationError(
            f"loss_grad shape {delta.shape} != output shape {activations[-1].shape}")
    grads = [None] * len(mlp.layers)
    for k in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[k]
        if layer.activation == "relu":
            delta = delta * (activations[k + 1] > 0.0)
        grads[k] = (delta.T @ activations[k], delta.sum(axis=0))
        delta = delta @ layer.weight
    return grads, delta


def zero_grads(mlp: Mlp):
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in mlp.layers]


def add_grads(a, b, scale: float = 1.0):
    return [(wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a, b)]


def sgd_step(mlp: Mlp, grads, config: SgdConfig, epoch: int = 0) -> Mlp:
    """One SGD step: ``W <- (1 - mu*lam) W - mu dW``; biases are not decayed."""
    if len(grads) != len(mlp.layers):
        raise ConfigurationError("one (dW, db) pair per layer is required")
    mu = config.rate_at(epoch)
    shrink = 1.0 - mu * config.weight_decay
    layers = []
    for layer, (dw, db) in zip(mlp.layers, grads):
        if dw.shape != layer.weight.shape or np.shape(db) != layer.bias.shape:
            raise ConfigurationError("gradient shapes do not match parameters")
        layers.append(replace(layer, weight=shrink * layer.weight - mu * dw,
                              bias=layer.bias - mu * db))
    return Mlp(layers)


def softmax(logits) -> np.ndarray:
    z = _as_matrix(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = _as_matrix(logits)
    labels = np.asarray(labels).reshape(-1)
    n, c = z.shape
    if labels.shape[0] != n:
        raise InputError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def singular_values(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InputError("singular_values expects a 2-D matrix")
    if not np.all(np.isfinite(m)):
        raise InputError("matrix has non-finite entries")
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def effective_rank(m, rel_tol: float = 1e-3) -> int:
    """Number of singular values at or above ``rel_tol * sigma_max``."""
    if not 0 < rel_tol < 1:
        raise InputError("rel_tol must lie in (0, 1)")
    s = singular_values(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s >= rel_tol * s[0]))
