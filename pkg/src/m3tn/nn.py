"""Minimal float64 feed-forward toolkit with explicit layer-local backward rules.

Layers are stateless with respect to a forward pass: ``forward`` returns the
output together with a cache, and ``backward`` consumes that cache. Gradients
are accumulated into a flat ``dict`` keyed by the same dotted parameter path
that ``named_parameters`` yields, so optimizers and checkpoints can address
every trainable array by name.
"""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("identity", "relu", "softmax")

GradientSet = dict[str, np.ndarray]


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def xavier_uniform(
    shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator
) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss needs a non-empty batch")
    resid = pred - target
    return float(np.mean(resid**2)), (2.0 / pred.size) * resid


class Dense:
    """Affine map followed by an activation: ``act(x @ W.T + b)``."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        activation: str = "identity",
        *,
        bias: bool = True,
        name: str = "dense",
        rng: np.random.Generator | None = None,
    ):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"layer {name}: dimensions must be positive, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        if activation == "relu":
            self.weight = he_uniform((out_dim, in_dim), in_dim, rng)
        else:
            self.weight = xavier_uniform((out_dim, in_dim), in_dim, out_dim, rng)
        self.bias = np.zeros(out_dim) if bias else None

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.weight", self.weight
        if self.bias is not None:
            yield f"{self.name}.bias", self.bias

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(
                f"layer {self.name}: input shape {x.shape} incompatible with "
                f"weight shape {self.weight.shape}"
            )
        z = x @ self.weight.T
        if self.bias is not None:
            z = z + self.bias
        if self.activation == "relu":
            out = np.maximum(z, 0.0)
        elif self.activation == "softmax":
            out = softmax(z)
        else:
            out = z
        return out, (x, z, out)

    def backward(self, cache: tuple, grad_out: np.ndarray, grads: GradientSet) -> np.ndarray:
        x, z, out = cache
        if self.activation == "relu":
            grad_z = grad_out * (z > 0)
        elif self.activation == "softmax":
            grad_z = out * (grad_out - np.sum(grad_out * out, axis=1, keepdims=True))
        else:
            grad_z = grad_out
        _accumulate(grads, f"{self.name}.weight", grad_z.T @ x)
        if self.bias is not None:
            _accumulate(grads, f"{self.name}.bias", grad_z.sum(axis=0))
        return grad_z @ self.weight


class Mlp:
    """Chain of dense layers; ReLU on hidden layers, ``output_activation`` on the last."""

    def __init__(
        self,
        dims: list[int],
        *,
        output_activation: str = "identity",
        name: str = "mlp",
        rng: np.random.Generator | None = None,
    ):
        if len(dims) < 2:
            raise ConfigError(f"{name}: an Mlp needs at least input and output widths, got {dims}")
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            act = output_activation if i == len(dims) - 2 else "relu"
            self.layers.append(Dense(a, b, act, name=f"{name}.layers.{i}", rng=rng))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.layers:
            yield from layer.named_parameters()

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches: list, grad_out: np.ndarray, grads: GradientSet) -> np.ndarray:
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            grad_out = layer.backward(c, grad_out, grads)
        return grad_out


class Embedding:
    """Lookup table mapping category indices to dense vectors."""

    def __init__(self, cardinality: int, dim: int, *, name: str = "embedding",
                 rng: np.random.Generator | None = None):
        if cardinality < 1 or dim < 1:
            raise ConfigError(f"{name}: cardinality and dim must be positive")
        self.cardinality = cardinality
        self.dim = dim
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vectors = xavier_uniform((cardinality, dim), cardinality, dim, rng)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{self.name}.vectors", self.vectors

    def forward(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.vectors[idx], idx

    def backward(self, idx: np.ndarray, grad_out: np.ndarray, grads: GradientSet) -> None:
        g = np.zeros_like(self.vectors)
        np.add.at(g, idx, grad_out)
        _accumulate(grads, f"{self.name}.vectors", g)


def _accumulate(grads: GradientSet, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


def param_count(parts: Iterable) -> int:
    """Number of trainable scalars across ``parts`` (anything with ``named_parameters``)."""
    return sum(p.size for part in parts for _, p in part.named_parameters())


class Adam:
    """Adam with bias correction, updating the registered arrays in place."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: GradientSet) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(p)
            elif g.shape != p.shape:
                raise ConfigError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
