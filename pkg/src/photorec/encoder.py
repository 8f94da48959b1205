"""Trainable feed-forward head mapping precomputed photo vectors to visual features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("layer weight must be (d_out, d_in) with a d_out bias")


@dataclass
class EncoderParams:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError("inconsistent layer dimensions")

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def d(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"encoder.{k}.weight"] = layer.weight
            out[f"encoder.{k}.bias"] = layer.bias
        return out


def init_encoder(
    d_in: int,
    d: int = 64,
    hidden: tuple[int, ...] = (128,),
    activation: str = "tanh",
    rng: np.random.Generator | int | None = 0,
) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, seeded."""
    rng = np.random.default_rng(rng)
    sizes = [d_in, *hidden, d]
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(
            Layer(
                rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                rng.uniform(-bound, bound, size=fan_out),
                activation,
            )
        )
    return EncoderParams(layers)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def _check_input(x: np.ndarray, params: EncoderParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != encoder d_in {params.d_in}")
    return x


def _forward(x, params):
    acts = [x]
    pres = []
    h = x
    for layer in params.layers:
        z = h @ layer.weight.T + layer.bias
        h = _act(layer.activation, z)
        pres.append(z)
        acts.append(h)
    return pres, acts


def encode(x, params: EncoderParams) -> np.ndarray:
    """Visual feature(s) for one input vector or a (n, d_in) batch."""
    x = _check_input(x, params)
    return _forward(x, params)[1][-1]


def encode_backward(x, params: EncoderParams, upstream) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse-mode gradients of ``sum(upstream * encode(x))``.

    Works for a single vector or a batch; for a batch the parameter gradients
    are summed over rows (matrix products, so the reduction order is fixed).
    Returns ``([(dW, db) per layer], dx)``.
    """
    x = _check_input(x, params)
    g = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x, g = x[None, :], g[None, :]
    if g.shape != (x.shape[0], params.d):
        raise ValueError(f"upstream gradient shape {g.shape} != {(x.shape[0], params.d)}")
    pres, acts = _forward(x, params)
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        g = g * _act_grad(layer.activation, pres[k], acts[k + 1])
        grads.append((g.T @ acts[k], g.sum(axis=0)))
        g = g @ layer.weight
    grads.reverse()
    return grads, (g[0] if single else g)
