"""Dense network substrate with hand-written backpropagation and Adam.

Tensors are plain float64 numpy arrays. A :class:`DenseNet` is an ordered
list of fully-connected layers; each layer computes ``act(x @ W.T + b)`` with
``W`` of shape ``(out, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StateError, TrainingError

ACTIVATIONS = ("linear", "relu")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("DenseNet needs at least one layer")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise DimensionError(
                    f"bias shape {layer.bias.shape} does not match weight {layer.weight.shape}"
                )
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in the fixed order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_dense_net(dims, rng: np.random.Generator, hidden_activation: str = "relu") -> DenseNet:
    """Glorot-uniform weights, zero biases; the final layer is always linear.

    Args:
        dims: Layer widths including input and output, e.g. ``[784, 500, 2]``.
        rng: Seeded generator; the only source of randomness.
        hidden_activation: Activation for every layer except the last.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise DimensionError(f"invalid layer dims {dims}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "linear" if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each layer


def forward(net: DenseNet, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise DimensionError(
            f"batch shape {batch.shape} does not match net input dim {net.input_dim}"
        )
    cache = ForwardCache([], [])
    h = batch
    for layer in net.layers:
        cache.inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        cache.preacts.append(pre)
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return h, cache


def backward(
    net: DenseNet, cache: ForwardCache, grad_output: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backpropagate ``grad_output`` through ``net``.

    Returns the gradient w.r.t. the network input and the parameter gradients
    in the same order as :meth:`DenseNet.params`.
    """
    if len(cache.inputs) != len(net.layers) or any(
        x.shape[1] != layer.in_dim for x, layer in zip(cache.inputs, net.layers)
    ):
        raise StateError("forward cache does not belong to this network")
    grad = np.asarray(grad_output, dtype=np.float64)
    if grad.shape != cache.preacts[-1].shape:
        raise DimensionError(
            f"grad_output shape {grad.shape} != forward output {cache.preacts[-1].shape}"
        )
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            grad = grad * (cache.preacts[i] > 0.0)
        grads[2 * i] = grad.T @ cache.inputs[i]
        grads[2 * i + 1] = grad.sum(axis=0)
        grad = grad @ layer.weight
    return grad, grads


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean((a - b) ** 2))


def mse_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of ``mse(a, b)`` with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch {a.shape} vs {b.shape}")
    return 2.0 * (a - b) / a.size


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, learning_rate: float = 2e-4, **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            **kwargs,
        )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and Adam moments differ in length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"param {i}: shape {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient for parameter {i}",
                payload={
                    "parameter": i,
                    "step": state.step,
                    "nan": int(np.isnan(g).sum()),
                    "inf": int(np.isinf(g).sum()),
                },
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params
