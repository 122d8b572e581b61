"""Small fully-connected feature networks with hand-written backprop and Adam.

Weights are stored ``(in_dim, out_dim)`` so a layer computes
``act(inputs @ W + b)``. Supported activations are ``snake`` (``t + sin(t)^2``),
exact-CDF ``gelu`` and ``linear``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

ACTIVATIONS = ("snake", "gelu", "linear")
CHECKPOINT_FORMAT = "augspec-mlp"
CHECKPOINT_VERSION = 1

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite values produced by layer {layer}")
        self.layer = layer


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape}, {self.bias.shape}")


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ValueError(f"layer {i} output {a.weight.shape[1]} != layer {i + 1} input {b.weight.shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def leaves(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_leaves(self, leaves: Sequence[np.ndarray]) -> "MlpParams":
        it = iter(leaves)
        return MlpParams([Layer(next(it), next(it), layer.activation) for layer in self.layers])

    def copy(self) -> "MlpParams":
        return self.with_leaves([a.copy() for a in self.leaves()])

    def n_params(self) -> int:
        return sum(a.size for a in self.leaves())


def _act(name: str, t: np.ndarray) -> np.ndarray:
    if name == "snake":
        return t + np.sin(t) ** 2
    if name == "gelu":
        return t * ndtr(t)
    return t


def _act_grad(name: str, t: np.ndarray) -> np.ndarray:
    if name == "snake":
        return 1.0 + np.sin(2.0 * t)
    if name == "gelu":
        return ndtr(t) + t * _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    return np.ones_like(t)


def snake(t):
    return _act("snake", np.asarray(t, dtype=np.float64))


def gelu(t):
    return _act("gelu", np.asarray(t, dtype=np.float64))


def _as_inputs(params: MlpParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != params.in_dim:
        raise ValueError(f"input width {x.shape[1]} != network input {params.in_dim}")
    return x


def _forward_cache(params: MlpParams, x: np.ndarray):
    pre, post = [], [x]
    h = x
    for i, layer in enumerate(params.layers):
        a = h @ layer.weight + layer.bias
        h = _act(layer.activation, a)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(i)
        pre.append(a)
        post.append(h)
    return pre, post


def forward(params: MlpParams, inputs) -> np.ndarray:
    x = _as_inputs(params, inputs)
    return _forward_cache(params, x)[1][-1]


def forward_cached(params: MlpParams, inputs):
    """Forward pass that also returns the activations needed by :func:`backward`."""
    x = _as_inputs(params, inputs)
    cache = _forward_cache(params, x)
    return cache[1][-1], cache


def backward(params: MlpParams, inputs, output_cotangent, cache=None) -> MlpParams:
    """Gradient of ``sum(output * cotangent)`` w.r.t. every weight and bias.

    Returned as an ``MlpParams`` whose leaves hold the gradients. ``cache``
    from :func:`forward_cached` on the same inputs skips the recomputation.
    """
    x = _as_inputs(params, inputs)
    g = np.asarray(output_cotangent, dtype=np.float64)
    if g.shape != (x.shape[0], params.out_dim):
        raise ValueError(f"cotangent shape {g.shape} != {(x.shape[0], params.out_dim)}")
    pre, post = cache if cache is not None else _forward_cache(params, x)
    grads: list[Layer] = []
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        g = g * _act_grad(layer.activation, pre[i])
        grads.append(Layer(post[i].T @ g, g.sum(axis=0), layer.activation))
        if i:
            g = g @ layer.weight.T
    return MlpParams(grads[::-1])


def init(arch: Sequence[tuple[int, int, str]], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases; ``arch`` lists ``(fan_in, fan_out, activation)``."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in arch:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out), act))
    return MlpParams(layers)


def synthetic_arch(in_dim: int = 1, width: int = 50, out_dim: int = 10) -> list[tuple[int, int, str]]:
    """The 3-layer feature network used for the scalar synthetic benchmark."""
    return [(in_dim, width, "snake"), (width, width, "gelu"), (width, out_dim, "linear")]


def linear_arch(in_dim: int, out_dim: int) -> list[tuple[int, int, str]]:
    return [(in_dim, out_dim, "linear")]


# -- input maps -------------------------------------------------------------------


def input_width(tag: str) -> int:
    """Width of the encoded input for an input-map tag.

    Tags are ``"identity"`` (raw scalar), ``"sine_basis:K"`` (constant plus
    ``K`` scaled sines) and ``"onehot:N"`` (indicator of an integer in ``0..N-1``).
    """
    kind, _, arg = tag.partition(":")
    if kind == "identity" and not arg:
        return 1
    if kind == "sine_basis" and arg.isdigit():
        return int(arg) + 1
    if kind == "onehot" and arg.isdigit() and int(arg) > 0:
        return int(arg)
    raise ValueError(f"unknown input map {tag!r}")


def encode_inputs(tag: str, values) -> np.ndarray:
    width = input_width(tag)
    kind = tag.partition(":")[0]
    v = np.asarray(values)
    if kind == "identity":
        return np.asarray(v, dtype=np.float64).reshape(-1, 1) if v.ndim <= 1 else np.asarray(v, dtype=np.float64)
    if kind == "sine_basis":
        t = np.asarray(v, dtype=np.float64).reshape(-1)
        k = width - 1
        return np.hstack([np.ones((t.size, 1)), np.sqrt(2.0) * np.sin(np.outer(t, np.arange(1, k + 1)))])
    idx = np.asarray(v).reshape(-1)
    if not np.issubdtype(idx.dtype, np.integer) or np.any(idx < 0) or np.any(idx >= width):
        raise ValueError(f"one-hot inputs must be integers in [0, {width})")
    out = np.zeros((idx.size, width))
    out[np.arange(idx.size), idx] = 1.0
    return out


# -- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def zeros_like(cls, leaves: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in leaves], v=[np.zeros_like(a) for a in leaves], **hyper)


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None
) -> tuple[AdamState, list[np.ndarray]]:
    """One bias-corrected Adam update over a flat list of parameter arrays."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer buffers must align")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps_adam)
    return new_state, new_p


# -- checkpoints ----------------------------------------------------------------


def params_to_dict(params: MlpParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": [
            {
                "in": int(layer.weight.shape[0]),
                "out": int(layer.weight.shape[1]),
                "activation": layer.activation,
                "weight": [float(v) for v in layer.weight.ravel()],
                "bias": [float(v) for v in layer.bias],
            }
            for layer in params.layers
        ],
    }


def params_from_dict(obj: dict) -> MlpParams:
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unrecognised checkpoint format/version")
    layers = []
    for rec in obj["layers"]:
        w = np.array(rec["weight"], dtype=np.float64).reshape(rec["in"], rec["out"])
        layers.append(Layer(w, np.array(rec["bias"], dtype=np.float64), rec["activation"]))
    return MlpParams(layers)


def save_params(params: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_params(path) -> MlpParams:
    return params_from_dict(json.loads(Path(path).read_text()))
