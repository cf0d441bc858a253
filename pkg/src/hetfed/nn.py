"""Dense ReLU networks with analytic backprop, flattening and optimizers.

Parameters live in a single float64 vector. The layout is layer-major and
row-major inside each layer::

    [W_0 (out_0 x in_0, row-major), b_0, W_1, b_1, ..., W_{L-1}, b_{L-1}]

so entry ``W_k[r, c]`` sits at ``offset_k + r * in_k + c`` and ``b_k[r]`` at
``offset_k + out_k * in_k + r``, where ``offset_k`` is the total size of the
preceding layers. Hidden layers use ReLU, the output layer is linear (logits).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid model or optimizer configuration."""


def n_params(layer_dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _check_dims(layer_dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ConfigError(f"need at least an input and an output dim, got {list(dims)}")
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {list(dims)}")
    return dims


@dataclass(frozen=True)
class ModelParams:
    """Weights of one MLP as a flat vector plus its layer dims."""

    layer_dims: tuple[int, ...]
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", _check_dims(self.layer_dims))
        flat = np.asarray(self.flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != n_params(self.layer_dims):
            raise ValueError(
                f"flat vector of length {flat.size} does not match dims "
                f"{list(self.layer_dims)} ({n_params(self.layer_dims)} params)"
            )
        object.__setattr__(self, "flat", flat)

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``flat``; W has shape (out, in)."""
        out = []
        off = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = self.flat[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            b = self.flat[off:off + fan_out]
            off += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.layer_dims, self.flat.copy())

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.layer_dims, flat)


def init_mlp(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """He-uniform weights, zero biases; deterministic in ``seed``."""
    dims = _check_dims(layer_dims)
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(dims, np.concatenate(chunks))


def from_layers(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> ModelParams:
    dims = [np.shape(layers[0][0])[1]]
    chunks = []
    for w, b in layers:
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape[1] != dims[-1] or b.shape != (w.shape[0],):
            raise ConfigError("layer shapes do not chain")
        dims.append(w.shape[0])
        chunks += [w.ravel(), b]
    return ModelParams(tuple(dims), np.concatenate(chunks))


def flatten(params: ModelParams) -> np.ndarray:
    return params.flat.copy()


def unflatten(vector: np.ndarray, layer_dims: Sequence[int]) -> ModelParams:
    vector = np.asarray(vector, dtype=np.float64)
    expected = n_params(_check_dims(layer_dims))
    if vector.shape != (expected,):
        raise ValueError(f"expected a vector of length {expected}, got shape {vector.shape}")
    return ModelParams(tuple(layer_dims), vector.copy())


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]   # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each hidden layer
    layer_dims: tuple[int, ...]


def forward(params: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ValueError(f"input shape {x.shape} incompatible with input dim {params.layer_dims[0]}")
    inputs, preacts = [], []
    h = x
    layers = params.layers
    for k, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w.T + b
        if k < len(layers) - 1:
            preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h, ForwardCache(inputs, preacts, params.layer_dims)


def hidden_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Activations of the last hidden layer (the raw input for a 1-layer net)."""
    _, cache = forward(params, x)
    if not cache.preacts:
        return np.asarray(x, dtype=np.float64)
    return np.maximum(cache.preacts[-1], 0.0)


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(logits * dlogits)`` w.r.t. the flat parameter vector."""
    if cache.layer_dims != params.layer_dims:
        raise ValueError("cache was produced by a model with different dims")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    batch = cache.inputs[0].shape[0]
    if dlogits.shape != (batch, params.n_classes):
        raise ValueError(f"dlogits shape {dlogits.shape} != {(batch, params.n_classes)}")
    layers = params.layers
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    delta = dlogits
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        grads[2 * k] = (delta.T @ cache.inputs[k]).ravel()
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ w) * (cache.preacts[k - 1] > 0)
    return np.concatenate(grads)


def finite_diff_gradient(loss_fn: Callable, params, h: float = 1e-5) -> np.ndarray:
    """Central differences over every coordinate.

    ``params`` may be a ModelParams (loss_fn then receives ModelParams) or a
    plain vector (loss_fn receives the perturbed vector).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    is_model = isinstance(params, ModelParams)
    base = params.flat if is_model else np.asarray(params, dtype=np.float64)
    wrap = (lambda v: ModelParams(params.layer_dims, v)) if is_model else (lambda v: v)
    grad = np.empty_like(base)
    work = base.copy()
    for i in range(base.size):
        orig = work[i]
        work[i] = orig + h
        up = loss_fn(wrap(work.copy()))
        work[i] = orig - h
        down = loss_fn(wrap(work.copy()))
        work[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


# -- optimizers -----------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD or AMSGrad state over a flat parameter vector.

    AMSGrad follows Reddi et al. (no bias correction): the step is
    ``lr * m / (sqrt(v_hat) + eps)`` with ``v_hat`` the running max of ``v``.
    Weight decay is added to the gradient as an L2 term.
    """

    kind: str = "amsgrad"
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    v_hat: np.ndarray | None = field(default=None, repr=False)
    steps: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "amsgrad"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")

    def copy(self) -> "OptimizerState":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return OptimizerState(self.kind, self.lr, self.weight_decay, self.beta1, self.beta2,
                              self.eps, cp(self.m), cp(self.v), cp(self.v_hat), self.steps)


def optimizer_step(params: ModelParams, grad: np.ndarray, state: OptimizerState) -> ModelParams:
    """Apply one update; mutates ``state`` and returns new params."""
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise ValueError(f"gradient length {grad.size} != parameter count {params.size}")
    theta = params.flat
    g = grad + state.weight_decay * theta if state.weight_decay else grad
    state.steps += 1
    if state.kind == "sgd":
        return params.with_flat(theta - state.lr * g)
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
        state.v_hat = np.zeros_like(theta)
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    state.v_hat = np.maximum(state.v_hat, state.v)
    return params.with_flat(theta - state.lr * state.m / (np.sqrt(state.v_hat) + state.eps))


# -- checkpoint files -----------------------------------------------------
# Layout (little-endian): b"MLPW", u32 version=1, u32 n_dims, u32 dims[n_dims],
# then f64 params[n_params(dims)] in the flat order described above.

_MAGIC = b"MLPW"


def save_params(params: ModelParams, path) -> None:
    header = _MAGIC + struct.pack("<II", 1, len(params.layer_dims))
    header += struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, n_dims = struct.unpack_from("<II", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{n_dims}I", raw, 12)
    start = 12 + 4 * n_dims
    body = np.frombuffer(raw, dtype="<f8", offset=start)
    if body.size != n_params(dims):
        raise ValueError(f"{path}: truncated checkpoint")
    return ModelParams(dims, body.astype(np.float64))
