"""Flat parameter vectors, a small feed-forward network and hand-derived backprop.

Everything runs in float64. A model's parameters are one flat
:class:`ParamVector`; ``shape_meta`` records how consecutive slices map onto
layer weight matrices and bias columns, in order::

    ("layer0.weight", out, in), ("layer0.bias", out, 1), ("layer1.weight", ...)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

LayerMeta = tuple[str, int, int]


class LossKind(str, enum.Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat float64 vector with layer layout metadata.

    The constructor copies ``values`` and marks the copy read-only, so no
    operation can mutate a vector another party holds.
    """

    values: np.ndarray
    shape_meta: tuple[LayerMeta, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        meta = tuple((str(n), int(r), int(c)) for n, r, c in self.shape_meta)
        if meta:
            expected = sum(r * c for _, r, c in meta)
            if expected != v.size:
                raise ShapeError(f"shape_meta describes {expected} values, got {v.size}")
            names = [n for n, _, _ in meta]
            if len(set(names)) != len(names):
                raise ShapeError("duplicate layer names in shape_meta")
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise NumericError("non-finite parameter value", layer=_locate(meta, bad))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "shape_meta", meta)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ParamVector(n={len(self)}, layers={[m[0] for m in self.shape_meta]})"

    @classmethod
    def zeros(cls, shape_meta: Sequence[LayerMeta]) -> "ParamVector":
        return cls(np.zeros(sum(r * c for _, r, c in shape_meta)), tuple(shape_meta))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.shape_meta)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shape_meta)

    def layer_slice(self, name: str) -> slice:
        start = 0
        for n, r, c in self.shape_meta:
            if n == name:
                return slice(start, start + r * c)
            start += r * c
        raise KeyError(name)

    def layer(self, name: str) -> np.ndarray:
        for n, r, c in self.shape_meta:
            if n == name:
                return self.values[self.layer_slice(name)].reshape(r, c)
        raise KeyError(name)

    def _check_compatible(self, other: "ParamVector"):
        if len(self) != len(other):
            raise UsageError(f"parameter length mismatch: {len(self)} vs {len(other)}")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values + other.values, self.shape_meta)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_compatible(other)
        return ParamVector(self.values - other.values, self.shape_meta)

    def scale(self, factor: float) -> "ParamVector":
        return ParamVector(self.values * factor, self.shape_meta)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def equals(self, other: "ParamVector") -> bool:
        """Bitwise equality of values and identical layout."""
        return self.shape_meta == other.shape_meta and np.array_equal(self.values, other.values)


def _locate(meta: Sequence[LayerMeta], index: int) -> str | None:
    start = 0
    for n, r, c in meta:
        if index < start + r * c:
            return n
        start += r * c
    return None


def mlp_shape_meta(layer_sizes: Sequence[int], use_bias: bool = True) -> tuple[LayerMeta, ...]:
    meta: list[LayerMeta] = []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        meta.append((f"layer{i}.weight", fan_out, fan_in))
        if use_bias:
            meta.append((f"layer{i}.bias", fan_out, 1))
    return tuple(meta)


def init_params(layer_sizes: Sequence[int], seed: int | np.random.Generator,
                use_bias: bool = True) -> ParamVector:
    """Uniform(-0.5, 0.5) / sqrt(fan_in) for every weight and bias entry."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-0.5, 0.5, size=fan_out * fan_in) * scale)
        if use_bias:
            chunks.append(rng.uniform(-0.5, 0.5, size=fan_out) * scale)
    return ParamVector(np.concatenate(chunks), mlp_shape_meta(layer_sizes, use_bias))


@dataclass(frozen=True)
class MlpModel:
    """Fully connected network; ``activation`` applies to hidden layers, the output is linear."""

    layer_sizes: tuple[int, ...]
    params: ParamVector
    activation: Activation = Activation.TANH
    use_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise UsageError(f"layer_sizes must hold at least two positive sizes, got {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        expected = mlp_shape_meta(sizes, self.use_bias)
        if self.params.shape_meta != expected:
            if len(self.params) != sum(r * c for _, r, c in expected):
                raise ShapeError(f"{len(self.params)} parameters do not fit layer_sizes {sizes}")
            object.__setattr__(self, "params", ParamVector(self.params.values, expected))

    @classmethod
    def create(cls, layer_sizes: Sequence[int], seed: int = 0,
               activation: Activation | str = Activation.TANH, use_bias: bool = True) -> "MlpModel":
        return cls(tuple(layer_sizes), init_params(layer_sizes, seed, use_bias),
                   Activation(activation), use_bias)

    def with_params(self, params: ParamVector) -> "MlpModel":
        return MlpModel(self.layer_sizes, params, self.activation, self.use_bias)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            w = self.params.layer(f"layer{i}.weight")
            b = self.params.layer(f"layer{i}.bias")[:, 0] if self.use_bias else np.zeros(fan_out)
            out.append((w, b))
        return out


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _activate_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return 1.0 - a * a
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def _as_inputs(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.n_inputs:
        raise ShapeError(f"expected input of dimension {model.n_inputs}, got shape {x.shape}")
    return x


def _forward_trace(model: MlpModel, X: np.ndarray):
    zs, acts = [], [X]
    layers = model.layers()
    a = X
    for i, (w, b) in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ w.T + b
        a = z if i == len(layers) - 1 else _activate(model.activation, z)
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite activation", layer=f"layer{i}")
        zs.append(z)
        acts.append(a)
    return zs, acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Network output for one input vector, or row-wise for a 2-D batch."""
    x = _as_inputs(model, x)
    _, acts = _forward_trace(model, np.atleast_2d(x))
    return acts[-1][0] if x.ndim == 1 else acts[-1]


def _split_batch(batch: Iterable) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(batch)
    if not pairs:
        raise UsageError("batch must not be empty")
    X = np.array([np.asarray(p[0], dtype=np.float64) for p in pairs])
    Y = np.array([np.asarray(p[1]) for p in pairs])
    return X, Y


def loss_and_grad(model: MlpModel, batch, loss: LossKind | str = LossKind.MSE,
                  weight_decay: float = 0.0) -> tuple[float, ParamVector]:
    """Mean loss over ``batch`` and its gradient with respect to every parameter.

    ``batch`` is a sequence of ``(input, target)`` pairs. For ``mse`` the loss is
    the batch mean of the per-sample squared error summed over outputs; for
    ``cross_entropy`` targets are class indices and the outputs are logits.
    """
    X, Y = _split_batch(batch)
    return batch_loss_and_grad(model, X, Y, loss, weight_decay)


def _check_targets(model: MlpModel, X: np.ndarray, Y: np.ndarray, loss: LossKind) -> np.ndarray:
    if loss is LossKind.MSE:
        Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
        if Y.shape[1] != model.n_outputs:
            raise ShapeError(f"target dimension {Y.shape[1]} != output dimension {model.n_outputs}")
        return Y
    Y = np.asarray(Y).reshape(-1)
    if Y.size != len(X):
        raise ShapeError("cross_entropy expects one class index per sample")
    as_int = Y.astype(np.int64)
    if not np.array_equal(as_int, Y) or np.any(as_int < 0) or np.any(as_int >= model.n_outputs):
        raise ShapeError(f"class indices must lie in [0, {model.n_outputs})")
    return as_int


def batch_loss_and_grad(model: MlpModel, X, Y, loss: LossKind | str = LossKind.MSE,
                        weight_decay: float = 0.0) -> tuple[float, ParamVector]:
    """Array form of :func:`loss_and_grad`: ``X`` is (n, in), ``Y`` is (n, out) or (n,) indices."""
    # overflow is detected explicitly below and reported with its layer
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_grad(model, X, Y, LossKind(loss), weight_decay)


def _loss_and_grad(model: MlpModel, X, Y, loss: LossKind, weight_decay: float) -> tuple[float, ParamVector]:
    X = np.atleast_2d(_as_inputs(model, X))
    if len(X) == 0:
        raise UsageError("batch must not be empty")
    Y = _check_targets(model, X, Y, loss)
    n = len(X)
    zs, acts = _forward_trace(model, X)
    out = acts[-1]

    if loss is LossKind.MSE:
        resid = out - Y
        value = float(np.sum(resid * resid) / n)
        dz = 2.0 * resid / n
    else:
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        value = float(-logp[np.arange(n), Y].mean())
        dz = np.exp(logp)
        dz[np.arange(n), Y] -= 1.0
        dz /= n
    if not np.isfinite(value):
        raise NumericError("non-finite loss", layer="output")

    layers = model.layers()
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[2 * i] = dz.T @ acts[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            da = dz @ w
            dz = da * _activate_grad(model.activation, zs[i - 1], acts[i])
            if not np.all(np.isfinite(dz)):
                raise NumericError("non-finite gradient", layer=f"layer{i - 1}")
    flat = np.concatenate([g.reshape(-1) for k, g in enumerate(grads)
                           if model.use_bias or k % 2 == 0])
    if weight_decay:
        value += 0.5 * weight_decay * float(model.params.values @ model.params.values)
        flat = flat + weight_decay * model.params.values
    return value, ParamVector(flat, model.params.shape_meta)


def predict_classes(model: MlpModel, X) -> np.ndarray:
    return np.argmax(forward(model, np.atleast_2d(X)), axis=1)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """``params - lr * grad`` as a new vector."""
    if not lr > 0:
        raise UsageError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grad):
        raise UsageError(f"parameter length mismatch: {len(params)} vs {len(grad)}")
    return ParamVector(params.values - lr * grad.values, params.shape_meta)


def evaluate_loss(model: MlpModel, X, Y, loss: LossKind | str = LossKind.MSE) -> float:
    """Mean loss without the gradient pass."""
    loss = LossKind(loss)
    X = np.atleast_2d(_as_inputs(model, X))
    Y = _check_targets(model, X, Y, loss)
    out = forward(model, X)
    if loss is LossKind.MSE:
        return float(np.sum((out - Y) ** 2) / len(X))
    shifted = out - out.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(X)), Y].mean())
