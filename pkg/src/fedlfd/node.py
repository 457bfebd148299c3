"""Network node side: simulated teaching, local SGD updates and teacher profiles.

Nothing in this module is visible to the aggregator except :class:`LocalDelta`
and :class:`UserProfile` objects, which carry parameters and residual
statistics only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import LossKind, MlpModel, ParamVector, batch_loss_and_grad, sgd_step

GLOBAL_NODE = -1
DEFAULT_PROFILE_DIM = 8

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TeacherSpec:
    """Simulated human teacher.

    ``bias`` is either one vector applied to every model (padded or truncated
    to the model's output size) or a mapping ``model_id -> vector``.
    """

    id: int
    bias: np.ndarray | Mapping[int, Sequence[float]] = ()
    noise_scale: float = 0.0
    skill: float = 1.0
    cluster_tag: int | None = None

    def __post_init__(self):
        if not self.noise_scale >= 0:
            raise UsageError(f"teacher {self.id}: noise_scale must be >= 0")
        if not 0.0 <= self.skill <= 1.0:
            raise UsageError(f"teacher {self.id}: skill must lie in [0, 1]")
        if isinstance(self.bias, Mapping):
            object.__setattr__(self, "bias", {int(k): np.asarray(v, dtype=np.float64)
                                              for k, v in self.bias.items()})
        else:
            object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64).reshape(-1))

    def bias_for(self, model_id: int, dim: int) -> np.ndarray:
        b = self.bias.get(model_id, np.zeros(0)) if isinstance(self.bias, dict) else self.bias
        return _fit(b, dim)


def _fit(v: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros(dim)
    k = min(dim, v.size)
    out[:k] = v[:k]
    return out


@dataclass(frozen=True, eq=False)
class Demonstration:
    model_id: int
    teacher_id: int
    input: np.ndarray
    target: np.ndarray | int
    round_stamp: int = 0


@dataclass(frozen=True)
class LocalDelta:
    model_id: int
    node_id: int
    teacher_id: int
    delta: ParamVector
    sample_count: int
    staleness: int = 0
    base_center: int | None = None

    def __post_init__(self):
        if self.sample_count <= 0:
            raise UsageError("sample_count must be positive")

    @property
    def key(self) -> tuple[int, int]:
        return (self.node_id, self.teacher_id)


@dataclass(frozen=True, eq=False)
class UserProfile:
    """Residual-statistics embedding of one teacher at one node (or globally).

    The first half of ``embedding`` is the exponentially weighted mean
    residual per output dimension, the second half the matching weighted
    standard deviation.
    """

    teacher_id: int
    node_id: int = GLOBAL_NODE
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(DEFAULT_PROFILE_DIM))
    sample_count: int = 0
    residual_dim: int = 0

    def __post_init__(self):
        e = np.array(self.embedding, dtype=np.float64).reshape(-1)
        if e.size < 2 or e.size % 2:
            raise UsageError("profile dimension must be a positive even number")
        if not np.all(np.isfinite(e)):
            raise UsageError("profile embedding must be finite")
        e.flags.writeable = False
        object.__setattr__(self, "embedding", e)

    @property
    def dim(self) -> int:
        return self.embedding.size


def generate_demonstrations(teacher: TeacherSpec, model, ground_truth_policy: Policy, n: int,
                            seed: int | np.random.Generator, round_stamp: int = 0,
                            input_scale: float = 1.0) -> list[Demonstration]:
    """Draw ``n`` standard-normal inputs and label them the way ``teacher`` would.

    The demonstrated output is ``truth + (1 - skill) * bias + noise_scale * N(0, 1)``,
    which is the skill-weighted blend of the ideal output and the biased one.
    For classification models the blend acts on the logits and the target is
    its argmax.
    """
    if n <= 0:
        raise UsageError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = rng.standard_normal((n, model.n_inputs)) * input_scale
    truth = np.asarray(ground_truth_policy(X), dtype=np.float64).reshape(n, -1)
    if truth.shape[1] != model.n_outputs:
        raise ShapeError(f"policy output dimension {truth.shape[1]} != model output {model.n_outputs}")
    noise = rng.standard_normal(truth.shape)
    bias = teacher.bias_for(model.id, model.n_outputs)
    out = truth + (1.0 - teacher.skill) * bias + teacher.noise_scale * noise
    classify = model.loss is LossKind.CROSS_ENTROPY
    return [
        Demonstration(model.id, teacher.id, X[i],
                      int(np.argmax(out[i])) if classify else out[i], round_stamp)
        for i in range(n)
    ]


def stack(data: Sequence[Demonstration]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([d.input for d in data], dtype=np.float64)
    if isinstance(data[0].target, (int, np.integer)):
        Y = np.array([d.target for d in data], dtype=np.int64)
    else:
        Y = np.array([d.target for d in data], dtype=np.float64)
    return X, Y


def _single_source(data: Sequence[Demonstration]) -> tuple[int, int]:
    if not data:
        raise UsageError("data must not be empty")
    ids = {(d.model_id, d.teacher_id) for d in data}
    if len(ids) != 1:
        raise UsageError(f"data mixes model/teacher ids {sorted(ids)}")
    return ids.pop()


def local_update(global_model: MlpModel, data: Sequence[Demonstration], lr: float, epochs: int,
                 loss: LossKind | str = LossKind.MSE, batch_size: int = 8,
                 seed: int | np.random.Generator = 0, node_id: int = 0,
                 weight_decay: float = 0.0, staleness: int = 0) -> LocalDelta:
    """Mini-batch SGD from a copy of the global parameters; returns the parameter delta.

    The node's resulting local model is ``global_model.params + delta``, which
    is what :func:`local_params` reconstructs.
    """
    model_id, teacher_id = _single_source(data)
    if not lr > 0:
        raise UsageError(f"local learning rate must be positive, got {lr}")
    if epochs < 0 or batch_size <= 0:
        raise UsageError("epochs must be >= 0 and batch_size > 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X, Y = stack(data)
    start = global_model.params
    params = start
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(X), batch_size):
            idx = order[lo:lo + batch_size]
            _, grad = batch_loss_and_grad(global_model.with_params(params), X[idx], Y[idx],
                                          loss, weight_decay)
            params = sgd_step(params, grad, lr)
    return LocalDelta(model_id, node_id, teacher_id, params - start, len(X), staleness)


def local_params(base: ParamVector, delta: LocalDelta | ParamVector) -> ParamVector:
    d = delta.delta if isinstance(delta, LocalDelta) else delta
    return base + d


def residuals(data: Sequence[Demonstration], ground_truth_policy: Policy) -> np.ndarray:
    """Demonstrated minus ideal output; one-hot differences for class targets."""
    X, Y = stack(data)
    truth = np.asarray(ground_truth_policy(X), dtype=np.float64).reshape(len(X), -1)
    if Y.ndim == 1:
        k = truth.shape[1]
        return np.eye(k)[Y] - np.eye(k)[np.argmax(truth, axis=1)]
    return Y - truth


def update_profile(profile: UserProfile, data: Sequence[Demonstration], ground_truth_policy: Policy,
                   decay: float = 0.1) -> UserProfile:
    """Fold ``data`` into the teacher's exponentially weighted residual statistics."""
    _, teacher_id = _single_source(data)
    if teacher_id != profile.teacher_id:
        raise UsageError(f"data from teacher {teacher_id} cannot update profile of {profile.teacher_id}")
    if not 0 < decay <= 1:
        raise UsageError("decay must lie in (0, 1]")
    R = residuals(data, ground_truth_policy)
    if profile.residual_dim and R.shape[1] != profile.residual_dim:
        raise UsageError(f"residual dimension drifted from {profile.residual_dim} to {R.shape[1]}")
    half = profile.dim // 2
    mean = profile.embedding[:half].copy()
    var = profile.embedding[half:] ** 2
    count = profile.sample_count
    for r in R:
        r = _fit(r, half)
        if count == 0:
            mean, var = r, np.zeros(half)
        else:
            diff = r - mean
            mean = mean + decay * diff
            var = (1.0 - decay) * (var + decay * diff * diff)
        count += 1
    return UserProfile(profile.teacher_id, profile.node_id, np.concatenate([mean, np.sqrt(var)]),
                       count, R.shape[1])


@dataclass
class NodeState:
    """Everything one platform keeps locally, keyed by ``(model_id, teacher_id)``."""

    id: int
    buffer_size: int = 256
    datasets: dict[tuple[int, int], list[Demonstration]] = field(default_factory=dict)
    local_models: dict[tuple[int, int], ParamVector] = field(default_factory=dict)
    profiles: dict[tuple[int, int], UserProfile] = field(default_factory=dict)

    def store(self, data: Sequence[Demonstration]) -> None:
        if not data:
            return
        key = (data[0].model_id, data[0].teacher_id)
        buf = self.datasets.setdefault(key, [])
        buf.extend(data)
        if self.buffer_size and len(buf) > self.buffer_size:
            del buf[: len(buf) - self.buffer_size]

    def profile(self, model_id: int, teacher_id: int, dim: int = DEFAULT_PROFILE_DIM) -> UserProfile:
        return self.profiles.get((model_id, teacher_id),
                                 UserProfile(teacher_id, self.id, np.zeros(dim)))
