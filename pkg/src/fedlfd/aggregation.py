"""Server-side combination of local deltas into global models.

Four rules share one shape, ``W' = W + lr_g * Gamma``, and differ only in how
``Gamma`` weights the incoming deltas:

* ``fedavg`` -- unweighted mean.
* ``user_weighting`` -- each delta weighted by the inverse distance between
  the teacher's local and global profile.
* ``parameter_weighting`` -- per-parameter weights from a windowed
  correlation between that parameter's delta history and the teacher's
  profile trajectory.
* ``user_clustering`` -- several centers per model; each contributor moves
  only its nearest center.

Inputs are always sorted by ``(model, node, teacher)`` before summation so
results do not depend on arrival order.
"""

from __future__ import annotations

import enum
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SkipRoundWarning, UsageError
from .node import GLOBAL_NODE, LocalDelta, UserProfile
from .tensor import ParamVector

log = logging.getLogger(__name__)

Key = tuple[int, int]


class StrategyKind(str, enum.Enum):
    FEDAVG = "fedavg"
    USER_WEIGHTING = "user_weighting"
    PARAMETER_WEIGHTING = "parameter_weighting"
    USER_CLUSTERING = "user_clustering"


@dataclass(frozen=True)
class AggregationStrategy:
    kind: StrategyKind = StrategyKind.FEDAVG
    epsilon_floor: float = 1e-6
    window: int = 10
    min_window: int = 3
    inverse_sensitivity: bool = False
    n_centers: int = 2
    center_init_scale: float = 0.01
    warmup_rounds: int = 5
    weight_by_samples: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))

    def problems(self) -> list[str]:
        out = []
        if not self.epsilon_floor > 0:
            out.append("strategy.epsilon_floor must be > 0")
        if self.window < 2:
            out.append("strategy.window must be >= 2")
        if not 2 <= self.min_window <= self.window:
            out.append("strategy.min_window must lie in [2, window]")
        if self.n_centers < 1:
            out.append("strategy.n_centers must be >= 1")
        if self.center_init_scale < 0:
            out.append("strategy.center_init_scale must be >= 0")
        if self.warmup_rounds < 0:
            out.append("strategy.warmup_rounds must be >= 0")
        return out


def sort_deltas(deltas: Iterable[LocalDelta]) -> list[LocalDelta]:
    return sorted(deltas, key=lambda d: (d.model_id, d.node_id, d.teacher_id))


def _check_lengths(global_params: ParamVector, deltas: Sequence[LocalDelta]) -> None:
    ids = {d.model_id for d in deltas}
    if len(ids) > 1:
        raise UsageError(f"deltas for several models {sorted(ids)} passed to one aggregation")
    for d in deltas:
        if len(d.delta) != len(global_params):
            raise UsageError(f"delta from node {d.node_id}/teacher {d.teacher_id} has length "
                             f"{len(d.delta)}, model has {len(global_params)}")


def _skip(global_params: ParamVector, why: str) -> ParamVector:
    warnings.warn(why, SkipRoundWarning, stacklevel=3)
    return global_params


def weighted_gamma(deltas: Sequence[LocalDelta], weights: np.ndarray) -> np.ndarray:
    """``sum_i w_i * delta_i / sum_i w_i``; ``weights`` is (n,) or (n, n_params)."""
    D = np.stack([d.delta.values for d in deltas])
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        return (w[:, None] * D).sum(axis=0) / w.sum()
    total = w.sum(axis=0)
    plain = D.sum(axis=0) / len(D)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, (w * D).sum(axis=0) / safe, plain)


def fedavg_gamma(deltas: Sequence[LocalDelta], weight_by_samples: bool = False) -> np.ndarray:
    D = np.stack([d.delta.values for d in sort_deltas(deltas)])
    if weight_by_samples:
        n = np.array([d.sample_count for d in sort_deltas(deltas)], dtype=np.float64)
        return (n[:, None] * D).sum(axis=0) / n.sum()
    return D.sum(axis=0) / len(D)


def fedavg(global_params: ParamVector, deltas: Sequence[LocalDelta], lr_g: float = 1.0,
           weight_by_samples: bool = False) -> ParamVector:
    """Plain federated averaging; an empty delta list leaves the model unchanged."""
    if not deltas:
        return _skip(global_params, "fedavg received no deltas; round skipped")
    _check_lengths(global_params, deltas)
    gamma = fedavg_gamma(deltas, weight_by_samples)
    return global_params.with_values(global_params.values + lr_g * gamma)


def profile_distance(a: UserProfile, b: UserProfile) -> float:
    return float(np.linalg.norm(a.embedding - b.embedding))


def user_weights(deltas: Sequence[LocalDelta], profiles: Mapping[Key, UserProfile],
                 global_profiles: Mapping[int, UserProfile],
                 epsilon_floor: float = 1e-6) -> tuple[list[LocalDelta], np.ndarray]:
    """Inverse profile-distance weight for every delta that has a local profile.

    Deltas without a local profile are dropped with a warning. A teacher with
    no global profile yet is compared against its own local profile, i.e. it
    gets the capped weight ``1 / epsilon_floor``.
    """
    kept, weights = [], []
    for d in sort_deltas(deltas):
        local = profiles.get(d.key)
        if local is None:
            warnings.warn(f"no profile for node {d.node_id}/teacher {d.teacher_id}; delta excluded")
            continue
        ref = global_profiles.get(d.teacher_id, local)
        kept.append(d)
        weights.append(1.0 / max(profile_distance(ref, local), epsilon_floor))
    return kept, np.array(weights)


def user_weighting(global_params: ParamVector, deltas: Sequence[LocalDelta],
                   profiles: Mapping[Key, UserProfile], global_profiles: Mapping[int, UserProfile],
                   lr_g: float = 1.0, epsilon_floor: float = 1e-6) -> ParamVector:
    kept, w = user_weights(deltas, profiles, global_profiles, epsilon_floor)
    if not kept:
        return _skip(global_params, "user_weighting has no profiled deltas; round skipped")
    _check_lengths(global_params, kept)
    return global_params.with_values(global_params.values + lr_g * weighted_gamma(kept, w))


def _pearson_abs(D: np.ndarray, s: np.ndarray) -> np.ndarray:
    """|corr(D[:, p], s)| per column; columns with zero variance give 0."""
    Dc = D - D.mean(axis=0)
    sc = s - s.mean()
    ss_d = (Dc * Dc).sum(axis=0)
    ss_s = float(sc @ sc)
    # spread at rounding level counts as constant
    flat_d = ss_d <= len(D) * (1e-12 * np.abs(D).max(axis=0)) ** 2
    r = np.zeros(D.shape[1])
    if ss_s <= len(s) * (1e-12 * np.abs(s).max()) ** 2:
        return r
    ok = ~flat_d
    r[ok] = np.abs((Dc.T @ sc)[ok] / np.sqrt(ss_d[ok] * ss_s))
    return np.minimum(r, 1.0)


def principal_scores(embeddings: np.ndarray) -> np.ndarray:
    """Projection of each (centered) embedding onto the first principal direction."""
    E = embeddings - embeddings.mean(axis=0)
    if not np.any(E):
        return np.zeros(len(E))
    _, _, vt = np.linalg.svd(E, full_matrices=False)
    return E @ vt[0]


def sensitivity(window: Sequence[tuple[UserProfile, LocalDelta]], inverse: bool = False) -> np.ndarray:
    """Per-parameter sensitivity of one contributor over its history window."""
    E = np.stack([p.embedding for p, _ in window])
    D = np.stack([d.delta.values for _, d in window])
    r = _pearson_abs(D, principal_scores(E))
    return 1.0 - r if inverse else r


def sensitivity_weights(deltas: Sequence[LocalDelta],
                        history: Mapping[Key, Sequence[tuple[UserProfile, LocalDelta]]],
                        min_window: int = 3, inverse: bool = False) -> np.ndarray:
    """Weight matrix (n_deltas, n_params); short histories fall back to uniform ones."""
    rows = []
    for d in sort_deltas(deltas):
        window = history.get(d.key, ())
        if len(window) >= min_window:
            rows.append(sensitivity(window, inverse))
        else:
            rows.append(np.ones(len(d.delta)))
    return np.stack(rows)


def parameter_weighting(global_params: ParamVector, deltas: Sequence[LocalDelta],
                        history: Mapping[Key, Sequence[tuple[UserProfile, LocalDelta]]],
                        lr_g: float = 1.0, min_window: int = 3, inverse: bool = False,
                        weights: np.ndarray | None = None) -> ParamVector:
    """Elementwise sensitivity-weighted mean of deltas.

    ``history[(node, teacher)]`` holds that contributor's recent
    ``(profile, delta)`` pairs, the current round included. Pass ``weights``
    to bypass the sensitivity estimate with an explicit (n, n_params) matrix.
    """
    if not deltas:
        return _skip(global_params, "parameter_weighting received no deltas; round skipped")
    _check_lengths(global_params, deltas)
    ordered = sort_deltas(deltas)
    if weights is None:
        if all(len(history.get(d.key, ())) < 2 for d in ordered):
            warnings.warn("no contributor has a history window of 2 or more; using fedavg")
            return fedavg(global_params, ordered, lr_g)
        weights = sensitivity_weights(ordered, history, min_window, inverse)
    gamma = weighted_gamma(ordered, weights)
    return global_params.with_values(global_params.values + lr_g * gamma)


@dataclass
class ClusterState:
    """Centers of one model and the center index assigned to each ``(node, teacher)``.

    Center indices are 0-based.
    """

    model_id: int
    centers: list[ParamVector]
    assignment: dict[Key, int] = field(default_factory=dict)

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    def members(self, center: int) -> list[Key]:
        return sorted(k for k, c in self.assignment.items() if c == center)


def init_cluster_state(model_id: int, initial: ParamVector, n_centers: int,
                       seed: int | np.random.Generator, scale: float = 0.01) -> ClusterState:
    """``n_centers`` Gaussian-perturbed copies of ``initial`` (sigma = scale * RMS of initial)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = scale * float(np.sqrt(np.mean(initial.values ** 2)))
    centers = [initial.with_values(initial.values + sigma * rng.standard_normal(len(initial)))
               for _ in range(n_centers)]
    return ClusterState(model_id, centers)


def nearest_center(centers: Sequence[ParamVector], params: ParamVector) -> int:
    dists = [float(np.linalg.norm(params.values - c.values)) for c in centers]
    return int(np.argmin(dists))  # argmin returns the first minimum: ties go to the lowest index


def cluster_assign(state: ClusterState, local_models: Mapping[Key, ParamVector]) -> ClusterState:
    assignment = dict(state.assignment)
    for key in sorted(local_models):
        assignment[key] = nearest_center(state.centers, local_models[key])
    return ClusterState(state.model_id, list(state.centers), assignment)


def cluster_update(state: ClusterState, deltas: Sequence[LocalDelta], lr_g: float = 1.0) -> ClusterState:
    """Move each center by ``lr_g`` times the mean delta of its members.

    Deltas must be expressed relative to the center their contributor is
    assigned to. Centers without members stay where they are.
    """
    groups: dict[int, list[LocalDelta]] = {}
    for d in sort_deltas(deltas):
        if d.key not in state.assignment:
            raise UsageError(f"node {d.node_id}/teacher {d.teacher_id} has no cluster assignment")
        groups.setdefault(state.assignment[d.key], []).append(d)
    if not groups:
        warnings.warn("every cluster is empty; round skipped", SkipRoundWarning, stacklevel=2)
        return state
    centers = list(state.centers)
    for eta, members in groups.items():
        centers[eta] = fedavg(centers[eta], members, lr_g)
    return ClusterState(state.model_id, centers, dict(state.assignment))


def update_global_profile(global_profiles: Mapping[int, UserProfile],
                          local_profiles: Iterable[UserProfile]) -> dict[int, UserProfile]:
    """Sample-count-weighted mean of the reported local profiles, per teacher.

    Teachers with no report keep their previous global profile (or stay absent).
    """
    out = dict(global_profiles)
    by_teacher: dict[int, list[UserProfile]] = {}
    for p in sorted(local_profiles, key=lambda p: (p.teacher_id, p.node_id)):
        by_teacher.setdefault(p.teacher_id, []).append(p)
    for m, group in by_teacher.items():
        n = np.array([p.sample_count for p in group], dtype=np.float64)
        E = np.stack([p.embedding for p in group])
        w = n if n.sum() > 0 else np.ones(len(group))
        out[m] = UserProfile(m, GLOBAL_NODE, (w[:, None] * E).sum(axis=0) / w.sum(),
                             int(n.sum()), max(p.residual_dim for p in group))
    return out


@dataclass
class ModelAggregator:
    """Aggregator-side state for one global model across rounds.

    Holds only parameters, deltas and profiles; raw demonstrations never
    reach this object.
    """

    model_id: int
    strategy: AggregationStrategy
    params: ParamVector
    clusters: ClusterState | None = None
    history: dict[Key, deque] = field(default_factory=dict)
    profile_cache: dict[Key, UserProfile] = field(default_factory=dict)
    global_profiles: dict[int, UserProfile] = field(default_factory=dict)
    rounds_seen: int = 0

    @classmethod
    def create(cls, model_id: int, initial: ParamVector, strategy: AggregationStrategy,
               seed: int) -> "ModelAggregator":
        clusters = None
        if strategy.kind is StrategyKind.USER_CLUSTERING:
            clusters = init_cluster_state(model_id, initial, strategy.n_centers, seed,
                                          strategy.center_init_scale)
        return cls(model_id, strategy, initial, clusters)

    def aggregate(self, deltas: Sequence[LocalDelta], profiles: Mapping[Key, UserProfile],
                  lr_g: float, local_models: Mapping[Key, ParamVector] | None = None) -> dict:
        """Apply the configured rule to one round of deltas; returns diagnostics."""
        s = self.strategy
        deltas = sort_deltas(deltas)
        diag: dict = {"strategy": s.kind.value, "n_deltas": len(deltas)}
        self.profile_cache.update(profiles)
        for d in deltas:
            if d.key in profiles:
                window = self.history.setdefault(d.key, deque(maxlen=s.window))
                window.append((profiles[d.key], d))
        self.rounds_seen += 1
        if not deltas:
            diag["skipped"] = True
            log.info("model %d: no deltas this round", self.model_id)
            return diag

        before = self.params
        if s.kind is StrategyKind.FEDAVG:
            self.params = fedavg(self.params, deltas, lr_g, s.weight_by_samples)
        elif s.kind is StrategyKind.USER_WEIGHTING:
            kept, w = user_weights(deltas, profiles, self.global_profiles, s.epsilon_floor)
            diag["weights"] = [[d.node_id, d.teacher_id, float(x)] for d, x in zip(kept, w / w.sum())]
            self.params = user_weighting(self.params, deltas, profiles, self.global_profiles,
                                         lr_g, s.epsilon_floor)
        elif s.kind is StrategyKind.PARAMETER_WEIGHTING:
            if any(len(self.history.get(d.key, ())) >= 2 for d in deltas):
                W = sensitivity_weights(deltas, self.history, s.min_window, s.inverse_sensitivity)
                diag["mean_sensitivity"] = float(W.mean())
                self.params = parameter_weighting(self.params, deltas, self.history, lr_g,
                                                  weights=W)
            else:
                diag["fallback"] = "fedavg"
                self.params = fedavg(self.params, deltas, lr_g)
        else:
            self._cluster_round(deltas, lr_g, local_models or {}, diag)
        self.global_profiles = update_global_profile(self.global_profiles, profiles.values())
        diag["update_norm"] = (self.params - before).norm()
        return diag

    def _cluster_round(self, deltas, lr_g, local_models, diag) -> None:
        state = self.clusters
        assert state is not None
        missing = [d.key for d in deltas if d.key not in local_models]
        if missing:
            raise UsageError(f"user_clustering needs local models for {missing}")
        state = cluster_assign(state, {d.key: local_models[d.key] for d in deltas})
        if self.rounds_seen <= self.strategy.warmup_rounds:
            # warm-up: every center takes the same plain average so they stay together
            gamma = fedavg_gamma(deltas)
            centers = [c.with_values(c.values + lr_g * gamma) for c in state.centers]
            state = ClusterState(state.model_id, centers, state.assignment)
            diag["warmup"] = True
        else:
            rebased = [
                LocalDelta(d.model_id, d.node_id, d.teacher_id,
                           local_models[d.key] - state.centers[state.assignment[d.key]],
                           d.sample_count, d.staleness, state.assignment[d.key])
                for d in deltas
            ]
            state = cluster_update(state, rebased, lr_g)
        self.clusters = state
        diag["assignments"] = [[l, m, state.assignment[(l, m)]] for l, m in
                               sorted(d.key for d in deltas)]
        counts = np.bincount([state.assignment[k] for k in state.assignment],
                             minlength=state.n_centers).astype(np.float64)
        w = counts / counts.sum()
        self.params = state.centers[0].with_values(
            sum(wi * c.values for wi, c in zip(w, state.centers)))
