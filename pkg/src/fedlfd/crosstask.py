"""Couplings between global models: transfer alignment, multi-task precision matrix, meta-learning.

All three act on the aggregator's global parameters after the per-model
aggregation step of a round.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .node import Demonstration, NodeState, stack
from .tensor import LossKind, MlpModel, ParamVector, batch_loss_and_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferPairSpec:
    """Two models whose listed layers should stay close, with weight ``mu``."""

    model_a: int
    model_b: int
    shared_layers: tuple[str, ...]
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shared_layers", tuple(self.shared_layers))
        if self.weight < 0:
            raise UsageError("transfer weight must be >= 0")


def span_indices(params: ParamVector, layers: Sequence[str]) -> np.ndarray:
    parts = []
    for name in layers:
        sl = params.layer_slice(name)
        parts.append(np.arange(sl.start, sl.stop))
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def check_pairs(pairs: Sequence[TransferPairSpec], models: Mapping[int, ParamVector]) -> None:
    problems = []
    for p in pairs:
        for mid in (p.model_a, p.model_b):
            if mid not in models:
                problems.append(f"transfer pair ({p.model_a}, {p.model_b}): unknown model {mid}")
        if problems:
            continue
        a, b = models[p.model_a], models[p.model_b]
        for name in p.shared_layers:
            try:
                if a.layer(name).shape != b.layer(name).shape:
                    problems.append(f"transfer pair ({p.model_a}, {p.model_b}): layer {name} "
                                    f"shapes {a.layer(name).shape} vs {b.layer(name).shape}")
            except KeyError:
                problems.append(f"transfer pair ({p.model_a}, {p.model_b}): no layer {name}")
    if problems:
        raise ConfigError(problems)


def alignment_loss_and_grad(pairs: Sequence[TransferPairSpec], models: Mapping[int, ParamVector]
                            ) -> tuple[float, dict[int, ParamVector]]:
    """``sum mu * ||W_a[span] - W_b[span]||^2`` and its gradient for every model in ``models``."""
    check_pairs(pairs, models)
    grads = {k: np.zeros(len(v)) for k, v in models.items()}
    total = 0.0
    for p in pairs:
        a, b = models[p.model_a], models[p.model_b]
        ia, ib = span_indices(a, p.shared_layers), span_indices(b, p.shared_layers)
        diff = a.values[ia] - b.values[ib]
        total += p.weight * float(diff @ diff)
        grads[p.model_a][ia] += 2.0 * p.weight * diff
        grads[p.model_b][ib] -= 2.0 * p.weight * diff
    return total, {k: models[k].with_values(g) for k, g in grads.items()}


@dataclass
class MultiTaskState:
    """Precision matrix coupling the member models, stored with its inverse."""

    members: tuple[int, ...]
    omega: np.ndarray
    lam: float
    omega_inv: np.ndarray | None = None
    learn_omega: bool = True

    def __post_init__(self):
        self.members = tuple(self.members)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        k = len(self.members)
        if self.omega.shape != (k, k):
            raise UsageError(f"omega must be {k}x{k}")
        if self.lam < 0:
            raise UsageError("lambda must be >= 0")
        if self.omega_inv is None:
            self.omega_inv = np.linalg.inv(self.omega)

    @classmethod
    def initial(cls, members: Sequence[int], lam: float, omega: np.ndarray | None = None) -> "MultiTaskState":
        """Uniform start ``omega = k * I`` (so ``trace(omega^-1) = 1``), or a fixed a-priori matrix."""
        k = len(members)
        if omega is None:
            return cls(tuple(members), k * np.eye(k), lam, np.eye(k) / k)
        return cls(tuple(members), np.asarray(omega, dtype=np.float64), lam, learn_omega=False)

    def stacked(self, models: Mapping[int, ParamVector]) -> np.ndarray:
        lengths = {len(models[m]) for m in self.members}
        if len(lengths) != 1:
            raise UsageError(f"multi-task members need one parameter length, got {sorted(lengths)}")
        return np.stack([models[m].values for m in self.members], axis=1)


def check_omega(omega: np.ndarray, omega_inv: np.ndarray, trace_tol: float = 1e-9) -> list[str]:
    problems = []
    if not np.all(np.isfinite(omega)):
        return ["omega has non-finite entries"]
    if np.max(np.abs(omega - omega.T)) > 1e-12 * max(1.0, np.abs(omega).max()):
        problems.append("omega is not symmetric")
    if np.linalg.eigvalsh(omega_inv).min() < -1e-10:
        problems.append("omega^-1 is not positive semidefinite")
    if abs(np.trace(omega_inv) - 1.0) > trace_tol:
        problems.append(f"trace(omega^-1) = {np.trace(omega_inv)!r} != 1")
    return problems


def multitask_penalty_and_grad(state: MultiTaskState, models: Mapping[int, ParamVector]
                               ) -> tuple[float, dict[int, ParamVector]]:
    """``lam/2 * tr(A Omega A^T)`` with A's columns the member models, and ``lam * A Omega``."""
    if np.linalg.eigvalsh(state.omega).min() < -1e-10:
        raise NumericError("precision matrix is not positive semidefinite", layer="omega")
    A = state.stacked(models)
    AO = A @ state.omega
    value = 0.5 * state.lam * float(np.sum(AO * A))
    G = 0.5 * state.lam * (AO + A @ state.omega.T)
    grads = {k: v.zeros_like() for k, v in models.items()}
    for j, m in enumerate(state.members):
        grads[m] = models[m].with_values(G[:, j])
    return value, grads


def multitask_objective(state: MultiTaskState, models: Mapping[int, ParamVector],
                        ridge: float = 0.0) -> float:
    """Penalty including the ridge term, ``lam/2 * tr((A^T A + ridge I) Omega)``.

    This is the quantity :func:`update_omega` minimises exactly over Omega, so
    alternating it with descent steps in A never increases it.
    """
    A = state.stacked(models)
    gram = A.T @ A + ridge * np.eye(A.shape[1])
    return 0.5 * state.lam * float(np.sum(gram * state.omega))


def update_omega(state: MultiTaskState, models: Mapping[int, ParamVector],
                 ridge: float = 1e-8) -> MultiTaskState:
    """Closed-form minimiser of ``tr(A Omega A^T)`` over ``Omega^-1 >= 0, tr(Omega^-1) = 1``.

    ``Omega^-1 = (A^T A + ridge I)^(1/2) / tr(...)``. If the matrix root or
    the inversion fails the previous matrix is kept and a warning raised.
    """
    if not state.learn_omega:
        return state
    A = state.stacked(models)
    k = A.shape[1]
    try:
        vals, vecs = np.linalg.eigh(A.T @ A + ridge * np.eye(k))
        if vals.min() <= 0 or not np.all(np.isfinite(vals)):
            raise np.linalg.LinAlgError("Gram matrix not positive definite")
        root_vals = np.sqrt(vals)
        sigma = (vecs * (root_vals / root_vals.sum())) @ vecs.T
        sigma = 0.5 * (sigma + sigma.T)
        sigma /= np.trace(sigma)
        omega = (vecs / (root_vals / root_vals.sum())) @ vecs.T
        omega = 0.5 * (omega + omega.T)
    except np.linalg.LinAlgError as exc:
        warnings.warn(f"omega update failed ({exc}); keeping previous matrix")
        return state
    if check_omega(omega, sigma):
        warnings.warn("omega update violated constraints; keeping previous matrix")
        return state
    return MultiTaskState(state.members, omega, state.lam, sigma, state.learn_omega)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.05
    outer_lr: float = 0.05
    inner_steps: int = 1
    support_fraction: float = 0.5
    first_order: bool = True

    def problems(self) -> list[str]:
        out = []
        if not self.inner_lr > 0:
            out.append("meta.inner_lr must be > 0")
        if not self.outer_lr > 0:
            out.append("meta.outer_lr must be > 0")
        if self.inner_steps < 1:
            out.append("meta.inner_steps must be >= 1")
        if not 0 < self.support_fraction < 1:
            out.append("meta.support_fraction must lie in (0, 1)")
        if not self.first_order:
            out.append("meta.first_order = false (second-order MAML) is not supported")
        return out


def adapt(model: MlpModel, data: Sequence[Demonstration], lr: float, steps: int,
          loss: LossKind | str = LossKind.MSE) -> ParamVector:
    """``steps`` full-batch gradient steps on ``data`` starting from ``model.params``."""
    X, Y = stack(data)
    params = model.params
    for _ in range(steps):
        _, g = batch_loss_and_grad(model.with_params(params), X, Y, loss)
        params = params - g.scale(lr)
    return params


def query_gradient(model: MlpModel, data: Sequence[Demonstration],
                   loss: LossKind | str = LossKind.MSE) -> tuple[float, ParamVector]:
    X, Y = stack(data)
    return batch_loss_and_grad(model, X, Y, loss)


def split_teachers(teacher_ids: Sequence[int], support_fraction: float,
                   rng: np.random.Generator) -> tuple[list[int], list[int]]:
    ids = sorted(teacher_ids)
    if len(ids) < 2:
        raise UsageError("need at least two teachers to split")
    order = rng.permutation(len(ids))
    n_support = int(np.clip(round(support_fraction * len(ids)), 1, len(ids) - 1))
    support = sorted(ids[i] for i in order[:n_support])
    query = sorted(ids[i] for i in order[n_support:])
    return support, query


def meta_update(model: MlpModel, support: Sequence[Sequence[Demonstration]],
                query: Sequence[Sequence[Demonstration]], cfg: MetaConfig,
                loss: LossKind | str = LossKind.MSE) -> tuple[ParamVector, dict]:
    """First-order MAML step from explicit support and query datasets.

    Each support set adapts the model with ``inner_steps`` SGD steps; the
    outer gradient is the query-loss gradient at the adapted parameters,
    averaged over query sets and then over support sets.
    """
    if cfg.problems():
        raise UsageError("; ".join(cfg.problems()))
    if not support or not query:
        raise UsageError("meta_update needs non-empty support and query sets")
    outer = np.zeros(len(model.params))
    query_losses = []
    for s_data in support:
        adapted = model.with_params(adapt(model, s_data, cfg.inner_lr, cfg.inner_steps, loss))
        g_sum = np.zeros(len(model.params))
        for q_data in query:
            value, g = query_gradient(adapted, q_data, loss)
            g_sum += g.values
            query_losses.append(value)
        outer += g_sum / len(query)
    outer /= len(support)
    new = model.params.with_values(model.params.values - cfg.outer_lr * outer)
    return new, {"outer_grad_norm": float(np.linalg.norm(outer)),
                 "query_loss": float(np.mean(query_losses))}


def meta_round(models: Mapping[int, MlpModel], teachers: Sequence[int], nodes: Sequence[NodeState],
               cfg: MetaConfig, seed: int | np.random.Generator,
               losses: Mapping[int, LossKind] | None = None) -> tuple[dict[int, ParamVector], dict]:
    """One federated meta step per model using data already stored at the nodes.

    Teachers are split into support and query groups per model. Each
    ``(node, teacher)`` dataset stays on its node: adaptation and query
    gradients are computed from node-local data and only parameters and
    gradients are combined.
    """
    if cfg.problems():
        raise UsageError("; ".join(cfg.problems()))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    losses = losses or {}
    out: dict[int, ParamVector] = {}
    diag: dict = {}
    for mid in sorted(models):
        model = models[mid]
        units = {m: [n for n in sorted(nodes, key=lambda n: n.id) if n.datasets.get((mid, m))]
                 for m in sorted(teachers)}
        present = [m for m, ns in units.items() if ns]
        if len(present) < 2:
            warnings.warn(f"meta disabled for model {mid}: fewer than two teachers with data")
            out[mid] = model.params
            diag[str(mid)] = {"skipped": True}
            continue
        support, query = split_teachers(present, cfg.support_fraction, rng)
        s_sets = [n.datasets[(mid, m)] for m in support for n in units[m]]
        q_sets = [n.datasets[(mid, m)] for m in query for n in units[m]]
        out[mid], d = meta_update(model, s_sets, q_sets, cfg, losses.get(mid, LossKind.MSE))
        d.update(support=support, query=query)
        diag[str(mid)] = d
    return out, diag


def coupling_step(models: Mapping[int, ParamVector], pairs: Sequence[TransferPairSpec],
                  mt_state: MultiTaskState | None, lr: float) -> tuple[dict[int, ParamVector], dict]:
    """One gradient step on alignment loss plus multi-task penalty, applied to global models."""
    grads = {k: np.zeros(len(v)) for k, v in models.items()}
    diag: dict = {}
    if pairs:
        value, g = alignment_loss_and_grad(pairs, models)
        diag["alignment_loss"] = value
        for k in grads:
            grads[k] += g[k].values
    if mt_state is not None:
        value, g = multitask_penalty_and_grad(mt_state, models)
        diag["multitask_penalty"] = value
        for k in grads:
            grads[k] += g[k].values
    return {k: v.with_values(v.values - lr * grads[k]) for k, v in models.items()}, diag
