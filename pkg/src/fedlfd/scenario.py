"""Building a simulated world from a :class:`~fedlfd.config.ScenarioConfig`, and evaluating it.

Every random draw is taken from a stream keyed by ``(seed, kind, id, round)``
(see :mod:`fedlfd.seeding`), so two worlds built from the same config are
identical and node work can run in any order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .aggregation import ModelAggregator, StrategyKind
from .config import ScenarioConfig, TeacherEntry
from .crosstask import MultiTaskState, TransferPairSpec, adapt
from .node import NodeState, TeacherSpec, generate_demonstrations
from .seeding import derive_seed, rng_for
from .taxonomy import ModelRegistry
from .tensor import Activation, LossKind, MlpModel, ParamVector, evaluate_loss, forward, mlp_shape_meta


@dataclass(frozen=True)
class GroundTruthPolicy:
    """Frozen reference behaviour for one model: a linear map or a small tanh network."""

    model_id: int
    kind: str
    network: MlpModel

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return forward(self.network, np.atleast_2d(X))

    @classmethod
    def build(cls, model_id: int, n_in: int, n_out: int, kind: str = "mlp", hidden: int = 8,
              scale: float = 1.0, seed: int = 0) -> "GroundTruthPolicy":
        rng = np.random.default_rng(seed)
        sizes = (n_in, n_out) if kind == "linear" else (n_in, hidden, n_out)
        chunks = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = scale if i == len(sizes) - 2 else 1.5
            chunks.append(rng.standard_normal(fan_out * fan_in) * gain / np.sqrt(fan_in))
            chunks.append(rng.standard_normal(fan_out) * 0.5 * gain)
        params = ParamVector(np.concatenate(chunks), mlp_shape_meta(sizes))
        act = Activation.IDENTITY if kind == "linear" else Activation.TANH
        return cls(model_id, kind, MlpModel(sizes, params, act))


def teacher_spec(entry: TeacherEntry) -> TeacherSpec:
    bias: Any = ({k: np.array(v) for k, v in entry.model_bias.items()} if entry.model_bias
                 else np.array(entry.bias))
    return TeacherSpec(entry.id, bias, entry.noise_scale, entry.skill, entry.cluster)


@dataclass
class Snapshot:
    params: ParamVector
    centers: tuple[ParamVector, ...] = ()
    assignment: dict[tuple[int, int], int] = field(default_factory=dict)


@dataclass
class World:
    config: ScenarioConfig
    registry: ModelRegistry
    policies: dict[int, GroundTruthPolicy]
    teachers: dict[int, TeacherSpec]
    held_out: dict[int, TeacherSpec]
    nodes: dict[int, NodeState]
    eligible: dict[int, list[int]]
    active_platforms: list[int]
    node_mix: dict[int, np.ndarray]
    clusters: list[int]
    aggregators: dict[int, ModelAggregator]
    transfer: list[TransferPairSpec]
    multitask: MultiTaskState | None
    eval_sets: dict[int, tuple[np.ndarray, np.ndarray]]
    teacher_eval: dict[tuple[int, int], np.ndarray]
    snapshots: dict[int, dict[int, Snapshot]] = field(default_factory=dict)
    next_round: int = 0

    @property
    def seed(self) -> int:
        return self.config.seed

    def spec(self, model_id: int):
        return self.registry.model(model_id).spec

    def network(self, model_id: int, params: ParamVector | None = None) -> MlpModel:
        base = self.registry.model(model_id).initial
        return base if params is None else base.with_params(params)

    def global_params(self) -> dict[int, ParamVector]:
        return {mid: agg.params for mid, agg in sorted(self.aggregators.items())}

    def teacher_cluster(self, teacher_id: int) -> int:
        t = self.teachers[teacher_id]
        return t.cluster_tag if t.cluster_tag is not None else -1 - teacher_id


def _eval_targets(spec, truth: np.ndarray) -> np.ndarray:
    return np.argmax(truth, axis=1) if spec.loss is LossKind.CROSS_ENTROPY else truth


def build_scenario(config: ScenarioConfig) -> World:
    """Deterministic world (registry, nodes, teachers, policies, aggregators) from ``config``."""
    seed = config.seed
    registry = ModelRegistry(config.taxonomy, seed)
    for p in config.platforms:
        registry.register_platform(p)
    policies = {}
    for entry in config.models:
        spec = entry.spec
        registry.register_model(spec)
        policies[spec.id] = GroundTruthPolicy.build(
            spec.id, spec.n_inputs, spec.n_outputs, entry.policy, entry.policy_hidden,
            entry.policy_scale, derive_seed(seed, "policy", spec.id))

    teachers = {t.id: teacher_spec(t) for t in config.teachers if not t.held_out}
    held_out = {t.id: teacher_spec(t) for t in config.teachers if t.held_out}

    eligible = {p.id: [m.id for m in registry.eligible_models(p)] for p in registry.platforms}
    active = [pid for pid in sorted(eligible)
              if eligible[pid] or not config.training.exclude_idle_platforms]
    tags = {t.cluster_tag if t.cluster_tag is not None else -1 - t.id for t in teachers.values()}
    clusters = sorted(tags)
    node_mix = {pid: rng_for(seed, "node-mix", pid).dirichlet(
        np.full(len(clusters), config.data.dirichlet_alpha)) for pid in active}
    nodes = {pid: NodeState(pid, config.data.buffer_size) for pid in active}

    aggregators = {
        m.id: ModelAggregator.create(m.id, m.params, config.strategy,
                                     derive_seed(seed, "centers", m.id))
        for m in registry.models
    }

    ct = config.cross_task
    transfer = [TransferPairSpec(t.model_a, t.model_b, t.layers, t.weight) for t in ct.transfer]
    multitask = None
    if ct.multitask is not None and len(ct.multitask.members) >= 2:
        omega = None if ct.multitask.omega is None else np.array(ct.multitask.omega)
        multitask = MultiTaskState.initial(ct.multitask.members, ct.multitask.lam, omega)

    eval_sets, teacher_eval = {}, {}
    for m in registry.models:
        spec = m.spec
        X = rng_for(seed, "eval", spec.id).standard_normal((config.data.eval_samples, spec.n_inputs))
        X = X * config.data.input_scale
        truth = policies[spec.id](X)
        eval_sets[spec.id] = (X, _eval_targets(spec, truth))
        for t in list(teachers.values()) + list(held_out.values()):
            biased = truth + (1.0 - t.skill) * t.bias_for(spec.id, spec.n_outputs)
            teacher_eval[(spec.id, t.id)] = _eval_targets(spec, biased)

    return World(config, registry, policies, teachers, held_out, nodes, eligible, active,
                 node_mix, clusters, aggregators, transfer, multitask, eval_sets, teacher_eval)


def teacher_counts(world: World, node_id: int, model_id: int, round_idx: int) -> dict[int, int]:
    """How many of the node's per-round samples each teacher demonstrates.

    Probabilities follow the node's Dirichlet mix over teacher groups, split
    evenly within a group.
    """
    ids = sorted(world.teachers)
    mix = world.node_mix[node_id]
    group_of = {m: world.clusters.index(world.teacher_cluster(m)) for m in ids}
    sizes = np.bincount(list(group_of.values()), minlength=len(world.clusters))
    p = np.array([mix[group_of[m]] / sizes[group_of[m]] for m in ids])
    p = p / p.sum()
    counts = rng_for(world.seed, f"teacher-mix-{model_id}", node_id, round_idx).multinomial(
        world.config.data.samples_per_node, p)
    return {m: int(c) for m, c in zip(ids, counts) if c > 0}


def _personal_params(world: World, node: NodeState, model_id: int, teacher_id: int) -> ParamVector:
    meta = world.config.cross_task.meta
    if meta.enabled and meta.eval_steps > 0 and node.datasets.get((model_id, teacher_id)):
        spec = world.spec(model_id)
        base = world.network(model_id, world.aggregators[model_id].params)
        return adapt(base, node.datasets[(model_id, teacher_id)], meta.config.inner_lr,
                     meta.eval_steps, spec.loss)
    return node.local_models[(model_id, teacher_id)]


def evaluate(world: World) -> dict[str, Any]:
    """Global loss per model on noise-free targets; per-teacher loss on that teacher's biased targets.

    A teacher's personalized loss for a model is averaged over every node
    holding a local model for it (under meta-learning: the global model
    adapted for ``eval_steps`` steps on that node's data for the teacher).
    """
    global_loss, center_losses, personal = {}, {}, {}
    for mid, agg in sorted(world.aggregators.items()):
        spec = world.spec(mid)
        X, Y = world.eval_sets[mid]
        global_loss[mid] = evaluate_loss(world.network(mid, agg.params), X, Y, spec.loss)
        if agg.clusters is not None:
            center_losses[mid] = [evaluate_loss(world.network(mid, c), X, Y, spec.loss)
                                  for c in agg.clusters.centers]
        per_teacher = {}
        for tid in sorted(world.teachers):
            losses = []
            for nid in sorted(world.nodes):
                node = world.nodes[nid]
                if (mid, tid) not in node.local_models:
                    continue
                params = _personal_params(world, node, mid, tid)
                losses.append(evaluate_loss(world.network(mid, params), X,
                                            world.teacher_eval[(mid, tid)], spec.loss))
            if losses:
                per_teacher[tid] = float(np.mean(losses))
        personal[mid] = per_teacher
    out: dict[str, Any] = {"global_loss": global_loss, "personalized_loss": personal}
    if center_losses:
        out["center_losses"] = center_losses
    return out


def mean_personalized_loss(result: dict[str, Any]) -> float:
    vals = [v for per in result["personalized_loss"].values() for v in per.values()]
    return float(np.mean(vals)) if vals else float("nan")


def heldout_adaptation_loss(world: World, teacher_id: int, model_id: int, steps: int, lr: float,
                            n_samples: int = 16, params: ParamVector | None = None) -> float:
    """Loss on a held-out teacher's biased eval targets after ``steps`` SGD steps of adaptation.

    Adaptation starts from ``params`` (default: the current global model)
    and uses ``n_samples`` fresh demonstrations from the teacher.
    """
    teacher = world.held_out.get(teacher_id) or world.teachers[teacher_id]
    spec = world.spec(model_id)
    data = generate_demonstrations(teacher, spec, world.policies[model_id], n_samples,
                                   rng_for(world.seed, f"heldout-{model_id}", teacher_id))
    start = world.network(model_id, params if params is not None else world.aggregators[model_id].params)
    adapted = adapt(start, data, lr, steps, spec.loss)
    X, _ = world.eval_sets[model_id]
    return evaluate_loss(world.network(model_id, adapted), X,
                         world.teacher_eval[(model_id, teacher_id)], spec.loss)


def uses_clustering(world: World) -> bool:
    return world.config.strategy.kind is StrategyKind.USER_CLUSTERING
