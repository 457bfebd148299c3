"""Federated multi-teacher learning-from-demonstration simulator."""

from .aggregation import (
    AggregationStrategy,
    ClusterState,
    StrategyKind,
    cluster_assign,
    cluster_update,
    fedavg,
    parameter_weighting,
    update_global_profile,
    user_weighting,
)
from .config import ScenarioConfig, load as load_config, preset
from .crosstask import (
    MetaConfig,
    MultiTaskState,
    TransferPairSpec,
    alignment_loss_and_grad,
    meta_round,
    multitask_penalty_and_grad,
    update_omega,
)
from .harness import RoundReport, run, run_round_async, run_round_sync
from .node import (
    Demonstration,
    LocalDelta,
    TeacherSpec,
    UserProfile,
    generate_demonstrations,
    local_update,
    update_profile,
)
from .scenario import GroundTruthPolicy, World, build_scenario, evaluate
from .taxonomy import ModelRegistry, ModelSpec, Platform, Taxonomy, eligible_models, register_model
from .tensor import LossKind, MlpModel, ParamVector, forward, loss_and_grad, sgd_step

__version__ = "0.1.0"

__all__ = [
    "AggregationStrategy",
    "alignment_loss_and_grad",
    "build_scenario",
    "cluster_assign",
    "cluster_update",
    "ClusterState",
    "Demonstration",
    "eligible_models",
    "evaluate",
    "fedavg",
    "forward",
    "generate_demonstrations",
    "GroundTruthPolicy",
    "load_config",
    "local_update",
    "LocalDelta",
    "loss_and_grad",
    "LossKind",
    "meta_round",
    "MetaConfig",
    "MlpModel",
    "ModelRegistry",
    "ModelSpec",
    "multitask_penalty_and_grad",
    "MultiTaskState",
    "parameter_weighting",
    "ParamVector",
    "Platform",
    "preset",
    "register_model",
    "RoundReport",
    "run",
    "run_round_async",
    "run_round_sync",
    "ScenarioConfig",
    "sgd_step",
    "StrategyKind",
    "Taxonomy",
    "TeacherSpec",
    "TransferPairSpec",
    "update_global_profile",
    "update_omega",
    "update_profile",
    "user_weighting",
    "UserProfile",
    "World",
]
