"""Sensor/robot/task type sets, platforms, and the global-model registry.

A model is eligible on a platform when their task sets intersect; sensor and
robot subsets are carried as metadata only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import ConflictError, NotFoundError, UsageError
from .seeding import derive_seed
from .tensor import Activation, LossKind, MlpModel, ParamVector

DEFAULT_SENSORS = (
    "Vision", "Light", "Temperature", "Chemical", "Force", "Acoustic",
    "Gas", "Motion", "Magnetic", "Pressure", "Position",
)
DEFAULT_ROBOTS = ("Arm", "AGV", "Humanoid", "UAV", "Vehicle", "Industrial")
DEFAULT_TASKS = ("Sensing", "Navigation", "Manipulation", "Control", "Human-robot interaction")


def _check_type_set(label: str, values: Iterable[str]) -> tuple[str, ...]:
    values = tuple(str(v) for v in values)
    if not values:
        raise UsageError(f"{label} type set must not be empty")
    if len(set(values)) != len(values):
        raise UsageError(f"{label} type set has duplicate identifiers")
    return values


@dataclass(frozen=True)
class Taxonomy:
    """Open type sets; extend them by passing extra identifiers."""

    sensors: tuple[str, ...] = DEFAULT_SENSORS
    robots: tuple[str, ...] = DEFAULT_ROBOTS
    tasks: tuple[str, ...] = DEFAULT_TASKS

    def __post_init__(self):
        object.__setattr__(self, "sensors", _check_type_set("sensor", self.sensors))
        object.__setattr__(self, "robots", _check_type_set("robot", self.robots))
        object.__setattr__(self, "tasks", _check_type_set("task", self.tasks))

    def check_subset(self, label: str, kind: str, values: frozenset[str]) -> list[str]:
        known = set(getattr(self, kind))
        problems = []
        if not values:
            problems.append(f"{label}: {kind} subset must not be empty")
        unknown = sorted(values - known)
        if unknown:
            problems.append(f"{label}: unknown {kind} {unknown}")
        return problems

    def to_dict(self) -> dict[str, Any]:
        return {"sensors": list(self.sensors), "robots": list(self.robots), "tasks": list(self.tasks)}


@dataclass(frozen=True)
class Platform:
    id: int
    sensors: frozenset[str]
    robots: frozenset[str]
    tasks: frozenset[str]
    name: str = ""

    def __post_init__(self):
        for kind in ("sensors", "robots", "tasks"):
            object.__setattr__(self, kind, frozenset(getattr(self, kind)))

    def to_dict(self) -> dict[str, Any]:
        d = {"id": self.id, "sensors": sorted(self.sensors), "robots": sorted(self.robots),
             "tasks": sorted(self.tasks)}
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Platform":
        return cls(int(d["id"]), frozenset(d["sensors"]), frozenset(d["robots"]),
                   frozenset(d["tasks"]), d.get("name", ""))


@dataclass(frozen=True)
class ModelSpec:
    id: int
    sensors: frozenset[str]
    robots: frozenset[str]
    tasks: frozenset[str]
    layer_sizes: tuple[int, ...]
    loss: LossKind = LossKind.MSE
    activation: Activation = Activation.TANH
    use_bias: bool = True
    name: str = ""

    def __post_init__(self):
        for kind in ("sensors", "robots", "tasks"):
            object.__setattr__(self, kind, frozenset(getattr(self, kind)))
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def problems(self, taxonomy: Taxonomy) -> list[str]:
        label = f"model {self.id}"
        out = []
        for kind in ("sensors", "robots", "tasks"):
            out += taxonomy.check_subset(label, kind, getattr(self, kind))
        if len(self.layer_sizes) < 2 or any(s <= 0 for s in self.layer_sizes):
            out.append(f"{label}: layer_sizes must hold at least two positive sizes")
        if self.loss is LossKind.CROSS_ENTROPY and self.n_outputs < 2:
            out.append(f"{label}: cross_entropy needs at least two output classes")
        return out

    def to_dict(self) -> dict[str, Any]:
        d = {"id": self.id, "sensors": sorted(self.sensors), "robots": sorted(self.robots),
             "tasks": sorted(self.tasks), "layer_sizes": list(self.layer_sizes),
             "loss": self.loss.value, "activation": self.activation.value,
             "use_bias": self.use_bias}
        if self.name:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(int(d["id"]), frozenset(d["sensors"]), frozenset(d["robots"]),
                   frozenset(d["tasks"]), tuple(d["layer_sizes"]), LossKind(d.get("loss", "mse")),
                   Activation(d.get("activation", "tanh")), bool(d.get("use_bias", True)),
                   d.get("name", ""))


@dataclass
class GlobalModel:
    """Handle to a registered model and its initial parameters."""

    spec: ModelSpec
    initial: MlpModel

    @property
    def id(self) -> int:
        return self.spec.id

    @property
    def params(self) -> ParamVector:
        return self.initial.params


@dataclass
class ModelRegistry:
    taxonomy: Taxonomy = field(default_factory=Taxonomy)
    seed: int = 0
    _models: dict[int, GlobalModel] = field(default_factory=dict, repr=False)
    _platforms: dict[int, Platform] = field(default_factory=dict, repr=False)

    def register_platform(self, platform: Platform) -> Platform:
        if platform.id in self._platforms:
            raise ConflictError(f"platform {platform.id} already registered")
        problems = []
        for kind in ("sensors", "robots", "tasks"):
            problems += self.taxonomy.check_subset(f"platform {platform.id}", kind, getattr(platform, kind))
        if problems:
            raise UsageError("; ".join(problems))
        self._platforms[platform.id] = platform
        return platform

    def register_model(self, spec: ModelSpec) -> GlobalModel:
        if spec.id in self._models:
            raise ConflictError(f"model {spec.id} already registered")
        problems = spec.problems(self.taxonomy)
        if problems:
            raise UsageError("; ".join(problems))
        model = MlpModel.create(spec.layer_sizes, derive_seed(self.seed, "model-init", spec.id),
                                spec.activation, spec.use_bias)
        handle = GlobalModel(spec, model)
        self._models[spec.id] = handle
        return handle

    def model(self, model_id: int) -> GlobalModel:
        try:
            return self._models[model_id]
        except KeyError:
            raise NotFoundError(f"model {model_id} not registered") from None

    def platform(self, platform_id: int) -> Platform:
        try:
            return self._platforms[platform_id]
        except KeyError:
            raise NotFoundError(f"platform {platform_id} not registered") from None

    @property
    def models(self) -> list[GlobalModel]:
        return [self._models[k] for k in sorted(self._models)]

    @property
    def platforms(self) -> list[Platform]:
        return [self._platforms[k] for k in sorted(self._platforms)]

    def eligible_models(self, platform: Platform | int) -> list[GlobalModel]:
        pid = platform if isinstance(platform, int) else platform.id
        p = self.platform(pid)
        if not isinstance(platform, int) and platform != p:
            raise NotFoundError(f"platform {pid} differs from the registered definition")
        return [m for m in self.models if m.spec.tasks & p.tasks]

    def to_config(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "taxonomy": self.taxonomy.to_dict(),
            "platforms": [p.to_dict() for p in self.platforms],
            "models": [m.spec.to_dict() for m in self.models],
        }

    @classmethod
    def from_config(cls, cfg: dict[str, Any]) -> "ModelRegistry":
        tax = cfg.get("taxonomy", {})
        registry = cls(Taxonomy(tuple(tax.get("sensors", DEFAULT_SENSORS)),
                                tuple(tax.get("robots", DEFAULT_ROBOTS)),
                                tuple(tax.get("tasks", DEFAULT_TASKS))),
                       int(cfg.get("seed", 0)))
        for p in cfg.get("platforms", []):
            registry.register_platform(Platform.from_dict(p))
        for m in cfg.get("models", []):
            registry.register_model(ModelSpec.from_dict(m))
        return registry


def register_model(spec: ModelSpec, registry: ModelRegistry) -> GlobalModel:
    return registry.register_model(spec)


def eligible_models(platform: Platform | int, registry: ModelRegistry) -> list[GlobalModel]:
    return registry.eligible_models(platform)
