"""Scenario configuration: TOML schema, parsing and validation.

Unknown keys are rejected. :func:`parse_config` collects every problem it
finds and raises a single :class:`~fedlfd.errors.ConfigError` listing all of
them. See ``README.md`` for the full schema; ``presets/crm.toml`` is a
complete example.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import tomli_w

from .aggregation import AggregationStrategy, StrategyKind
from .crosstask import MetaConfig
from .errors import ConfigError
from .taxonomy import DEFAULT_ROBOTS, DEFAULT_SENSORS, DEFAULT_TASKS, ModelSpec, Platform, Taxonomy
from .tensor import LossKind, mlp_shape_meta

PRESETS = ("crm", "linear", "adversarial", "two-cluster", "meta")


@dataclass(frozen=True)
class ModelEntry:
    spec: ModelSpec
    policy: str = "mlp"
    policy_hidden: int = 8
    policy_scale: float = 1.0


@dataclass(frozen=True)
class TeacherEntry:
    id: int
    cluster: int | None = None
    noise_scale: float = 0.0
    skill: float = 0.0
    bias: tuple[float, ...] = ()
    model_bias: dict[int, tuple[float, ...]] = field(default_factory=dict)
    held_out: bool = False


@dataclass(frozen=True)
class DataSettings:
    samples_per_node: int = 32
    dirichlet_alpha: float = 1.0
    eval_samples: int = 256
    buffer_size: int = 256
    input_scale: float = 1.0


@dataclass(frozen=True)
class TrainingSettings:
    lr_local: float = 0.05
    lr_global: float = 1.0
    epochs: int = 1
    batch_size: int = 8
    weight_decay: float = 0.0
    sample_fraction: float = 1.0
    profile_dim: int = 8
    profile_decay: float = 0.1
    exclude_idle_platforms: bool = True


@dataclass(frozen=True)
class AsyncSettings:
    enabled: bool = False
    max_staleness: int = 0


@dataclass(frozen=True)
class TransferEntry:
    model_a: int
    model_b: int
    layers: tuple[str, ...]
    weight: float = 1.0


@dataclass(frozen=True)
class MultitaskEntry:
    members: tuple[int, ...] = ()
    lam: float = 0.0
    omega: tuple[tuple[float, ...], ...] | None = None
    ridge: float = 1e-8


@dataclass(frozen=True)
class MetaEntry:
    enabled: bool = False
    config: MetaConfig = MetaConfig()
    eval_steps: int = 5


@dataclass(frozen=True)
class CrossTaskEntry:
    coupling_lr: float = 0.01
    transfer: tuple[TransferEntry, ...] = ()
    multitask: MultitaskEntry | None = None
    meta: MetaEntry = MetaEntry()


@dataclass(frozen=True)
class OutputSettings:
    record_timing: bool = False
    checkpoints: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    rounds: int
    taxonomy: Taxonomy
    platforms: tuple[Platform, ...]
    models: tuple[ModelEntry, ...]
    teachers: tuple[TeacherEntry, ...]
    data: DataSettings = DataSettings()
    training: TrainingSettings = TrainingSettings()
    strategy: AggregationStrategy = AggregationStrategy()
    asynchronous: AsyncSettings = AsyncSettings()
    cross_task: CrossTaskEntry = CrossTaskEntry()
    output: OutputSettings = OutputSettings()
    workers: int = 1

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def with_settings(self, section: str, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


class _Reader:
    """Pulls typed values from a TOML table while recording problems and unknown keys."""

    def __init__(self, table: Any, where: str, problems: list[str]):
        self.where = where
        self.problems = problems
        self.used: set[str] = set()
        if not isinstance(table, dict):
            problems.append(f"{where}: expected a table")
            table = {}
        self.table = table

    def get(self, key: str, kind: type | tuple, default: Any = dataclasses.MISSING) -> Any:
        self.used.add(key)
        if key not in self.table:
            if default is dataclasses.MISSING:
                self.problems.append(f"{self.where}.{key}: required")
                return None
            return default
        value = self.table[key]
        kinds = kind if isinstance(kind, tuple) else (kind,)
        if float in kinds and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if bool not in kinds and isinstance(value, bool) or not isinstance(value, kinds):
            self.problems.append(f"{self.where}.{key}: expected {'/'.join(k.__name__ for k in kinds)}, "
                                 f"got {type(value).__name__}")
            return None if default is dataclasses.MISSING else default
        return value

    def finish(self) -> None:
        for key in sorted(set(self.table) - self.used):
            self.problems.append(f"{self.where}: unknown key '{key}'")


def _strings(value: Any, where: str, problems: list[str]) -> frozenset[str]:
    if value is None:
        return frozenset()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        problems.append(f"{where}: expected a list of strings")
        return frozenset()
    return frozenset(value)


def _floats(value: Any, where: str, problems: list[str]) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                              for v in value):
        problems.append(f"{where}: expected a list of numbers")
        return ()
    return tuple(float(v) for v in value)


def _parse_platform(t: Any, i: int, problems: list[str]) -> Platform | None:
    r = _Reader(t, f"platforms[{i}]", problems)
    pid = r.get("id", int)
    name = r.get("name", str, "")
    sensors = _strings(r.get("sensors", list), f"platforms[{i}].sensors", problems)
    robots = _strings(r.get("robots", list), f"platforms[{i}].robots", problems)
    tasks = _strings(r.get("tasks", list), f"platforms[{i}].tasks", problems)
    r.finish()
    return None if pid is None else Platform(pid, sensors, robots, tasks, name)


def _parse_model(t: Any, i: int, problems: list[str]) -> ModelEntry | None:
    where = f"models[{i}]"
    r = _Reader(t, where, problems)
    mid = r.get("id", int)
    name = r.get("name", str, "")
    sensors = _strings(r.get("sensors", list), f"{where}.sensors", problems)
    robots = _strings(r.get("robots", list), f"{where}.robots", problems)
    tasks = _strings(r.get("tasks", list), f"{where}.tasks", problems)
    sizes = r.get("layer_sizes", list)
    loss = r.get("loss", str, "mse")
    activation = r.get("activation", str, "tanh")
    use_bias = r.get("use_bias", bool, True)
    policy = r.get("policy", str, "mlp")
    hidden = r.get("policy_hidden", int, 8)
    scale = r.get("policy_scale", float, 1.0)
    r.finish()
    ok = True
    if sizes is not None and not (isinstance(sizes, list) and sizes
                                  and all(isinstance(s, int) and not isinstance(s, bool) and s > 0
                                          for s in sizes) and len(sizes) >= 2):
        problems.append(f"{where}.layer_sizes: expected at least two positive integers")
        ok = False
    if loss not in ("mse", "cross_entropy"):
        problems.append(f"{where}.loss: must be 'mse' or 'cross_entropy'")
        ok = False
    if activation not in ("tanh", "relu", "identity"):
        problems.append(f"{where}.activation: must be 'tanh', 'relu' or 'identity'")
        ok = False
    if policy not in ("linear", "mlp"):
        problems.append(f"{where}.policy: must be 'linear' or 'mlp'")
    if hidden is not None and hidden <= 0:
        problems.append(f"{where}.policy_hidden: must be positive")
    if mid is None or sizes is None or not ok:
        return None
    spec = ModelSpec(mid, sensors, robots, tasks, tuple(sizes), LossKind(loss), activation,
                     use_bias, name)
    return ModelEntry(spec, policy, hidden or 8, scale)


def _parse_teacher(t: Any, i: int, problems: list[str]) -> TeacherEntry | None:
    where = f"teachers[{i}]"
    r = _Reader(t, where, problems)
    tid = r.get("id", int)
    cluster = r.get("cluster", int, None)
    noise = r.get("noise_scale", float, 0.0)
    skill = r.get("skill", float, 0.0)
    bias = _floats(r.get("bias", list, []), f"{where}.bias", problems)
    held_out = r.get("held_out", bool, False)
    mb_raw = r.get("model_bias", dict, {})
    r.finish()
    model_bias = {}
    for k, v in (mb_raw or {}).items():
        if not k.isdigit():
            problems.append(f"{where}.model_bias: keys must be model ids, got '{k}'")
            continue
        model_bias[int(k)] = _floats(v, f"{where}.model_bias.{k}", problems)
    if noise is not None and noise < 0:
        problems.append(f"{where}.noise_scale: must be >= 0")
    if skill is not None and not 0 <= skill <= 1:
        problems.append(f"{where}.skill: must lie in [0, 1]")
    if tid is None:
        return None
    return TeacherEntry(tid, cluster, noise or 0.0, skill or 0.0, bias, model_bias, held_out)


def _parse_section(raw: dict, key: str, cls, problems: list[str]):
    r = _Reader(raw.get(key, {}), key, problems)
    kwargs = {}
    for f in dataclasses.fields(cls):
        kind = {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type), None)
        if kind is None:
            continue
        value = r.get(f.name, kind, f.default)
        if value is not None:
            kwargs[f.name] = value
    r.finish()
    return cls(**kwargs)


def _parse_cross_task(raw: Any, problems: list[str]) -> CrossTaskEntry:
    r = _Reader(raw, "cross_task", problems)
    coupling_lr = r.get("coupling_lr", float, 0.01)
    transfer_raw = r.get("transfer", list, [])
    mt_raw = r.get("multitask", dict, None)
    meta_raw = r.get("meta", dict, None)
    r.finish()
    transfer = []
    for i, t in enumerate(transfer_raw or []):
        tr = _Reader(t, f"cross_task.transfer[{i}]", problems)
        a, b = tr.get("model_a", int), tr.get("model_b", int)
        layers = tr.get("layers", list)
        weight = tr.get("weight", float, 1.0)
        tr.finish()
        if weight is not None and weight < 0:
            problems.append(f"cross_task.transfer[{i}].weight: must be >= 0")
        if a is not None and b is not None and layers:
            transfer.append(TransferEntry(a, b, tuple(str(x) for x in layers), weight or 0.0))
    multitask = None
    if mt_raw is not None:
        mr = _Reader(mt_raw, "cross_task.multitask", problems)
        members = mr.get("members", list, [])
        lam = mr.get("lambda", float, 0.0)
        omega = mr.get("omega", list, None)
        ridge = mr.get("ridge", float, 1e-8)
        mr.finish()
        if lam is not None and lam < 0:
            problems.append("cross_task.multitask.lambda: must be >= 0")
        omega_t = None
        if omega is not None:
            try:
                arr = np.array(omega, dtype=np.float64)
                if arr.shape != (len(members), len(members)):
                    raise ValueError
                omega_t = tuple(tuple(row) for row in arr.tolist())
            except (ValueError, TypeError):
                problems.append("cross_task.multitask.omega: expected a square matrix matching members")
        multitask = MultitaskEntry(tuple(int(m) for m in members), lam or 0.0, omega_t, ridge or 1e-8)
    meta = MetaEntry()
    if meta_raw is not None:
        er = _Reader(meta_raw, "cross_task.meta", problems)
        enabled = er.get("enabled", bool, True)
        cfg = MetaConfig(er.get("inner_lr", float, 0.05), er.get("outer_lr", float, 0.05),
                         er.get("inner_steps", int, 1), er.get("support_fraction", float, 0.5),
                         er.get("first_order", bool, True))
        eval_steps = er.get("eval_steps", int, 5)
        er.finish()
        problems.extend(cfg.problems())
        if eval_steps is not None and eval_steps < 0:
            problems.append("cross_task.meta.eval_steps: must be >= 0")
        meta = MetaEntry(bool(enabled), cfg, eval_steps or 0)
    return CrossTaskEntry(coupling_lr or 0.01, tuple(transfer), multitask, meta)


def parse_config(raw: dict[str, Any]) -> ScenarioConfig:
    problems: list[str] = []
    top = _Reader(raw, "config", problems)
    name = top.get("name", str, "scenario")
    seed = top.get("seed", int, 0)
    rounds = top.get("rounds", int, 10)
    workers = top.get("workers", int, 1)
    for key in ("taxonomy", "platforms", "models", "teachers", "data", "training", "strategy",
                "async", "cross_task", "output"):
        top.used.add(key)
    top.finish()

    tax_r = _Reader(raw.get("taxonomy", {}), "taxonomy", problems)
    tax_fields = {}
    for kind, default in (("sensors", DEFAULT_SENSORS), ("robots", DEFAULT_ROBOTS), ("tasks", DEFAULT_TASKS)):
        values = tax_r.get(kind, list, list(default))
        if not values or len(set(values)) != len(values):
            problems.append(f"taxonomy.{kind}: must be a non-empty list of unique names")
            values = list(default)
        tax_fields[kind] = tuple(str(v) for v in values)
    tax_r.finish()
    taxonomy = Taxonomy(**tax_fields)

    platforms = [p for i, t in enumerate(raw.get("platforms", []))
                 if (p := _parse_platform(t, i, problems)) is not None]
    models = [m for i, t in enumerate(raw.get("models", []))
              if (m := _parse_model(t, i, problems)) is not None]
    teachers = [t for i, tt in enumerate(raw.get("teachers", []))
                if (t := _parse_teacher(tt, i, problems)) is not None]

    data = _parse_section(raw, "data", DataSettings, problems)
    training = _parse_section(raw, "training", TrainingSettings, problems)
    strategy_raw = dict(raw.get("strategy", {}))
    kind = strategy_raw.pop("kind", "fedavg")
    if kind not in {k.value for k in StrategyKind}:
        problems.append(f"strategy.kind: unknown strategy '{kind}'")
        kind = "fedavg"
    base = _parse_section({"strategy": strategy_raw}, "strategy",
                          _strategy_fields_only(), problems)
    strategy = AggregationStrategy(StrategyKind(kind), **dataclasses.asdict(base))
    asynchronous = _parse_section(raw, "async", AsyncSettings, problems)
    cross_task = _parse_cross_task(raw.get("cross_task", {}), problems)
    output = _parse_section(raw, "output", OutputSettings, problems)

    cfg = ScenarioConfig(name or "scenario", seed if seed is not None else 0,
                         rounds if rounds is not None else 10, taxonomy, tuple(platforms),
                         tuple(models), tuple(teachers), data, training, strategy, asynchronous,
                         cross_task, output, workers if workers is not None else 1)
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def _strategy_fields_only():
    fields = [(f.name, f.type, f.default) for f in dataclasses.fields(AggregationStrategy)
              if f.name != "kind"]
    return dataclasses.make_dataclass("_StrategyFields", [(n, t, field(default=d)) for n, t, d in fields],
                                      frozen=True)


def validate(cfg: ScenarioConfig) -> list[str]:
    """Semantic checks across sections; returns a list of problems (empty when valid)."""
    p: list[str] = []
    if cfg.rounds < 1:
        p.append("rounds: must be >= 1")
    if cfg.workers < 1:
        p.append("workers: must be >= 1")
    ids = [pl.id for pl in cfg.platforms]
    if not ids:
        p.append("platforms: at least one platform is required")
    if len(set(ids)) != len(ids):
        p.append("platforms: duplicate ids")
    mids = [m.spec.id for m in cfg.models]
    if not mids:
        p.append("models: at least one model is required")
    if len(set(mids)) != len(mids):
        p.append("models: duplicate ids")
    tids = [t.id for t in cfg.teachers]
    if not [t for t in cfg.teachers if not t.held_out]:
        p.append("teachers: at least one training (not held-out) teacher is required")
    if len(set(tids)) != len(tids):
        p.append("teachers: duplicate ids")
    for pl in cfg.platforms:
        for kind in ("sensors", "robots", "tasks"):
            p.extend(cfg.taxonomy.check_subset(f"platform {pl.id}", kind, getattr(pl, kind)))
    for m in cfg.models:
        p.extend(m.spec.problems(cfg.taxonomy))
    for t in cfg.teachers:
        if t.bias and t.model_bias:
            p.append(f"teacher {t.id}: give either bias or model_bias, not both")
        for k in t.model_bias:
            if k not in mids:
                p.append(f"teacher {t.id}: model_bias refers to unknown model {k}")

    tr, d = cfg.training, cfg.data
    for name in ("lr_local", "lr_global"):
        if not getattr(tr, name) > 0:
            p.append(f"training.{name}: must be > 0")
    if tr.epochs < 0:
        p.append("training.epochs: must be >= 0")
    if tr.batch_size < 1:
        p.append("training.batch_size: must be >= 1")
    if tr.weight_decay < 0:
        p.append("training.weight_decay: must be >= 0")
    if not 0 < tr.sample_fraction <= 1:
        p.append("training.sample_fraction: must lie in (0, 1]")
    elif cfg.platforms and tr.sample_fraction * len(cfg.platforms) < 1:
        p.append(f"training.sample_fraction: C*L = {tr.sample_fraction * len(cfg.platforms):g} "
                 "samples fewer than one node")
    if tr.profile_dim < 2 or tr.profile_dim % 2:
        p.append("training.profile_dim: must be a positive even number")
    if not 0 < tr.profile_decay <= 1:
        p.append("training.profile_decay: must lie in (0, 1]")
    if d.samples_per_node < 1:
        p.append("data.samples_per_node: must be >= 1")
    if not d.dirichlet_alpha > 0:
        p.append("data.dirichlet_alpha: must be > 0")
    if d.eval_samples < 1:
        p.append("data.eval_samples: must be >= 1")
    if d.buffer_size < 0:
        p.append("data.buffer_size: must be >= 0 (0 keeps everything)")
    if not d.input_scale > 0:
        p.append("data.input_scale: must be > 0")
    p.extend(cfg.strategy.problems())
    if cfg.asynchronous.max_staleness < 0:
        p.append("async.max_staleness: must be >= 0")

    ct = cfg.cross_task
    sizes = {m.spec.id: m.spec for m in cfg.models}
    if not ct.coupling_lr > 0:
        p.append("cross_task.coupling_lr: must be > 0")
    for t in ct.transfer:
        for mid in (t.model_a, t.model_b):
            if mid not in sizes:
                p.append(f"cross_task.transfer: unknown model {mid}")
        if t.model_a in sizes and t.model_b in sizes:
            ma = {n: (r, c) for n, r, c in mlp_shape_meta(sizes[t.model_a].layer_sizes, sizes[t.model_a].use_bias)}
            mb = {n: (r, c) for n, r, c in mlp_shape_meta(sizes[t.model_b].layer_sizes, sizes[t.model_b].use_bias)}
            for layer in t.layers:
                if layer not in ma or layer not in mb:
                    p.append(f"cross_task.transfer ({t.model_a}, {t.model_b}): no layer '{layer}' in both models")
                elif ma[layer] != mb[layer]:
                    p.append(f"cross_task.transfer ({t.model_a}, {t.model_b}): layer '{layer}' "
                             f"shapes {ma[layer]} vs {mb[layer]} differ")
    if ct.multitask is not None and ct.multitask.members:
        members = ct.multitask.members
        if len(members) < 2 or len(set(members)) != len(members):
            p.append("cross_task.multitask.members: need two or more distinct models")
        unknown = [m for m in members if m not in sizes]
        if unknown:
            p.append(f"cross_task.multitask.members: unknown models {unknown}")
        else:
            lengths = {sum(r * c for _, r, c in mlp_shape_meta(sizes[m].layer_sizes, sizes[m].use_bias))
                       for m in members}
            if len(lengths) > 1:
                p.append("cross_task.multitask.members: models must share one parameter length")
        if ct.multitask.omega is not None:
            om = np.array(ct.multitask.omega)
            if not np.allclose(om, om.T) or np.linalg.eigvalsh(0.5 * (om + om.T)).min() <= 0:
                p.append("cross_task.multitask.omega: must be symmetric positive definite")
            elif abs(np.trace(np.linalg.inv(om)) - 1) > 1e-9:
                p.append("cross_task.multitask.omega: trace of its inverse must equal 1")
    coupled = bool(ct.transfer) or (ct.multitask is not None and len(ct.multitask.members) >= 2)
    if cfg.strategy.kind is StrategyKind.USER_CLUSTERING and (coupled or ct.meta.enabled):
        p.append("cross_task: transfer, multi-task and meta steps act on a single global model "
                 "per task and cannot be combined with user_clustering")
    if ct.meta.enabled and len([t for t in cfg.teachers if not t.held_out]) < 2:
        p.append("cross_task.meta: needs at least two training teachers")
    return p


def to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    """Inverse of :func:`parse_config` (TOML-ready)."""
    out: dict[str, Any] = {"name": cfg.name, "seed": cfg.seed, "rounds": cfg.rounds,
                           "workers": cfg.workers, "taxonomy": cfg.taxonomy.to_dict(),
                           "platforms": [p.to_dict() for p in cfg.platforms]}
    models = []
    for m in cfg.models:
        d = m.spec.to_dict()
        d.update(policy=m.policy, policy_hidden=m.policy_hidden, policy_scale=m.policy_scale)
        models.append(d)
    out["models"] = models
    teachers = []
    for t in cfg.teachers:
        d: dict[str, Any] = {"id": t.id, "noise_scale": t.noise_scale, "skill": t.skill,
                             "bias": list(t.bias), "held_out": t.held_out}
        if t.cluster is not None:
            d["cluster"] = t.cluster
        if t.model_bias:
            d["model_bias"] = {str(k): list(v) for k, v in sorted(t.model_bias.items())}
        teachers.append(d)
    out["teachers"] = teachers
    out["data"] = dataclasses.asdict(cfg.data)
    out["training"] = dataclasses.asdict(cfg.training)
    strategy = dataclasses.asdict(cfg.strategy)
    strategy["kind"] = cfg.strategy.kind.value
    out["strategy"] = strategy
    out["async"] = dataclasses.asdict(cfg.asynchronous)
    ct = cfg.cross_task
    ctd: dict[str, Any] = {"coupling_lr": ct.coupling_lr}
    if ct.transfer:
        ctd["transfer"] = [{"model_a": t.model_a, "model_b": t.model_b, "layers": list(t.layers),
                            "weight": t.weight} for t in ct.transfer]
    if ct.multitask is not None:
        mt: dict[str, Any] = {"members": list(ct.multitask.members), "lambda": ct.multitask.lam,
                              "ridge": ct.multitask.ridge}
        if ct.multitask.omega is not None:
            mt["omega"] = [list(r) for r in ct.multitask.omega]
        ctd["multitask"] = mt
    meta = dataclasses.asdict(ct.meta.config)
    meta.update(enabled=ct.meta.enabled, eval_steps=ct.meta.eval_steps)
    ctd["meta"] = meta
    out["cross_task"] = ctd
    out["output"] = dataclasses.asdict(cfg.output)
    return out


def dumps(cfg: ScenarioConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def loads(text: str) -> ScenarioConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    return parse_config(raw)


def load(path: str | Path) -> ScenarioConfig:
    """Load a config file, or a bundled preset when ``path`` names one (e.g. ``"crm"``)."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return preset(str(path))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'; available: {', '.join(PRESETS)}")
    return resources.files("fedlfd.presets").joinpath(f"{name}.toml").read_text(encoding="utf-8")


def preset(name: str) -> ScenarioConfig:
    return loads(preset_text(name))
