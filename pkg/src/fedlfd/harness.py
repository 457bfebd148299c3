"""Round scheduling, metrics stream and checkpoints.

A round: sample nodes, let each sampled node teach/train/profile locally,
aggregate per model, apply cross-task couplings, optionally run a meta step,
then evaluate. Node work may run on a thread pool; results are sorted before
anything is combined, so the worker count never changes the output.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from . import checkpoint
from .config import ScenarioConfig
from .crosstask import coupling_step, meta_round, update_omega
from .node import LocalDelta, UserProfile, generate_demonstrations, local_update, stack, update_profile
from .scenario import Snapshot, World, build_scenario, evaluate, mean_personalized_loss, teacher_counts
from .seeding import rng_for
from .tensor import ParamVector, evaluate_loss

log = logging.getLogger(__name__)


@dataclass
class RoundReport:
    round: int
    sampled_nodes: list[int]
    participants: list[list[int]]
    global_loss: dict[int, float]
    personalized_loss: dict[int, dict[int, float]]
    param_norms: dict[int, float]
    aggregation: dict[int, dict]
    cluster_assignments: dict[int, list[list[int]]] = field(default_factory=dict)
    center_losses: dict[int, list[float]] = field(default_factory=dict)
    cross_task: dict[str, Any] = field(default_factory=dict)
    staleness_histogram: dict[int, int] = field(default_factory=dict)
    duration_s: float = 0.0

    def to_record(self, include_timing: bool = False) -> dict[str, Any]:
        rec = {
            "type": "round",
            "round": self.round,
            "sampled_nodes": self.sampled_nodes,
            "participants": self.participants,
            "global_loss": self.global_loss,
            "personalized_loss": self.personalized_loss,
            "param_norms": self.param_norms,
            "aggregation": self.aggregation,
            "cluster_assignments": self.cluster_assignments,
            "center_losses": self.center_losses,
            "cross_task": self.cross_task,
            "staleness_histogram": self.staleness_histogram,
        }
        if include_timing:
            rec["duration_s"] = self.duration_s
        return rec


@dataclass
class NodeResult:
    node_id: int
    deltas: list[LocalDelta]
    profiles: dict[int, dict[tuple[int, int], UserProfile]]
    local_models: dict[int, dict[tuple[int, int], ParamVector]]


def sample_nodes(world: World, round_idx: int) -> list[int]:
    """``ceil(C * L)`` active platforms, uniformly without replacement."""
    pool = world.active_platforms
    k = min(len(pool), math.ceil(world.config.training.sample_fraction * len(pool) - 1e-12))
    rng = rng_for(world.seed, "sample", 0, round_idx)
    return sorted(int(pool[i]) for i in rng.choice(len(pool), size=k, replace=False))


def draw_staleness(seed: int, node_id: int, round_idx: int, max_staleness: int) -> int:
    """Seeded jitter in ``[0, max_staleness]``, capped so the snapshot exists (round >= 0)."""
    if max_staleness <= 0:
        return 0
    s = int(rng_for(seed, "jitter", node_id, round_idx).integers(0, max_staleness + 1))
    return min(s, round_idx)


def _snapshot(world: World) -> dict[int, Snapshot]:
    snap = {}
    for mid, agg in world.aggregators.items():
        if agg.clusters is None:
            snap[mid] = Snapshot(agg.params)
        else:
            snap[mid] = Snapshot(agg.params, tuple(agg.clusters.centers), dict(agg.clusters.assignment))
    return snap


def _node_work(world: World, node_id: int, round_idx: int, snap: dict[int, Snapshot],
               staleness: int) -> NodeResult:
    cfg = world.config
    tr = cfg.training
    node = world.nodes[node_id]
    result = NodeResult(node_id, [], {}, {})
    for mid in world.eligible[node_id]:
        spec = world.spec(mid)
        policy = world.policies[mid]
        s = snap[mid]
        for tid, count in sorted(teacher_counts(world, node_id, mid, round_idx).items()):
            demos = generate_demonstrations(world.teachers[tid], spec, policy, count,
                                            rng_for(world.seed, f"demo-{mid}-{tid}", node_id, round_idx),
                                            round_idx, cfg.data.input_scale)
            node.store(demos)
            center = None
            start = s.params
            if s.centers:
                # start from the center that best fits the stored demonstrations (computed on the
                # node); starting from last round's assignment would lock contributors in
                X, Y = stack(node.datasets[(mid, tid)])
                losses = [evaluate_loss(world.network(mid, c), X, Y, spec.loss) for c in s.centers]
                center = int(np.argmin(losses))
                start = s.centers[center]
            # local training sees everything the node has stored for this (model, teacher)
            delta = local_update(world.network(mid, start), node.datasets[(mid, tid)], tr.lr_local, tr.epochs, spec.loss,
                                 tr.batch_size, rng_for(world.seed, f"sgd-{mid}-{tid}", node_id, round_idx),
                                 node_id, tr.weight_decay, staleness)
            if center is not None:
                delta = LocalDelta(delta.model_id, delta.node_id, delta.teacher_id, delta.delta,
                                   delta.sample_count, delta.staleness, center)
            local = start + delta.delta
            node.local_models[(mid, tid)] = local
            profile = update_profile(node.profile(mid, tid, tr.profile_dim), demos, policy,
                                     tr.profile_decay)
            node.profiles[(mid, tid)] = profile
            result.deltas.append(delta)
            result.profiles.setdefault(mid, {})[(node_id, tid)] = profile
            result.local_models.setdefault(mid, {})[(node_id, tid)] = local
    return result


def _run_round(world: World, round_idx: int, staleness_of: Callable[[int], int]) -> RoundReport:
    t0 = time.perf_counter()
    cfg = world.config
    world.snapshots[round_idx] = _snapshot(world)
    keep = cfg.asynchronous.max_staleness if cfg.asynchronous.enabled else 0
    for r in [r for r in world.snapshots if r < round_idx - keep]:
        del world.snapshots[r]

    sampled = sample_nodes(world, round_idx)
    stale = {nid: staleness_of(nid) for nid in sampled}
    jobs = [(nid, world.snapshots[round_idx - stale[nid]], stale[nid]) for nid in sampled]
    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda j: _node_work(world, j[0], round_idx, j[1], j[2]), jobs))
    else:
        results = [_node_work(world, nid, round_idx, snap, s) for nid, snap, s in jobs]
    results.sort(key=lambda r: r.node_id)

    aggregation, assignments, participants = {}, {}, []
    for mid, agg in sorted(world.aggregators.items()):
        deltas = [d for r in results for d in r.deltas if d.model_id == mid]
        profiles = {k: v for r in results for k, v in r.profiles.get(mid, {}).items()}
        local_models = {k: v for r in results for k, v in r.local_models.get(mid, {}).items()}
        aggregation[mid] = agg.aggregate(deltas, profiles, cfg.training.lr_global, local_models)
        participants += [[mid, d.node_id, d.teacher_id] for d in deltas]
        if "assignments" in aggregation[mid]:
            assignments[mid] = aggregation[mid]["assignments"]
    participants.sort()

    cross = _cross_task_step(world, round_idx, sampled)
    ev = evaluate(world)
    hist: dict[int, int] = {}
    for nid in sampled:
        hist[stale[nid]] = hist.get(stale[nid], 0) + 1
    report = RoundReport(
        round=round_idx,
        sampled_nodes=sampled,
        participants=participants,
        global_loss=ev["global_loss"],
        personalized_loss=ev["personalized_loss"],
        param_norms={mid: agg.params.norm() for mid, agg in sorted(world.aggregators.items())},
        aggregation=aggregation,
        cluster_assignments=assignments,
        center_losses=ev.get("center_losses", {}),
        cross_task=cross,
        staleness_histogram=dict(sorted(hist.items())),
    )
    world.next_round = round_idx + 1
    report.duration_s = time.perf_counter() - t0
    return report


def _cross_task_step(world: World, round_idx: int, sampled: list[int]) -> dict[str, Any]:
    cfg = world.config.cross_task
    diag: dict[str, Any] = {}
    if world.transfer or world.multitask is not None:
        models = world.global_params()
        updated, d = coupling_step(models, world.transfer, world.multitask, cfg.coupling_lr)
        for mid, params in updated.items():
            world.aggregators[mid].params = params
        diag.update(d)
        if world.multitask is not None:
            world.multitask = update_omega(world.multitask, world.global_params(),
                                           world.config.cross_task.multitask.ridge)
            diag["omega"] = world.multitask.omega.tolist()
            diag["omega_inv_trace"] = float(np.trace(world.multitask.omega_inv))
    if cfg.meta.enabled:
        models = {mid: world.network(mid, agg.params) for mid, agg in sorted(world.aggregators.items())}
        losses = {mid: world.spec(mid).loss for mid in models}
        nodes = [world.nodes[n] for n in sampled]
        updated, d = meta_round(models, sorted(world.teachers), nodes, cfg.meta.config,
                                rng_for(world.seed, "meta", 0, round_idx), losses)
        for mid, params in updated.items():
            world.aggregators[mid].params = params
        diag["meta"] = d
    return diag


def run_round_sync(world: World, round_idx: int | None = None) -> RoundReport:
    r = world.next_round if round_idx is None else round_idx
    return _run_round(world, r, lambda nid: 0)


def run_round_async(world: World, round_idx: int | None = None) -> RoundReport:
    """Bounded staleness: each sampled node trains against the global state from ``round - s``."""
    r = world.next_round if round_idx is None else round_idx
    max_s = world.config.asynchronous.max_staleness
    return _run_round(world, r, lambda nid: draw_staleness(world.seed, nid, r, max_s))


def run_round(world: World) -> RoundReport:
    if world.config.asynchronous.enabled:
        return run_round_async(world)
    return run_round_sync(world)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_record(record: dict[str, Any]) -> str:
    return json.dumps(_jsonable(record), sort_keys=True, separators=(",", ":"), allow_nan=True)


def summary_record(world: World, reports: list[RoundReport]) -> dict[str, Any]:
    ev = evaluate(world)
    return {
        "type": "summary",
        "scenario": world.config.name,
        "seed": world.seed,
        "rounds": len(reports),
        "strategy": world.config.strategy.kind.value,
        "final_global_loss": ev["global_loss"],
        "final_personalized_loss": ev["personalized_loss"],
        "mean_personalized_loss": mean_personalized_loss(ev),
        "initial_global_loss": reports[0].global_loss if reports else {},
    }


def write_checkpoints(world: World, out_dir: Path) -> list[Path]:
    paths = []
    for mid, agg in sorted(world.aggregators.items()):
        path = out_dir / f"model_{mid}.flfd"
        checkpoint.save(path, agg.params, {"model_id": mid, "round": world.next_round,
                                           "name": world.spec(mid).name})
        paths.append(path)
        if agg.clusters is not None:
            for eta, c in enumerate(agg.clusters.centers):
                path = out_dir / f"model_{mid}_center_{eta}.flfd"
                checkpoint.save(path, c, {"model_id": mid, "center": eta, "round": world.next_round})
                paths.append(path)
    return paths


def run(config: ScenarioConfig, out_dir: str | Path | None = None,
        on_report: Callable[[RoundReport], None] | None = None) -> tuple[World, list[RoundReport]]:
    """Build the world and run ``config.rounds`` rounds.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per round plus
    a final summary) and, unless disabled, one checkpoint per global model.
    """
    world = build_scenario(config)
    reports: list[RoundReport] = []
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
    try:
        for _ in range(config.rounds):
            report = run_round(world)
            reports.append(report)
            if fh is not None:
                fh.write(dumps_record(report.to_record(config.output.record_timing)) + "\n")
            if on_report is not None:
                on_report(report)
            log.info("round %d global=%s", report.round, report.global_loss)
        if fh is not None:
            fh.write(dumps_record(summary_record(world, reports)) + "\n")
    finally:
        if fh is not None:
            fh.close()
    if out is not None and config.output.checkpoints:
        write_checkpoints(world, out)
    return world, reports


def initial_checkpoints(config: ScenarioConfig) -> dict[int, bytes]:
    world = build_scenario(config)
    return {mid: checkpoint.encode(agg.params, {"model_id": mid})
            for mid, agg in sorted(world.aggregators.items())}


def iter_records(path: str | Path) -> Iterable[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
