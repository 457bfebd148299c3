import time

import numpy as np
import pytest

from fedlfd import config, harness
from fedlfd.aggregation import StrategyKind
from fedlfd.node import stack
from fedlfd.scenario import build_scenario, evaluate, teacher_counts


def least_squares(world, model_id=1):
    data = [d for n in world.nodes.values() for k, buf in n.datasets.items() if k[0] == model_id
            for d in buf]
    X, Y = stack(data)
    B, *_ = np.linalg.lstsq(np.hstack([X, np.ones((len(X), 1))]), Y, rcond=None)
    return np.concatenate([B[:-1].T.ravel(), B[-1]])


def metrics_bytes(cfg, path):
    harness.run(cfg, path)
    return (path / "metrics.jsonl").read_bytes()


def test_single_node_single_teacher_global_equals_local():
    cfg = config.preset("linear")
    cfg = cfg.replace(platforms=cfg.platforms[:1], teachers=cfg.teachers[:1], rounds=1)
    world, _ = harness.run(cfg)
    local = world.nodes[1].local_models[(1, 1)]
    assert world.aggregators[1].params.equals(local)


def test_same_seed_same_bytes_any_worker_count(tmp_path):
    cfg = config.preset("crm").replace(rounds=4)
    a = metrics_bytes(cfg, tmp_path / "a")
    b = metrics_bytes(cfg, tmp_path / "b")
    c = metrics_bytes(cfg.replace(workers=4), tmp_path / "c")
    assert a == b == c
    for name in ("model_1.flfd", "model_2.flfd", "model_3.flfd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_different_seed_differs(tmp_path):
    cfg = config.preset("crm").replace(rounds=2)
    assert metrics_bytes(cfg, tmp_path / "a") != metrics_bytes(cfg.replace(seed=1), tmp_path / "b")


@pytest.mark.parametrize("name", ["crm", "two-cluster"])
def test_async_without_staleness_is_sync(tmp_path, name):
    cfg = config.preset(name).replace(rounds=6)
    sync = metrics_bytes(cfg, tmp_path / "s")
    asyn = metrics_bytes(cfg.with_settings("asynchronous", enabled=True, max_staleness=0), tmp_path / "a")
    assert sync == asyn


def test_staleness_histogram_recount():
    cfg = config.preset("linear").replace(rounds=8).with_settings(
        "asynchronous", enabled=True, max_staleness=2)
    world, reports = harness.run(cfg)
    for rep in reports:
        expected = {}
        for nid in harness.sample_nodes(world, rep.round):
            s = harness.draw_staleness(cfg.seed, nid, rep.round, 2)
            expected[s] = expected.get(s, 0) + 1
        assert rep.staleness_histogram == expected
    assert sum(reports[-1].staleness_histogram.values()) == len(reports[-1].sampled_nodes)
    assert any(k > 0 for rep in reports for k in rep.staleness_histogram)


def test_bounded_staleness_still_converges():
    cfg = config.preset("linear").with_settings("asynchronous", enabled=True, max_staleness=2)
    world, _ = harness.run(cfg)
    err = np.linalg.norm(world.aggregators[1].params.values - least_squares(world))
    assert err < 5e-3


def test_crm_preset_shape():
    world = build_scenario(config.preset("crm"))
    assert len(world.registry.platforms) == 6
    assert [m.spec.name for m in world.registry.models] == [
        "sensing-classification", "manipulation-regression", "navigation-regression"]
    assert world.clusters == [0, 1]
    by_cluster = {}
    for t in world.teachers.values():
        by_cluster.setdefault(t.cluster_tag, []).append(t.bias_for(2, 3))
    np.testing.assert_array_equal(by_cluster[0][0], -by_cluster[1][0])


def test_initial_checkpoints_repeatable():
    cfg = config.preset("crm")
    assert harness.initial_checkpoints(cfg) == harness.initial_checkpoints(cfg)


def test_idle_platform_excluded():
    cfg = config.preset("crm")
    world = build_scenario(cfg)
    assert world.active_platforms == [1, 2, 3, 4, 5, 6]
    idle = cfg.platforms[0].__class__(7, {"Vision"}, {"UAV"}, {"Control"})
    world = build_scenario(cfg.replace(platforms=cfg.platforms + (idle,)))
    assert 7 not in world.active_platforms


def test_teacher_counts_sum_to_samples():
    world = build_scenario(config.preset("crm"))
    for nid in world.active_platforms:
        counts = teacher_counts(world, nid, 2, 0)
        assert sum(counts.values()) == world.config.data.samples_per_node


def test_perfect_model_has_zero_loss():
    world = build_scenario(config.preset("linear"))
    world.aggregators[1].params = world.policies[1].network.params
    assert evaluate(world)["global_loss"][1] == 0.0


def test_personalized_targets_carry_teacher_bias():
    world = build_scenario(config.preset("two-cluster"))
    X, truth = world.eval_sets[1]
    np.testing.assert_allclose(world.teacher_eval[(1, 1)] - truth, np.tile([1.5, -1.0], (len(X), 1)))
    np.testing.assert_allclose(world.teacher_eval[(1, 3)] - truth, np.tile([-1.5, 1.0], (len(X), 1)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_lowers_global_loss(seed):
    cfg = config.preset("crm").replace(seed=seed, rounds=10)
    world = build_scenario(cfg)
    before = evaluate(world)["global_loss"]
    _, reports = harness.run(cfg)
    after = reports[-1].global_loss
    assert all(after[m] < before[m] for m in before)


@pytest.mark.parametrize("kind", list(StrategyKind))
def test_every_strategy_runs(kind, quiet):
    cfg = config.preset("adversarial").replace(rounds=8).with_settings("strategy", kind=kind)
    _, reports = harness.run(cfg)
    assert all(np.isfinite(v) for v in reports[-1].global_loss.values())


def test_summary_record(tmp_path):
    cfg = config.preset("linear").replace(rounds=3)
    harness.run(cfg, tmp_path)
    records = list(harness.iter_records(tmp_path / "metrics.jsonl"))
    assert [r["type"] for r in records] == ["round"] * 3 + ["summary"]
    assert records[-1]["rounds"] == 3
    assert records[-1]["final_global_loss"]["1"] == records[-2]["global_loss"]["1"]


def test_timing_is_opt_in(tmp_path):
    cfg = config.preset("linear").replace(rounds=1)
    harness.run(cfg, tmp_path / "a")
    harness.run(cfg.with_settings("output", record_timing=True), tmp_path / "b")
    a = next(harness.iter_records(tmp_path / "a" / "metrics.jsonl"))
    b = next(harness.iter_records(tmp_path / "b" / "metrics.jsonl"))
    assert "duration_s" not in a and b["duration_s"] >= 0


def test_crm_round_under_one_second():
    world = build_scenario(config.preset("crm"))
    worst = 0.0
    for _ in range(10):
        t0 = time.perf_counter()
        harness.run_round(world)
        worst = max(worst, time.perf_counter() - t0)
    assert worst < 1.0
