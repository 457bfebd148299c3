import numpy as np
import pytest

from fedlfd.errors import UsageError
from fedlfd.node import (
    Demonstration,
    NodeState,
    TeacherSpec,
    UserProfile,
    generate_demonstrations,
    local_params,
    local_update,
    stack,
    update_profile,
)
from fedlfd.scenario import GroundTruthPolicy
from fedlfd.taxonomy import ModelSpec
from fedlfd.tensor import Activation, MlpModel, ParamVector, mlp_shape_meta

SPEC = ModelSpec(1, {"Vision"}, {"Arm"}, {"Manipulation"}, (3, 2))
POLICY = GroundTruthPolicy.build(1, 3, 2, "linear", seed=4)


def one_param(w=0.0):
    return MlpModel((1, 1), ParamVector(np.array([w]), mlp_shape_meta((1, 1), False)),
                    Activation.IDENTITY, use_bias=False)


def demos(teacher, n=20, seed=0):
    return generate_demonstrations(teacher, SPEC, POLICY, n, seed)


class TestGenerate:
    def test_perfect_teacher_gives_truth(self):
        data = demos(TeacherSpec(1, [5.0, 5.0], noise_scale=0.0, skill=1.0))
        X, Y = stack(data)
        np.testing.assert_array_equal(Y, POLICY(X))

    def test_unskilled_teacher_adds_bias(self):
        X, Y = stack(demos(TeacherSpec(1, [1.0, 0.0], noise_scale=0.0, skill=0.0)))
        np.testing.assert_allclose(Y - POLICY(X), np.tile([1.0, 0.0], (len(X), 1)), atol=1e-15)

    def test_same_seed_same_list(self):
        t = TeacherSpec(1, [0.3, 0.1], noise_scale=0.5, skill=0.2)
        a, b = demos(t, seed=9), demos(t, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.input, y.input) and np.array_equal(x.target, y.target)

    def test_classification_targets_are_indices(self):
        spec = ModelSpec(2, {"Vision"}, {"Arm"}, {"Sensing"}, (3, 4), "cross_entropy")
        policy = GroundTruthPolicy.build(2, 3, 4, seed=1)
        data = generate_demonstrations(TeacherSpec(1, skill=1.0), spec, policy, 10, 0)
        assert all(isinstance(d.target, int) and 0 <= d.target < 4 for d in data)

    def test_per_model_bias(self):
        t = TeacherSpec(1, {1: [2.0, 0.0]}, skill=0.0)
        assert t.bias_for(1, 2).tolist() == [2.0, 0.0]
        assert t.bias_for(3, 2).tolist() == [0.0, 0.0]

    def test_invalid_teacher(self):
        with pytest.raises(UsageError):
            TeacherSpec(1, skill=1.5)
        with pytest.raises(UsageError):
            TeacherSpec(1, noise_scale=-1.0)


class TestLocalUpdate:
    def test_hand_sgd_step(self):
        spec = ModelSpec(1, {"Vision"}, {"Arm"}, {"Manipulation"}, (1, 1), use_bias=False)
        data = [Demonstration(spec.id, 1, np.array([1.0]), np.array([2.0]))]
        d = local_update(one_param(), data, lr=0.1, epochs=1, batch_size=1)
        assert d.delta.values[0] == pytest.approx(0.4, abs=1e-15)
        assert local_params(one_param().params, d).values[0] == pytest.approx(0.4, abs=1e-15)

    def test_zero_epochs_zero_delta(self):
        data = demos(TeacherSpec(1, noise_scale=0.1))
        d = local_update(MlpModel.create((3, 2), seed=0), data, 0.1, epochs=0)
        assert not np.any(d.delta.values)

    def test_non_positive_rate_rejected(self):
        with pytest.raises(UsageError):
            local_update(MlpModel.create((3, 2), seed=0), demos(TeacherSpec(1)), 0.0, 1)

    def test_repeatable(self):
        data = demos(TeacherSpec(1, noise_scale=0.3))
        m = MlpModel.create((3, 2), seed=0)
        a = local_update(m, data, 0.05, 2, seed=3)
        b = local_update(m, data, 0.05, 2, seed=3)
        assert a.delta.equals(b.delta)

    def test_local_model_is_global_plus_delta_bitwise(self):
        m = MlpModel.create((3, 2), seed=0)
        d = local_update(m, demos(TeacherSpec(1, noise_scale=0.3)), 0.05, 1)
        assert np.array_equal(local_params(m.params, d).values, m.params.values + d.delta.values)

    def test_mixed_sources_rejected(self):
        data = demos(TeacherSpec(1)) + demos(TeacherSpec(2))
        with pytest.raises(UsageError):
            local_update(MlpModel.create((3, 2), seed=0), data, 0.1, 1)


class TestProfile:
    def test_perfect_teacher_mean_is_zero(self):
        t = TeacherSpec(1, skill=1.0)
        p = update_profile(UserProfile(1), demos(t, 50), POLICY)
        assert np.all(p.embedding == 0.0)

    def test_constant_bias_fixed_point(self):
        t = TeacherSpec(1, [1.0, 0.0], skill=0.0)
        p = UserProfile(1)
        for r in range(10):
            p = update_profile(p, demos(t, 20, seed=r), POLICY)
        half = p.dim // 2
        np.testing.assert_allclose(p.embedding[:half], [1.0, 0.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(p.embedding[half:], 0.0, atol=1e-6)

    def test_identical_teachers_identical_profiles(self):
        a = update_profile(UserProfile(1), demos(TeacherSpec(1, [0.2], 0.4), seed=3), POLICY)
        b = update_profile(UserProfile(1), demos(TeacherSpec(1, [0.2], 0.4), seed=3), POLICY)
        assert np.array_equal(a.embedding, b.embedding)

    def test_noise_shows_in_std_half(self):
        p = update_profile(UserProfile(1), demos(TeacherSpec(1, noise_scale=2.0, skill=0.0), 200), POLICY)
        assert p.embedding[4:6].min() > 1.0

    def test_wrong_teacher_rejected(self):
        with pytest.raises(UsageError):
            update_profile(UserProfile(2), demos(TeacherSpec(1)), POLICY)

    def test_dimension_drift_rejected(self):
        p = UserProfile(1, residual_dim=3)
        with pytest.raises(UsageError):
            update_profile(p, demos(TeacherSpec(1)), POLICY)


def test_buffer_is_capped_to_newest():
    node = NodeState(1, buffer_size=5)
    for r in range(3):
        node.store(generate_demonstrations(TeacherSpec(1), SPEC, POLICY, 4, r, round_stamp=r))
    buf = node.datasets[(1, 1)]
    assert len(buf) == 5
    assert [d.round_stamp for d in buf] == [1, 2, 2, 2, 2]
