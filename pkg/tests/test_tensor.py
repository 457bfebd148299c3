import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_fd, rel_err
from fedlfd.errors import NumericError, ShapeError, UsageError
from fedlfd.tensor import (
    Activation,
    LossKind,
    MlpModel,
    ParamVector,
    batch_loss_and_grad,
    forward,
    loss_and_grad,
    mlp_shape_meta,
    sgd_step,
)


def linear(w, b=None, activation=Activation.IDENTITY):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    sizes = (w.shape[1], w.shape[0])
    values = w.ravel() if b is None else np.concatenate([w.ravel(), b])
    meta = mlp_shape_meta(sizes, use_bias=b is not None)
    return MlpModel(sizes, ParamVector(values, meta), activation, use_bias=b is not None)


class TestParamVector:
    def test_layout_and_slices(self):
        meta = mlp_shape_meta((2, 3, 1))
        assert [m[0] for m in meta] == ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]
        p = ParamVector(np.arange(13.0), meta)
        assert p.layer("layer0.weight").shape == (3, 2)
        assert p.layer("layer1.bias").tolist() == [[12.0]]

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ParamVector(np.zeros(5), mlp_shape_meta((2, 3, 1)))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            ParamVector(np.array([np.nan, 0.0]), mlp_shape_meta((1, 1)))

    def test_values_are_read_only(self):
        p = ParamVector(np.zeros(2), mlp_shape_meta((1, 1)))
        with pytest.raises(ValueError):
            p.values[0] = 1.0

    def test_arithmetic(self):
        meta = mlp_shape_meta((1, 1))
        a, b = ParamVector(np.array([1.0, 2.0]), meta), ParamVector(np.array([0.5, -1.0]), meta)
        assert (a + b).values.tolist() == [1.5, 1.0]
        assert (a - b).values.tolist() == [0.5, 3.0]
        assert a.scale(2).values.tolist() == [2.0, 4.0]
        assert a.norm() == pytest.approx(np.sqrt(5))


class TestForward:
    def test_zero_weights_give_zero_output(self):
        m = MlpModel.create((3, 4, 2), seed=1)
        m = m.with_params(m.params.zeros_like())
        assert np.array_equal(forward(m, [0.3, -2.0, 5.0]), np.zeros(2))

    def test_hand_matrix_multiply(self):
        assert forward(linear([[2.0]], [1.0]), [3.0]).tolist() == [7.0]

    def test_frozen_reference_value(self):
        # computed once with a plain-python tanh/affine pass over the seed-7 parameters
        m = MlpModel.create((2, 3, 1), seed=7)
        assert forward(m, [1.0, 0.0])[0] == pytest.approx(-0.19091439891925527, abs=1e-15)

    def test_batch_rows_match_single_calls(self):
        m = MlpModel.create((3, 5, 2), seed=2)
        X = np.random.default_rng(0).standard_normal((4, 3))
        out = forward(m, X)
        for i in range(4):
            np.testing.assert_allclose(out[i], forward(m, X[i]), rtol=0, atol=1e-15)

    def test_input_dimension_checked(self):
        with pytest.raises(ShapeError):
            forward(MlpModel.create((3, 2), seed=0), [1.0, 2.0])

    def test_forward_is_pure(self):
        m = MlpModel.create((2, 3, 1), seed=7)
        before = m.params.values.copy()
        forward(m, [1.0, 2.0])
        loss_and_grad(m, [([1.0, 2.0], [0.5])])
        np.testing.assert_array_equal(m.params.values, before)


class TestLossAndGrad:
    def test_perfect_fit_has_zero_loss_and_gradient(self):
        m = MlpModel.create((2, 4, 3), seed=3)
        X = np.random.default_rng(1).standard_normal((5, 2))
        value, g = batch_loss_and_grad(m, X, forward(m, X))
        assert value == 0.0
        assert not np.any(g.values)

    def test_one_parameter_hand_case(self):
        value, g = loss_and_grad(linear([[0.0]]), [([1.0], [2.0])])
        assert value == 4.0
        assert g.values.tolist() == [-4.0]

    @pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
    @pytest.mark.parametrize("activation", ["tanh", "relu", "identity"])
    def test_matches_finite_differences(self, loss, activation):
        rng = np.random.default_rng(11)
        m = MlpModel.create((3, 5, 4, 3), seed=4, activation=activation)
        X = rng.standard_normal((6, 3))
        Y = rng.integers(0, 3, 6) if loss == "cross_entropy" else rng.standard_normal((6, 3))
        _, g = batch_loss_and_grad(m, X, Y, loss, weight_decay=0.01)
        fd = central_fd(lambda v: batch_loss_and_grad(m.with_params(m.params.with_values(v)),
                                                      X, Y, loss, 0.01)[0], m.params.values)
        assert rel_err(g.values, fd) < 1e-5

    def test_no_bias_layout(self):
        m = MlpModel.create((2, 3, 1), seed=0, use_bias=False)
        assert len(m.params) == 2 * 3 + 3
        _, g = loss_and_grad(m, [([1.0, 1.0], [0.0])])
        assert len(g) == len(m.params)

    def test_bad_class_index(self):
        with pytest.raises(ShapeError):
            loss_and_grad(MlpModel.create((2, 3), seed=0), [([1.0, 0.0], 3)], LossKind.CROSS_ENTROPY)

    def test_overflow_reports_layer(self):
        m = MlpModel.create((1, 2, 1), seed=0, activation=Activation.IDENTITY)
        m = m.with_params(m.params.with_values(np.full(len(m.params), 1e200)))
        with pytest.raises(NumericError) as exc:
            loss_and_grad(m, [([1e200], [0.0])])
        assert exc.value.layer is not None


class TestSgd:
    def test_zero_gradient_is_a_no_op(self):
        p = MlpModel.create((2, 2), seed=0).params
        assert sgd_step(p, p.zeros_like(), 0.1).equals(p)

    def test_hand_step(self):
        meta = mlp_shape_meta((1, 1), use_bias=False)
        out = sgd_step(ParamVector(np.array([0.0]), meta), ParamVector(np.array([-4.0]), meta), 0.1)
        assert out.values[0] == pytest.approx(0.4, abs=1e-15)

    @pytest.mark.parametrize("lr", [0.0, -1.0])
    def test_non_positive_rate_rejected(self, lr):
        p = MlpModel.create((1, 1), seed=0).params
        with pytest.raises(UsageError):
            sgd_step(p, p, lr)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.integers(0, 2**31))
    def test_linear_in_the_gradient(self, a, b, seed):
        rng = np.random.default_rng(seed)
        meta = mlp_shape_meta((3, 2))
        p, g = (ParamVector(rng.standard_normal(8), meta) for _ in range(2))
        two = sgd_step(sgd_step(p, g, a), g, b)
        np.testing.assert_allclose(two.values, sgd_step(p, g, a + b).values, rtol=0, atol=1e-12)
