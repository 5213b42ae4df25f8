import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fidel.nn import (
    CCE,
    MSE,
    SGD,
    Adadelta,
    LayerSpec,
    Model,
    ShapeError,
    activate,
    adadelta_step,
    build_generator,
    build_victim,
    conv2d,
    conv_transpose2d,
    dense,
    dropout,
    load_model,
    load_tensors,
    loss,
    max_pool2d,
    save_model,
    save_tensors,
    sgd_step,
    tree_equal,
)
from fidel.nn.serialize import ContainerError, read_container

from oracles import adadelta_reference, gradcheck_cases, numeric_gradients, relative_error

CASES = list(gradcheck_cases(seed=0))


@pytest.mark.parametrize("case", CASES, ids=[c[0] for c in CASES])
def test_backprop_matches_finite_differences(case):
    _, model, x, y, loss_kind, training = case
    trace = model.forward(x, training=training, rng=np.random.default_rng(0))
    grads, dx = model.backward(trace, y, loss_kind, input_grad=True)
    num_grads, num_dx = numeric_gradients(model, x, y, loss_kind, training=training, seed=0)
    for layer, num in zip(grads, num_grads):
        for name in num:
            assert relative_error(layer[name], num[name]) < 1e-4, name
    assert relative_error(dx, num_dx) < 1e-4


def test_parameter_gradients_do_not_depend_on_input_grad_flag():
    model = build_victim("cnn", "mnist", seed=3)
    x = np.random.default_rng(0).random((4, 28, 28, 1))
    y = np.eye(10)[[1, 2, 3, 4]]
    trace = model.forward(x)
    with_dx, _ = model.backward(trace, y, input_grad=True)
    assert tree_equal(model.backward(trace, y), with_dx)


def test_gradcheck_covers_every_layer_kind_and_activation():
    labels = {c[0].split("/")[0] for c in CASES}
    kinds = {lab.split("-")[0] for lab in labels}
    assert {"Dense", "Conv2D", "ConvT", "MaxPool2D", "Upsample2D", "Reshape", "Dropout", "BatchNorm"} <= kinds
    assert {c[0].split("/")[1] for c in CASES} == {"None", "relu", "sigmoid", "tanh", "softmax"}
    assert len(CASES) >= 50


class TestActivations:
    def test_softmax_rows_sum_to_one_and_survive_large_logits(self):
        z = np.array([[1000.0, 1000.0, -1000.0], [0.0, 1.0, 2.0]])
        p = activate(z, "softmax")
        assert np.allclose(p.sum(axis=1), 1.0)
        assert np.allclose(p[0], [0.5, 0.5, 0.0])
        assert np.all(np.isfinite(p))

    def test_sigmoid_is_overflow_free(self):
        with np.errstate(all="raise"):
            s = activate(np.array([-1e4, 0.0, 1e4]), "sigmoid")
        assert s.tolist() == [0.0, 0.5, 1.0]

    @pytest.mark.parametrize("kind, value", [("relu", 0.0), ("tanh", math.tanh(-2.0)), (None, -2.0)])
    def test_pointwise_values(self, kind, value):
        assert activate(np.array([-2.0]), kind)[0] == pytest.approx(value)


class TestLayers:
    def test_maxpool_ties_go_to_first_max(self):
        model = Model([max_pool2d(2)], (2, 2, 1))
        x = np.ones((1, 2, 2, 1))
        trace = model.forward(x)
        dx = model.layers[0].backward(np.ones((1, 1, 1, 1)), trace.caches[0])[0]
        assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_dropout_is_identity_at_inference_and_scaled_in_training(self):
        model = Model([dropout(0.5)], (1000,))
        x = np.ones((2, 1000))
        assert np.array_equal(model.forward(x).output, x)
        out = model.forward(x, training=True, rng=np.random.default_rng(0)).output
        assert set(np.unique(out)) == {0.0, 2.0}
        assert 0.4 < (out == 0).mean() < 0.6

    def test_dropout_masks_repeat_for_the_same_rng_seed(self):
        model = Model([dense(8), dropout(0.5)], (4,))
        x = np.ones((3, 4))
        a = model.forward(x, training=True, rng=np.random.default_rng(5)).output
        b = model.forward(x, training=True, rng=np.random.default_rng(5)).output
        assert np.array_equal(a, b)

    @pytest.mark.parametrize(
        "spec, shape, out",
        [
            (conv2d(4, 3), (8, 8, 2), (6, 6, 4)),
            (conv2d(4, 3, 2, "same"), (7, 7, 2), (4, 4, 4)),
            (conv_transpose2d(3, 5, 2, "same"), (15, 15, 2), (30, 30, 3)),
            (conv_transpose2d(3, 5, 1, "valid"), (30, 30, 2), (34, 34, 3)),
            (max_pool2d(2), (27, 27, 3), (13, 13, 3)),
        ],
    )
    def test_output_shapes(self, spec, shape, out):
        assert Model([spec], shape).output_shape == out

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        model = Model([conv2d(2, 3, 2)], (7, 7, 3), seed=1)
        x = rng.normal(size=(2, 7, 7, 3))
        w, b = model.layers[0].params["W"], model.layers[0].params["b"]
        want = np.zeros((2, 3, 3, 2))
        for n in range(2):
            for i in range(3):
                for j in range(3):
                    patch = x[n, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    want[n, i, j] = np.tensordot(patch, w, axes=3) + b
        assert np.allclose(model.forward(x).output, want)

    def test_conv_transpose_is_adjoint_of_conv(self):
        # <conv(x), y> == <x, convT(y)> when both share the kernel and biases are zero
        rng = np.random.default_rng(2)
        conv = Model([conv2d(3, 5, 2)], (13, 13, 2), seed=0)
        convt = Model([conv_transpose2d(2, 5, 2)], (5, 5, 3), seed=0)
        w = rng.normal(size=(5, 5, 2, 3))
        conv.layers[0].params["W"] = w
        convt.layers[0].params["W"] = w.transpose(0, 1, 3, 2)
        x = rng.normal(size=(1, 13, 13, 2))
        y = rng.normal(size=(1, 5, 5, 3))
        lhs = np.sum(conv.forward(x).output * y)
        rhs = np.sum(x * convt.forward(y).output)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_shape_errors_name_the_layer(self):
        with pytest.raises(ShapeError, match=r"layer 1 \(Conv2D\)"):
            Model([dense(4), conv2d(2, 3)], (5,))
        model = build_victim("fcnn")
        with pytest.raises(ShapeError, match="layer 0"):
            model.forward(np.zeros((1, 32, 32, 3)))

    def test_layer_spec_round_trips_through_json(self):
        spec = conv_transpose2d(64, 5, 2, "same", "relu")
        assert LayerSpec.from_dict(spec.to_dict()) == spec
        assert "ConvTranspose2D" in str(spec)


class TestArchitectures:
    def test_victims(self):
        fcnn = build_victim("fcnn", "mnist", dropout_rate=0.5)
        assert [l.kind for l in fcnn.layers] == ["Dense", "Dropout", "Dense", "Dense", "Dense"]
        cnn = build_victim("cnn", "cifar10")
        assert cnn.layers[1].output_shape == (15, 15, 32)
        assert build_victim("cnn", "mnist").layers[1].output_shape == (13, 13, 32)
        assert fcnn.output_shape == cnn.output_shape == (10,)

    def test_generator_shapes(self):
        mnist = build_generator("mnist")
        assert [l.output_shape for l in mnist.layers[:5]] == [(26, 26, 32), (22, 22, 20), (44, 44, 20),
                                                             (20, 20, 10), (4000,)]
        assert mnist.output_shape == (28, 28, 1)
        cifar = build_generator("cifar10")
        assert [l.output_shape[:2] for l in cifar.layers] == [(15, 15), (30, 30), (30, 30), (34, 34), (32, 32),
                                                             (32, 32)]
        assert cifar.output_shape == (32, 32, 3)

    def test_same_seed_same_weights(self):
        assert tree_equal(build_victim(seed=4).params, build_victim(seed=4).params)
        assert not tree_equal(build_victim(seed=4).params, build_victim(seed=5).params)


class TestLosses:
    def test_cce_of_uniform_prediction(self):
        p = np.full((2, 4), 0.25)
        y = np.eye(4)[[0, 3]]
        assert loss(p, y, CCE) == pytest.approx(math.log(4))

    def test_cce_rejects_soft_targets(self):
        with pytest.raises(ValueError):
            loss(np.full((1, 2), 0.5), np.array([[0.3, 0.7]]), CCE)

    def test_mse_is_mean_over_elements(self):
        assert loss(np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 1.0]]), MSE) == 0.5


class TestOptimizers:
    def test_sgd_step(self):
        model = Model([dense(1)], (1,))
        model.layers[0].params.update(W=np.array([[2.0]]), b=np.array([1.0]))
        sgd_step(model, [{"W": np.array([[10.0]]), "b": np.array([-5.0])}], 0.01)
        assert model.layers[0].params["W"][0, 0] == pytest.approx(1.9)
        assert model.layers[0].params["b"][0] == pytest.approx(1.05)
        assert SGD(lr=0.0).step(model, [{"W": np.ones((1, 1)), "b": np.ones(1)}]) is model

    def test_adadelta_first_step(self):
        # eg = 0.05 g^2, step = -sqrt(eps)/sqrt(0.05 g^2 + eps) * g ~= -sqrt(eps / 0.05) for large g
        model = Model([dense(1)], (1,))
        model.layers[0].params.update(W=np.zeros((1, 1)), b=np.zeros(1))
        state = Adadelta(lr=1.0).init(model)
        model, state = adadelta_step(state, model, [{"W": np.array([[1.0]]), "b": np.array([0.0])}])
        assert model.layers[0].params["W"][0, 0] == pytest.approx(-1.4142e-3, rel=1e-3)
        assert model.layers[0].params["b"][0] == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(1, 6))
    def test_adadelta_matches_scalar_reference(self, grads, steps):
        model = Model([dense(1)], (2,))
        params = np.array([0.3, -0.2, 0.1])
        model.layers[0].params.update(W=params[:2].reshape(2, 1).copy(), b=params[2:].copy())
        seq = [[g * (k + 1) for g in grads] for k in range(steps)]
        state = Adadelta(lr=0.001).init(model)
        for g in seq:
            state.step(model, [{"W": np.array(g[:2]).reshape(2, 1), "b": np.array(g[2:])}])
        want, eg, ed = adadelta_reference(params, seq, 0.001, 0.95, 1e-7)
        got = np.concatenate([model.layers[0].params["W"].ravel(), model.layers[0].params["b"]])
        assert np.allclose(got, want, rtol=1e-12, atol=1e-15)


class TestSerialization:
    def test_model_round_trip_is_bit_exact(self, tmp_path):
        model = build_generator("cifar10", seed=2)
        model.layers[2].buffers["mean"] = np.linspace(0, 1, 64)
        save_model(model, tmp_path / "g.fidm")
        back = load_model(tmp_path / "g.fidm")
        assert back.same_architecture(model)
        assert tree_equal(back.params, model.params)
        assert np.array_equal(back.layers[2].buffers["mean"], model.layers[2].buffers["mean"])

    def test_truncated_and_foreign_containers_are_rejected(self, tmp_path):
        raw = save_model(build_victim(), tmp_path / "v.fidm")
        with pytest.raises(ContainerError):
            read_container(raw[:-3])
        with pytest.raises(ContainerError):
            read_container(b"XXXX" + raw[4:])
        with pytest.raises(ContainerError):
            read_container(raw + b"\0")

    def test_tensors(self, tmp_path):
        t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
        save_tensors(tmp_path / "t.fidu", t, {"k": 1})
        back, meta = load_tensors(tmp_path / "t.fidu")
        assert meta == {"k": 1}
        assert all(np.array_equal(back[k], t[k]) for k in t)
