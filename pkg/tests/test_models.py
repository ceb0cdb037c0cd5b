import numpy as np
import pytest
from numpy.testing import assert_allclose

from pathkernel.config import TRANSFORMER_COMPONENTS, ModelSpec
from pathkernel.error_handling import InvalidInputError, ShapeError, UnknownComponentError
from pathkernel.models import (
    STREAM_BATCHES,
    STREAM_INIT,
    Model,
    build_model,
    forward_logprobs,
    rng_for,
)

TINY = ModelSpec(kind="modadd_transformer", p=5, d_model=4, n_heads=2, d_head=2, d_mlp=8)
MLP = ModelSpec(kind="mlp", input_dim=3, hidden_dims=[6, 4], output_dim=3)
LINEAR = ModelSpec(kind="linear", input_dim=3, output_dim=2)


def tokens(p, pairs):
    return np.array([[a, p, b, p + 1] for a, b in pairs], dtype=np.int64)


def finite_difference_jacobian(model, flat, inputs, h=1e-6):
    columns = []
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        columns.append((model.forward(flat + step, inputs)[0] - model.forward(flat - step, inputs)[0]) / (2 * h))
    return np.stack(columns, axis=1)


def test_transformer_registry_partitions_the_parameters():
    params = build_model(TINY, seed=0)
    d, v, m = 4, 7, 8
    assert params.size == v * d + 4 * d * d + (d * m + m) + (m * d + d) + (d * v + v)
    assert params.component_names == TRANSFORMER_COMPONENTS
    params.check_partition()
    assert params.component_range("att_encoders") == (v * d, v * d + 3 * d * d)


@pytest.mark.parametrize("spec,names", [
    (MLP, ["linear1", "linear2", "decoder"]),
    (LINEAR, ["decoder"]),
])
def test_blob_model_components(spec, names):
    params = build_model(spec, seed=0)
    assert params.component_names == names
    params.check_partition()


def test_unknown_component_names_the_valid_ones():
    params = build_model(TINY, seed=0)
    with pytest.raises(UnknownComponentError, match="valid components: embedding"):
        params.component("layer_norm")


def test_wrap_rejects_wrong_size():
    with pytest.raises(ShapeError):
        Model(TINY).wrap(np.zeros(3))


def test_init_is_seeded_and_biases_start_at_zero():
    model = Model(TINY)
    a, b, c = model.init_params(0), model.init_params(0), model.init_params(1)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    offset, shape = model.layout["linear1.bias"]
    assert np.all(a.data[offset:offset + shape[0]] == 0.0)


def test_rng_streams_are_independent():
    assert not np.array_equal(rng_for(0, STREAM_INIT).random(4), rng_for(0, STREAM_BATCHES).random(4))
    assert np.array_equal(rng_for(7, STREAM_BATCHES).random(4), rng_for(7, STREAM_BATCHES).random(4))
    with pytest.raises(InvalidInputError):
        rng_for(-1)


def test_transformer_outputs_are_log_probabilities():
    model = Model(TINY)
    flat = model.init_params(3).data
    out = model.forward(flat, tokens(5, [(4, 0), (2, 2), (3, 1)]))
    assert out.shape == (3, 7)
    assert_allclose(np.log(np.exp(out).sum(axis=1)), 0.0, atol=1e-12)


@pytest.mark.parametrize("spec,inputs", [
    (TINY, tokens(5, [(3, 1)])),
    (MLP, np.array([[0.3, -1.2, 0.8]])),
])
def test_jacobian_matches_finite_differences(spec, inputs):
    model = Model(spec)
    flat = model.init_params(11).data
    out, jac = model.jacobian(flat, inputs)
    assert jac.shape == (spec.n_outputs, model.size)
    assert_allclose(out, model.forward(flat, inputs)[0])
    assert_allclose(jac, finite_difference_jacobian(model, flat, inputs), rtol=1e-4, atol=1e-7)


def test_linear_jacobian_does_not_depend_on_parameters(rng):
    model = Model(LINEAR)
    x = np.array([[1.0, -2.0, 0.5]])
    _, jac_a = model.jacobian(rng.standard_normal(model.size), x)
    _, jac_b = model.jacobian(rng.standard_normal(model.size), x)
    assert np.array_equal(jac_a, jac_b)


def test_loss_gradient_is_mean_of_sample_gradients():
    model = Model(TINY)
    flat = model.init_params(5).data
    inputs = tokens(5, [(4, 1), (2, 0), (3, 3), (1, 1)])
    labels = np.array([0, 2, 1, 2])
    loss, grad = model.loss_gradient(flat, inputs, labels)
    outputs = model.forward(flat, inputs)
    assert loss == pytest.approx(-np.mean(outputs[np.arange(4), labels]))
    assert_allclose(grad, model.sample_loss_gradients(flat, inputs, labels).mean(axis=0), atol=1e-14)


def test_loss_gradient_matches_finite_differences():
    model = Model(MLP)
    flat = model.init_params(2).data
    inputs = np.array([[0.1, 0.2, -0.4], [1.0, -0.5, 0.3]])
    labels = np.array([2, 0])
    _, grad = model.loss_gradient(flat, inputs, labels)
    h = 1e-6
    numeric = np.array([
        (model.loss_gradient(flat + h * e, inputs, labels)[0] - model.loss_gradient(flat - h * e, inputs, labels)[0]) / (2 * h)
        for e in np.eye(model.size)
    ])
    assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_input_validation():
    model = Model(TINY)
    flat = model.init_params(0).data
    with pytest.raises(ShapeError):
        model.forward(flat, np.zeros((2, 3), dtype=np.int64))
    with pytest.raises(InvalidInputError):
        model.forward(flat, np.array([[0, 5, 9, 6]]))
    with pytest.raises(ShapeError):
        model.jacobian(flat, tokens(5, [(1, 0), (2, 0)]))
    with pytest.raises(ShapeError):
        Model(MLP).forward(Model(MLP).init_params(0).data, np.zeros((2, 4)))


def test_forward_logprobs_single_sample():
    params = build_model(TINY, seed=0)
    out = forward_logprobs(TINY, params, [4, 5, 1, 6])
    assert out.shape == (7,)
    assert_allclose(out, Model(TINY).forward(params.data, tokens(5, [(4, 1)]))[0])
    with pytest.raises(ShapeError):
        forward_logprobs(MLP, params, [0.0, 0.0, 0.0])


def test_accuracy_reads_the_label_space_only():
    model = Model(TINY)
    flat = model.init_params(0).data
    inputs = tokens(5, [(4, 1), (2, 0)])
    predicted = model.predict_labels(flat, inputs)
    assert np.all(predicted < 5)
    assert model.accuracy(flat, inputs, predicted) == 1.0
