import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sybilpoison import engine
from sybilpoison.layers import Dense, ReLU, ShapeError
from sybilpoison.models import Model, build_cnn, build_fc, build_model, init_params


def test_fc_parameter_count():
    # 784*32+32 + 32*16+16 + 16*8+8 + 8*10+10
    assert build_fc([784, 32, 16, 8, 10]).num_params == 25874


def test_cnn_shape_chain():
    model = build_cnn()
    shapes = model.shapes
    assert shapes[0] == (1, 28, 28)
    assert shapes[1] == (6, 24, 24)
    assert shapes[3] == (6, 12, 12)
    assert shapes[4] == (16, 8, 8)
    assert shapes[6] == (16, 4, 4)
    assert shapes[7] == (256,)
    assert shapes[-1] == (10,)


def test_cnn_forward_runs():
    model = build_cnn()
    out = engine.forward(model, init_params(model, 0), np.zeros((3, 1, 28, 28)))
    assert out.shape == (3, 10)


def test_identity_network():
    model = build_fc([2, 2])
    params = model.flatten([{"weight": np.eye(2), "bias": np.zeros(2)}])
    x = np.array([[0.3, -1.2], [4.0, 0.0]])
    np.testing.assert_array_equal(engine.forward(model, params, x), x)


def test_build_model_flattens_image_input():
    model = build_model("fc-mnist", (1, 28, 28))
    assert model.num_params == 25874
    assert model.shapes[1] == (784,)
    with pytest.raises(ValueError):
        build_model("resnet", (1, 28, 28))


def test_incompatible_layers_rejected():
    with pytest.raises(ShapeError) as err:
        Model((Dense(4, 3), ReLU(), Dense(5, 2)), (4,), 2)
    assert err.value.layer_index == 2
    with pytest.raises(ShapeError):
        Model((Dense(4, 3),), (4,), 10)


def test_init_deterministic_and_seed_dependent():
    model = build_fc([784, 32, 16, 8, 10])
    a, b, c = init_params(model, 1), init_params(model, 1), init_params(model, 2)
    assert a.tobytes() == b.tobytes()
    assert np.mean(a != c) >= 0.99 * np.mean(a != 0)


def test_init_biases_zero_and_weights_bounded():
    model = build_fc([784, 32, 16, 8, 10])
    p = init_params(model, 0)
    for slot, layer_params in zip(model.layout, [None] * len(model.layout)):
        block = p[slot.offset:slot.offset + slot.size]
        if slot.role == "bias":
            assert np.all(block == 0)
        else:
            fan_in, fan_out = model.layers[slot.layer_index].fan()
            assert np.max(np.abs(block)) <= np.sqrt(6 / (fan_in + fan_out))


def test_cnn_fans():
    model = build_cnn()
    assert model.layers[0].fan() == (25, 150)
    assert model.layers[3].fan() == (150, 400)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**32 - 1))
def test_flatten_unflatten_roundtrip(sizes, seed):
    model = build_fc(sizes)
    vec = np.random.default_rng(seed).standard_normal(model.num_params)
    again = model.flatten(model.unflatten(vec))
    assert again.tobytes() == vec.tobytes()
    offsets = [s.offset for s in model.layout]
    assert offsets == sorted(offsets)
    assert sum(s.size for s in model.layout) == model.num_params
