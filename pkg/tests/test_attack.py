import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sybilpoison import attack as atk
from sybilpoison import engine
from sybilpoison.data import LabeledDataset, flip_labels, select_class
from sybilpoison.models import build_fc, init_params
from sybilpoison.training import STREAM_OFFLINE, TrainParams, client_rng, local_train

from .oracles import vector_rel_err

TRAIN = TrainParams(epochs=2, batch_size=8, lr=0.05, momentum=0.9)


@pytest.fixture(scope="module")
def small():
    """16-pixel inputs, 4 classes; base class 3, target class 1."""
    rng = np.random.default_rng(0)
    model = build_fc([16, 8, 6, 4])
    protos = rng.uniform(0.2, 0.8, (4, 16))
    labels = np.repeat(np.arange(4), 12)
    images = np.clip(protos[labels] + 0.1 * rng.standard_normal((48, 16)), 0, 1)
    data = LabeledDataset(images, labels, num_classes=4)
    config = atk.AttackConfig(y_tar=1, y_adv=3, T=20, poison_lr=0.01, poison_count=6)
    w = init_params(model, 1)
    for k in range(3):
        w = local_train(model, data, w, TRAIN, np.random.default_rng(k))
    return model, data, config, w


# --- counting -------------------------------------------------------------------

def test_sybil_count_examples():
    assert atk.sybil_count(50, 40, 5) == 100
    assert atk.sybil_count(17, 0, 4) == 0
    assert atk.sybil_count(10, 10, 3) == 3


def test_non_integral_malicious_count_rejected():
    with pytest.raises(ValueError, match="explicit"):
        atk.malicious_count(7, 40)


@pytest.mark.parametrize("kwargs", [dict(y_tar=2, y_adv=2), dict(T=-1), dict(poison_lr=0.0),
                                    dict(m_pct=101), dict(v=-1), dict(scheme="later"), dict(epsilon=0.0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        atk.AttackConfig(**kwargs)


# --- target acquisition ----------------------------------------------------------

def test_local_target_is_training_on_flipped_labels(small):
    model, data, config, w = small
    got = atk.acquire_target_local(model, w, data, config, TRAIN, np.random.default_rng(5))
    ref = local_train(model, flip_labels(data, 1, 3), w, TRAIN, np.random.default_rng(5))
    assert got.tobytes() == ref.tobytes()


def test_local_target_without_target_class_is_plain_training(small):
    model, data, config, w = small
    no_tar = data.subset(np.flatnonzero(data.labels != 1))
    got = atk.acquire_target_local(model, w, no_tar, config, TRAIN, np.random.default_rng(2))
    ref = local_train(model, no_tar, w, TRAIN, np.random.default_rng(2))
    assert got.tobytes() == ref.tobytes()


def test_local_target_starts_from_current_model(small):
    model, data, config, w = small
    out = atk.acquire_target_local(model, w, data, config, TrainParams(epochs=0), np.random.default_rng(0))
    assert out.tobytes() == w.tobytes()


def test_local_target_rejects_empty(small):
    model, data, config, w = small
    with pytest.raises(ValueError):
        atk.acquire_target_local(model, w, data.subset([]), config, TRAIN, np.random.default_rng(0))


def test_global_target_is_unweighted_mean(small):
    model, data, config, w = small
    big, tiny = data.subset(np.arange(40)), data.subset(np.arange(40, 48))
    rngs = lambda: [np.random.default_rng(1), np.random.default_rng(2)]
    got = atk.acquire_target_global(model, w, [big, tiny], config, TRAIN, rngs())
    a = atk.acquire_target_local(model, w, big, config, TRAIN, np.random.default_rng(1))
    b = atk.acquire_target_local(model, w, tiny, config, TRAIN, np.random.default_rng(2))
    np.testing.assert_allclose(got, 0.5 * (a + b), rtol=0, atol=1e-15)
    one = atk.acquire_target_global(model, w, [big], config, TRAIN, [np.random.default_rng(1)])
    assert one.tobytes() == a.tobytes()
    with pytest.raises(ValueError):
        atk.acquire_target_global(model, w, [], config, TRAIN, [])


def test_offline_target(small):
    model, data, config, _ = small
    assert atk.acquire_target_offline(model, [data], 0, config, TRAIN, 11).tobytes() == init_params(model, 11).tobytes()

    one = atk.acquire_target_offline(model, [data], 1, config, TRAIN, 11)
    ref = local_train(model, flip_labels(data, 1, 3), init_params(model, 11), TRAIN, client_rng(11, 0, 0, STREAM_OFFLINE))
    assert one.tobytes() == ref.tobytes()
    with pytest.raises(ValueError):
        atk.acquire_target_offline(model, [], 2, config, TRAIN, 11)


def test_lm_target_matches_local_on_target_only_client(small):
    model, data, config, w = small
    only_tar = select_class(data, 1)
    a = atk.lm_target(model, w, only_tar, config, TRAIN, np.random.default_rng(4))
    b = atk.acquire_target_local(model, w, only_tar, config, TRAIN, np.random.default_rng(4))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        atk.lm_target(model, w, select_class(data, 2), config, TRAIN, np.random.default_rng(4))


# --- matching loss ------------------------------------------------------------------

def test_cosine_loss_constructed_cases():
    d = np.array([1.0, -2.0, 0.5])
    assert abs(atk.cosine_loss(d, 3.0 * d)[0]) < 1e-10
    assert abs(atk.cosine_loss(d, np.array([2.0, 1.0, 0.0]))[0] - 1.0) < 1e-10
    assert abs(atk.cosine_loss(d, -0.1 * d)[0] - 2.0) < 1e-10


def test_cosine_loss_degenerate():
    with pytest.raises(atk.DegenerateDirectionError):
        atk.cosine_loss(np.zeros(3), np.ones(3))
    with pytest.raises(atk.DegenerateDirectionError):
        atk.cosine_loss(np.ones(3), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_cosine_loss_range_scale_and_gradient(seed, scale):
    rng = np.random.default_rng(seed)
    d, g = rng.standard_normal((2, 6))
    value, grad = atk.cosine_loss(d, g)
    assert 0.0 <= value <= 2.0
    assert abs(atk.cosine_loss(scale * d, g)[0] - value) < 1e-10
    h = 1e-6
    fd = np.array([(atk.cosine_loss(d, g + h * e)[0] - atk.cosine_loss(d, g - h * e)[0]) / (2 * h) for e in np.eye(6)])
    assert np.max(np.abs(grad - fd)) < 1e-6 * max(1.0, np.max(np.abs(fd)))


def test_matching_loss_on_model(small):
    model, data, config, w = small
    base = select_class(data, 3).subset(np.arange(4))
    w_tar = atk.acquire_target_local(model, w, data, config, TRAIN, np.random.default_rng(0))
    delta = np.zeros_like(base.images)
    b = atk.matching_loss(delta, w, w_tar, model, base.images, base.labels)
    assert 0.0 <= b <= 2.0 and math.isfinite(b)
    scaled = w - 7.5 * (w - w_tar)  # same direction, longer
    assert abs(atk.matching_loss(delta, w, scaled, model, base.images, base.labels) - b) < 1e-10
    rev = atk.matching_loss(delta, w, w_tar, model, base.images, base.labels, reverse=True)
    assert abs(rev - (2.0 - b)) < 1e-10
    with pytest.raises(atk.DegenerateDirectionError):
        atk.matching_loss(delta, w, w, model, base.images, base.labels)


def test_matching_loss_gradient_matches_finite_differences(small):
    model, data, config, w = small
    base = select_class(data, 3).subset(np.arange(5))
    w_tar = atk.acquire_target_local(model, w, data, config, TRAIN, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    delta = 0.05 * rng.standard_normal(base.images.shape)
    _, grad = atk.matching_loss_grad(delta, w, w_tar, model, base.images, base.labels)
    h = 1e-4
    fd = np.zeros_like(delta)
    for idx in np.ndindex(*delta.shape):
        e = np.zeros_like(delta)
        e[idx] = h
        fd[idx] = (atk.matching_loss(delta + e, w, w_tar, model, base.images, base.labels)
                   - atk.matching_loss(delta - e, w, w_tar, model, base.images, base.labels)) / (2 * h)
    assert vector_rel_err(grad, fd) < 1e-3


# --- poison generation ------------------------------------------------------------------

def _target(small):
    model, data, config, w = small
    return atk.acquire_target_local(model, w, data, config, TRAIN, np.random.default_rng(0))


def test_zero_steps_leave_base_untouched(small):
    model, data, config, w = small
    base = select_class(data, 3)
    batch = atk.generate_poison(base, w, _target(small), model, replace(config, T=0))
    assert np.all(batch.delta == 0)
    assert len(batch.trace) == 1
    assert len(batch) == min(config.poison_count, len(base))
    assert np.all(batch.labels == 3)


def test_empty_base_gives_no_poison(small):
    model, data, config, w = small
    assert atk.generate_poison(data.subset([]), w, _target(small), model, config) is None


def test_descent_on_small_step(small):
    model, data, config, w = small
    batch = atk.generate_poison(select_class(data, 3), w, _target(small), model, config, np.random.default_rng(0))
    trace = np.array(batch.trace)
    assert len(trace) == config.T + 1
    assert trace[-1] < trace[0]
    assert np.mean(np.diff(trace) <= 0) >= 0.9


@settings(max_examples=10, deadline=None)
@given(st.floats(0.001, 0.2), st.integers(0, 2**32 - 1))
def test_epsilon_projection_and_box(small, eps, seed):
    model, data, config, w = small
    cfg = replace(config, epsilon=eps, poison_lr=5.0, T=4)
    batch = atk.generate_poison(select_class(data, 3), w, _target(small), model, cfg, np.random.default_rng(seed))
    assert np.max(np.abs(batch.delta)) <= eps + 1e-15
    assert batch.poisoned.min() >= 0.0 and batch.poisoned.max() <= 1.0


def test_poison_step_moves_toward_target(small):
    model, data, config, w = small
    w_tar = _target(small)
    base = select_class(data, 3)
    batch = atk.generate_poison(base, w, w_tar, model, replace(config, T=200, poison_lr=1.0, poison_count=12))
    step = TrainParams(epochs=1, batch_size=len(batch), lr=0.05, momentum=0.0)
    clean = LabeledDataset(batch.images, batch.labels, 4)
    d_pois = np.linalg.norm(local_train(model, batch.dataset(), w, step, np.random.default_rng(0)) - w_tar)
    d_clean = np.linalg.norm(local_train(model, clean, w, step, np.random.default_rng(0)) - w_tar)
    assert d_pois < d_clean


# --- baselines --------------------------------------------------------------------------

def test_fcm_limits(small):
    model, data, config, w = small
    base = select_class(data, 3)
    t = select_class(data, 1).images[0]
    zero = atk.fcm_poison(base, t, w, model, replace(config, T=0))
    assert np.all(zero.delta == 0)
    stiff = atk.fcm_poison(base, t, w, model, config, beta=1e12)
    assert np.max(np.abs(stiff.delta)) < 1e-8
    assert atk.fcm_poison(base.subset([]), t, w, model, config) is None


def test_fcm_feature_distance_decreases(small):
    model, data, config, w = small
    base = select_class(data, 3)
    t = select_class(data, 1).images[0]
    batch = atk.fcm_poison(base, t, w, model, replace(config, T=30, poison_lr=0.01))
    trace = np.array(batch.trace)
    assert np.all(np.diff(trace) <= 1e-12)
    assert trace[-1] < trace[0]
    assert np.all(batch.labels == 3)


def test_fcm_default_beta():
    model = build_fc([784, 32, 16, 8, 10])
    assert atk.fcm_beta(model) == pytest.approx(0.25 * (8 / 784) ** 2)


def test_lm_poison(small):
    model, data, config, w = small
    base = select_class(data, 3)
    zero = atk.lm_poison(base, w, data, model, replace(config, T=0), TRAIN, np.random.default_rng(0))
    assert np.all(zero.delta == 0)
    batch = atk.lm_poison(base, w, data, model, config, TRAIN, np.random.default_rng(0), np.random.default_rng(1))
    trace = np.array(batch.trace)
    assert trace[-1] < trace[0]
    assert np.mean(np.diff(trace) <= 0) >= 0.9


# --- container -------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5), st.integers(0, 6), st.integers(0, 2**32 - 1))
def test_container_roundtrip(tmp_path_factory, n, trace_len, seed):
    rng = np.random.default_rng(seed)
    batch = atk.PoisonBatch(rng.uniform(size=(n, 1, 3, 2)), rng.integers(0, 10, n),
                            rng.standard_normal((n, 1, 3, 2)), rng.standard_normal(trace_len).tolist())
    path = tmp_path_factory.mktemp("p") / "poison.bin"
    atk.save_poison(batch, path)
    back = atk.load_poison(path)
    assert back.images.tobytes() == batch.images.tobytes()
    assert back.delta.tobytes() == batch.delta.tobytes()
    assert back.labels.tolist() == batch.labels.tolist()
    assert back.trace == batch.trace


def test_container_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        atk.load_poison(p)
    batch = atk.PoisonBatch(np.zeros((1, 2)), np.array([3]), np.zeros((1, 2)), [0.5])
    atk.save_poison(batch, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError):
        atk.load_poison(p)
