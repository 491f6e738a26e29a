import numpy as np
import pytest

from app.errors import DataError, NonFiniteError, ShapeError
from app.services import autodiff as ad
from app.services.nn import (CHECKPOINT_MAGIC, OptimizerState, ParameterStore, build_mlp, load_checkpoint,
                             load_into, mlp_forward, optimizer_step, save_checkpoint)


def test_build_mlp_names_and_init_range(rng):
    net = build_mlp([4, 8, 3], rng, "probe")
    names = [p.name for p in net.parameters()]
    assert names == ["probe.0.weight", "probe.0.bias", "probe.1.weight", "probe.1.bias"]
    limit = np.sqrt(6.0 / (4 + 8))
    assert np.all(np.abs(net.layers[0].weight.value) <= limit)
    assert np.all(net.layers[0].bias.value == 0.0)
    assert net.num_sites == 3


def test_mlp_forward_rejects_wrong_width(rng):
    net = build_mlp([4, 3], rng, "net")
    with pytest.raises(ShapeError):
        mlp_forward(net, np.ones((2, 5)))


def test_zero_dropout_equals_deterministic_pass(rng):
    net = build_mlp([3, 5, 2], rng, "net")
    x = rng.standard_normal((4, 3))
    plain = mlp_forward(net, x).value
    zero = mlp_forward(net, x, rng=np.random.default_rng(0), dropout_rates=[0.0, 0.0, 0.0]).value
    np.testing.assert_array_equal(plain, zero)


def test_inverted_dropout_preserves_expectation():
    net = build_mlp([1, 1], np.random.default_rng(0), "net")
    net.layers[0].weight.assign([[1.0]])
    x = np.ones((100_000, 1))
    out = mlp_forward(net, x, rng=np.random.default_rng(5), dropout_rates=[0.5, 0.0]).value
    assert abs(out.mean() - 1.0) < 0.01


def test_sgd_step_by_hand():
    w = ad.parameter([1.0, -2.0], name="w")
    ad.backward(ad.sum(w * ad.constant([3.0, 4.0])))
    optimizer_step(OptimizerState("sgd", learning_rate=0.1), [w])
    np.testing.assert_allclose(w.value, [0.7, -2.4])
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_adadelta_first_two_steps_by_hand():
    w = ad.parameter([1.0], name="w")
    state = OptimizerState("adadelta", learning_rate=1.0, rho=0.9, eps=1e-6)
    g = 2.0

    ad.backward(ad.sum(w * ad.constant([g])))
    optimizer_step(state, [w])
    sq = 0.1 * g * g
    delta1 = np.sqrt(1e-6) / np.sqrt(sq + 1e-6) * g
    np.testing.assert_allclose(w.value, [1.0 - delta1], rtol=1e-12)

    ad.backward(ad.sum(w * ad.constant([g])))
    optimizer_step(state, [w])
    acc = 0.1 * delta1 * delta1
    sq = 0.9 * sq + 0.1 * g * g
    delta2 = np.sqrt(acc + 1e-6) / np.sqrt(sq + 1e-6) * g
    np.testing.assert_allclose(w.value, [1.0 - delta1 - delta2], rtol=1e-12)


def test_non_finite_gradient_aborts_without_touching_parameters():
    a = ad.parameter([1.0], name="a")
    b = ad.parameter([2.0], name="b")
    a.grad = np.array([0.5])
    b.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError) as excinfo:
        optimizer_step(OptimizerState("sgd", 1.0), [a, b])
    assert excinfo.value.name == "b"
    np.testing.assert_array_equal(a.value, [1.0])
    np.testing.assert_array_equal(b.value, [2.0])


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_mlp([3, 4, 2], rng, "net")
    store = ParameterStore()
    store.register(net.parameters())
    path = save_checkpoint(store, tmp_path / "model.ckpt")
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)

    loaded = load_checkpoint(path)
    assert list(loaded) == store.names()
    for name, value in loaded.items():
        np.testing.assert_array_equal(value, store[name].value)

    other = build_mlp([3, 4, 2], np.random.default_rng(99), "net")
    other_store = ParameterStore()
    other_store.register(other.parameters())
    load_into(other_store, path)
    x = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(mlp_forward(net, x).value, mlp_forward(other, x).value)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_snapshot_restore(rng):
    net = build_mlp([2, 2], rng, "net")
    store = ParameterStore()
    store.register(net.parameters())
    snapshot = store.snapshot()
    net.layers[0].weight.assign(np.zeros((2, 2)))
    store.restore(snapshot)
    np.testing.assert_array_equal(net.layers[0].weight.value, snapshot["net.0.weight"])


def test_training_separates_two_clusters():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-2.0, 0.5, (100, 2)), rng.normal(2.0, 0.5, (100, 2))])
    y = np.repeat([0, 1], 100)
    net = build_mlp([2, 8, 2], rng, "net")
    state = OptimizerState("sgd", 0.5)
    for _ in range(200):
        loss = ad.mean(ad.cross_entropy_terms(mlp_forward(net, x), y))
        ad.backward(loss)
        optimizer_step(state, net.parameters())
    accuracy = np.mean(np.argmax(mlp_forward(net, x).value, axis=1) == y)
    assert accuracy > 0.95
