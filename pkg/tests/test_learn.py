import numpy as np
import pytest

from fgnn.autodiff import Tape, TapeError
from fgnn.errors import ShapeError
from fgnn.layers import FeatureSet, FgnnStack, Topology, stack_forward
from fgnn.learn import (TrainConfig, agreement, build_arch, evaluate, loss_map_xent, map_agreement, predict,
                        rebuild_stack, stack_params, taped_forward, train, value_and_grad)
from fgnn.numkit import linear
from fgnn.synth import feature_dims, gen_dataset

from graphs import random_covering_graph, random_features, random_stack


def test_loss_examples():
    assert loss_map_xent([[0.0, 0.0]], [0]) == pytest.approx(np.log(2), abs=1e-15)
    assert loss_map_xent([[100.0, 0.0]], [0]) < 1e-40
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 3))
    y = [0, 2, 1, 1, 0]
    want = np.mean([-np.log(np.exp(r[t]) / np.exp(r).sum()) for r, t in zip(z, y)])
    assert loss_map_xent(z, y) == pytest.approx(want, rel=1e-14)


def test_loss_errors():
    with pytest.raises(IndexError):
        loss_map_xent([[0.0, 1.0]], [2])
    with pytest.raises(ValueError):
        loss_map_xent([[0.0, 1.0]], [0, 1])


def test_readout_only_gradient_is_analytic():
    rng = np.random.default_rng(1)
    g = random_covering_graph(rng, 5, 3)
    feats = random_features(rng, g, (4, 2, 2))
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    s = FgnnStack((), linear(w, b))
    y = rng.integers(0, 3, 5)
    loss, (gw, gb), _ = value_and_grad(s, g, feats, y)
    z = feats.node @ w.T + b
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    d = (p - np.eye(3)[y]) / 5
    assert loss == pytest.approx(loss_map_xent(z, y), rel=1e-13)
    assert np.allclose(gw, d.T @ feats.node, atol=1e-14)
    assert np.allclose(gb, d.sum(axis=0), atol=1e-14)


def test_dead_relu_branch_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.array([[-1.0, 2.0]]))
    y = tape.relu(x)
    loss = tape.softmax_xent(y, np.array([0]))
    tape.backward(loss)
    assert x.grad[0, 0] == 0.0 and x.grad[0, 1] != 0.0


def test_tape_cannot_be_reused():
    tape = Tape()
    x = tape.leaf(np.zeros((1, 2)))
    loss = tape.softmax_xent(x, np.array([1]))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)
    with pytest.raises(TapeError):
        tape.leaf(np.zeros(1))


def test_taped_forward_matches_stack_forward():
    rng = np.random.default_rng(2)
    dims = (2, 3, 2)
    g = random_covering_graph(rng, 5, 4)
    feats = random_features(rng, g, dims)
    s = random_stack(rng, dims, 3)
    tape = Tape()
    out = taped_forward(tape, s, Topology.from_graph(g), feats, [tape.constant(p) for p in stack_params(s)])
    assert np.allclose(out.value, stack_forward(s, g, feats).node, rtol=0, atol=1e-12)


def test_param_round_trip():
    s = build_arch("desk", (2, 4, 6), seed=1, width=8)
    params = stack_params(s)
    back = stack_params(rebuild_stack(s, params))
    assert all(np.array_equal(a, b) for a, b in zip(params, back))
    with pytest.raises(ShapeError):
        rebuild_stack(s, params[:-1])
    with pytest.raises(ValueError):
        build_arch("tower", (2, 4, 6))


def test_agreement_examples():
    assert agreement((0, 1, 1), (0, 1, 1)) == 1.0
    assert agreement((1, 1), (0, 0)) == 0.0
    assert agreement((0, 1, 0, 1), (0, 1, 1, 1)) == 0.75
    with pytest.raises(ValueError):
        agreement((0,), (0, 1))


def test_map_agreement_credits_tied_optima():
    train_set, _, _ = gen_dataset(1, 3, 1, 0, 0, 6, 3, 2)
    inst = train_set[0]
    assert map_agreement(inst.graph, inst.label, inst.label) == 1.0
    flipped = tuple(1 - x for x in inst.label)
    assert map_agreement(inst.graph, flipped, inst.label) == agreement(flipped, inst.label)


@pytest.fixture(scope="module")
def tiny():
    train_set, val, _ = gen_dataset(1, 0, 10, 4, 0, 8, 3, 1)
    return train_set, val, feature_dims(1, 3)


def test_zero_learning_rate_leaves_params(tiny):
    train_set, _, dims = tiny
    arch = build_arch("desk", dims, seed=0, width=8)
    trained, log = train(train_set, TrainConfig(learning_rate=0.0, epochs=1), arch)
    assert all(np.array_equal(a, b) for a, b in zip(stack_params(arch), stack_params(trained)))
    assert len(log) == 1 and log[0]["val_agreement"] is None


def test_training_is_deterministic(tiny):
    train_set, val, dims = tiny
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    a, la = train(train_set, cfg, build_arch("desk", dims, seed=2, width=8), val)
    b, lb = train(train_set, cfg, build_arch("desk", dims, seed=2, width=8), val)
    assert all(np.array_equal(x, y) for x, y in zip(stack_params(a), stack_params(b)))
    assert la == lb
    assert [r["lr"] for r in la] == [cfg.learning_rate, cfg.learning_rate * cfg.decay]


def test_overfits_small_training_set(tiny):
    train_set, _, dims = tiny
    cfg = TrainConfig(learning_rate=1e-2, decay=1.0, epochs=200, batch_size=10)
    s, log = train(train_set, cfg, build_arch("desk", dims, seed=0, width=16))
    assert log[-1]["loss"] < log[0]["loss"]
    assert evaluate(s, train_set)[0] >= 0.95


def test_predict_chunks_do_not_matter(tiny):
    train_set, _, dims = tiny
    s = build_arch("desk", dims, seed=3, width=8)
    assert predict(s, train_set, chunk=3) == predict(s, train_set)


def test_train_errors(tiny):
    train_set, _, dims = tiny
    arch = build_arch("desk", dims, width=8)
    with pytest.raises(ValueError):
        train([], TrainConfig(), arch)
    other, _, _ = gen_dataset(3, 0, 1, 0, 0, 8, 3)
    with pytest.raises(ShapeError):
        train(train_set[:1] + other, TrainConfig(epochs=1), arch)
    with pytest.raises(ValueError):
        evaluate(arch, [])


@pytest.mark.parametrize("kw", [{"learning_rate": -1.0}, {"decay": 0.0}, {"decay": 1.5}, {"batch_size": 0},
                                {"epochs": -1}, {"beta1": 1.0}, {"eps": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_feature_widths_checked_by_forward():
    rng = np.random.default_rng(4)
    g = random_covering_graph(rng, 3, 2)
    feats = random_features(rng, g, (2, 3, 2))
    bad = FeatureSet(feats.node[:, :1], feats.factor, feats.edge)
    with pytest.raises(ShapeError):
        value_and_grad(build_arch("desk", (2, 3, 2), width=4), g, bad, [0, 0, 0])
