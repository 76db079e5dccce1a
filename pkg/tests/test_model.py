import json
import math

import numpy as np
import pytest

from fedmt.errors import ShapeMismatch
from fedmt.losses import LabeledBatch, LossKind, Space
from fedmt.model import (
    BatchStream,
    MlpNet,
    SgdConfig,
    TwoLayerReluNet,
    init_mlp,
    init_ntk,
    sgd_step,
)
from fedmt.projection import build_hierarchical_q, build_symmetric_noise_t

from helpers import central_diff, rel_err


def test_init_is_deterministic():
    a = init_ntk(2, 4, 2, seed=7)
    b = init_ntk(2, 4, 2, seed=7)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.a, b.a)


def test_init_moments():
    net = init_ntk(3, 10000, 4, seed=1)
    assert np.all(np.abs(net.u.mean(axis=1)) < 0.05)
    assert np.all(np.abs(net.u.var(axis=1) - 1.0) < 0.05)
    assert abs(np.mean(net.a == 1.0) - 0.5) < 0.02
    assert set(np.unique(net.a)) == {-1.0, 1.0}


def test_forward_hand_values():
    net = TwoLayerReluNet(np.array([[1.0], [0.0]]), np.array([[1.0]]))
    assert net.forward(np.array([[2.0, 3.0]]))[0, 0] == pytest.approx(2.0)
    big = init_ntk(3, 16, 2, seed=0)
    np.testing.assert_array_equal(big.forward(np.zeros((2, 3))), 0.0)


def test_forward_matches_definition_loop():
    net = init_ntk(3, 7, 2, seed=4)
    x = np.random.default_rng(0).standard_normal((5, 3))
    out = net.forward(x)
    for i in range(5):
        for k in range(2):
            s = sum(net.a[k, m] * max(net.u[:, m] @ x[i], 0.0) for m in range(7))
            assert out[i, k] == pytest.approx(s / math.sqrt(7), abs=1e-12)


def test_forward_positively_homogeneous():
    net = init_ntk(4, 32, 3, seed=2)
    x = np.random.default_rng(1).standard_normal((6, 4))
    for c in (0.5, 2.0, 7.3):
        np.testing.assert_allclose(net.forward(c * x), c * net.forward(x), rtol=1e-12, atol=1e-12)


def test_backward_zero_and_shape():
    net = init_ntk(2, 5, 3, seed=0)
    x = np.ones((4, 2))
    assert np.all(net.backward(x, np.zeros((4, 3))) == 0)
    with pytest.raises(ShapeMismatch):
        net.backward(x, np.zeros((4, 2)))
    with pytest.raises(ShapeMismatch):
        net.forward(np.ones((4, 3)))
    assert set(net.gradients(x, np.zeros((4, 3)))) == {"u"}


@pytest.mark.parametrize(
    "kind",
    [
        LossKind.plain(),
        LossKind.forward(build_hierarchical_q((2, 1))),
        LossKind.backward(build_symmetric_noise_t(3, 0.3)),
        LossKind.wmse(build_hierarchical_q((1, 2))),
    ],
)
def test_ntk_backward_matches_fd(kind):
    rng = np.random.default_rng(3)
    net = init_ntk(3, 12, 3, seed=5)
    x = rng.standard_normal((4, 3))
    width = kind.matrix.observation_map.shape[0] if kind.matrix is not None else 3
    y = rng.integers(0, width, 4)
    _, grad_logits = kind(net.forward(x), y)
    grad = net.backward(x, grad_logits)
    fd = central_diff(lambda u: kind(net.with_params({"u": u}).forward(x), y)[0], net.u)
    assert rel_err(grad, fd) < 1e-5


def test_mlp_backward_matches_fd():
    rng = np.random.default_rng(8)
    net = init_mlp([4, 6, 5, 3], seed=2)
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    kind = LossKind.forward(build_hierarchical_q((1, 2)))
    _, grad_logits = kind(net.forward(x), rng.integers(0, 2, 5))
    kind = LossKind.plain()
    _, grad_logits = kind(net.forward(x), y)
    grads = net.gradients(x, grad_logits)
    for key, value in net.params.items():
        def f(v, key=key):
            p = dict(net.params)
            p[key] = v
            return kind(net.with_params(p).forward(x), y)[0]

        assert rel_err(grads[key], central_diff(f, value)) < 1e-5, key


def test_mlp_head_replacement_keeps_backbone():
    net = init_mlp([3, 8, 2], seed=1)
    new = net.replace_head(5, seed=9)
    assert new.K == 5
    assert np.array_equal(new.weights[0], net.weights[0])
    assert new.head_keys == ("W1", "b1")
    with pytest.raises(ShapeMismatch):
        MlpNet([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


def test_sgd_zero_step_is_noop_and_a_is_frozen():
    net = init_ntk(2, 8, 2, seed=3)
    batch = LabeledBatch(np.random.default_rng(0).standard_normal((6, 2)), [0, 1, 0, 1, 1, 0], Space.desired(2))
    new, loss = sgd_step(net, batch, LossKind.plain(), SgdConfig(eta_sgd=0.0))
    assert np.array_equal(new.u, net.u)
    assert np.isfinite(loss)
    cfg = SgdConfig(eta_sgd=0.5)
    cur = net
    for _ in range(5):
        cur, _ = sgd_step(cur, batch, LossKind.plain(), cfg)
    assert cur.a.tobytes() == net.a.tobytes()
    assert not np.array_equal(cur.u, net.u)


def test_sgd_descends_on_toy():
    x = np.array([[1.0], [2.0], [0.5], [1.5]])
    batch = LabeledBatch(x, [0, 1, 0, 1], Space.desired(2))
    net = init_ntk(1, 64, 2, seed=0)
    cfg = SgdConfig(eta_sgd=1e-3)
    new, before = sgd_step(net, batch, LossKind.plain(), cfg)
    _, after = sgd_step(new, batch, LossKind.plain(), cfg)
    assert after < before


def test_sgd_is_bitwise_reproducible():
    def run():
        net = init_ntk(3, 16, 2, seed=11)
        batch = LabeledBatch(np.random.default_rng(2).standard_normal((5, 3)), [0, 1, 1, 0, 1], Space.desired(2))
        for _ in range(2):
            net, _ = sgd_step(net, batch, LossKind.plain(), SgdConfig(0.1))
        return net.u.tobytes()

    assert run() == run()


def test_batch_stream_epochs():
    stream = BatchStream(10, 4, np.random.default_rng(0))
    seen = np.concatenate([stream.next() for _ in range(3)])
    assert sorted(seen.tolist()) == list(range(10))
    full = BatchStream(5, 0, np.random.default_rng(0))
    assert full.next().tolist() == [0, 1, 2, 3, 4]


def test_sgd_config_epoch_steps():
    assert SgdConfig(0.1, batch_size=16, local_epochs=1).steps_for(40) == 3
    assert SgdConfig(0.1, batch_size=0, local_epochs=2).steps_for(40) == 2
    assert SgdConfig(0.1, local_steps=4).steps_for(40) == 4
    with pytest.raises(ValueError):
        SgdConfig(-1.0)


def test_checkpoint_round_trip():
    net = init_ntk(3, 5, 2, seed=1)
    doc = json.loads(json.dumps(net.to_dict()))
    assert set(doc) == {"d", "M", "K", "u", "a"}
    assert all(v in (-1, 1) and isinstance(v, int) for v in doc["a"])
    back = TwoLayerReluNet.from_dict(doc)
    assert back.u.tobytes() == net.u.tobytes() and np.array_equal(back.a, net.a)
    mlp = init_mlp([3, 4, 2], seed=0)
    back = MlpNet.from_dict(json.loads(json.dumps(mlp.to_dict())))
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, mlp.weights))
