from __future__ import annotations

import json

import numpy as np
import pytest

from preflab.nets import (
    Adam,
    DenseNet,
    LayerSpec,
    Sgd,
    ShapeError,
    StateError,
    cosine_similarity,
    mlp,
    optimizer_step,
)

from oracles import assert_grads_close, finite_difference, naive_mlp_forward


def _net(rng, dims=(4, 6, 3), act="leaky_relu", final="identity"):
    return mlp(list(dims), act, rng, final_activation=final)


def test_forward_zero_weights_gives_activated_bias():
    rng = np.random.default_rng(0)
    net = mlp([3, 2], "tanh", rng, final_activation="tanh")
    net.layers[0].w[...] = 0.0
    net.layers[0].b[...] = [0.3, -0.7]
    out = net.forward(rng.normal(size=(5, 3)))
    assert np.allclose(out, np.tanh([0.3, -0.7])[None, :].repeat(5, axis=0))


def test_forward_identity_layer_is_identity():
    rng = np.random.default_rng(1)
    net = DenseNet([LayerSpec(4, 4, "identity")], rng)
    net.layers[0].w[...] = np.eye(4)
    net.layers[0].b[...] = 0.0
    x = rng.normal(size=(6, 4))
    assert np.array_equal(net.forward(x), x)


def test_forward_matches_naive_matmul_oracle():
    rng = np.random.default_rng(2)
    net = _net(rng, (5, 7, 3), act="tanh", final="sigmoid")
    x = rng.normal(size=(8, 5))
    assert np.allclose(net.forward(x), naive_mlp_forward(net, x), atol=1e-10)


def test_forward_shape_error_names_layer():
    rng = np.random.default_rng(3)
    net = _net(rng)
    with pytest.raises(ShapeError, match="layer 0"):
        net.forward(np.zeros((2, 5)))


def test_layer_chaining_validated():
    rng = np.random.default_rng(4)
    with pytest.raises(ShapeError, match="layer 1"):
        DenseNet([LayerSpec(3, 4), LayerSpec(5, 2)], rng)


def test_backward_without_forward_is_state_error():
    rng = np.random.default_rng(5)
    net = _net(rng)
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 3)))


def test_backward_zero_upstream_gives_zero_tape():
    rng = np.random.default_rng(6)
    net = _net(rng)
    net.forward(rng.normal(size=(4, 4)), record=True)
    tape = net.backward(np.zeros((4, 3)))
    assert all(np.all(g == 0.0) for g in tape.grads)


def test_backward_scalar_linear_analytic():
    # single layer net y = w.x + b, upstream 1 => dw = x, db = 1, dx = w
    rng = np.random.default_rng(7)
    net = DenseNet([LayerSpec(3, 1, "identity")], rng)
    x = rng.normal(size=(1, 3))
    net.forward(x, record=True)
    tape = net.backward(np.ones((1, 1)))
    assert np.allclose(tape.grads[0], x)
    assert np.allclose(tape.grads[1], 1.0)
    assert np.allclose(tape.input_grad, net.layers[0].w)


@pytest.mark.parametrize("act,final", [("leaky_relu", "tanh"), ("tanh", "identity"),
                                       ("relu", "sigmoid")])
def test_backward_matches_finite_differences(act, final):
    rng = np.random.default_rng(8)
    net = _net(rng, (4, 6, 2), act=act, final=final)
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 2))

    def loss():
        return 0.5 * np.sum((net.forward(x) - target) ** 2)

    out = net.forward(x, record=True)
    tape = net.backward(out - target)
    numeric = finite_difference(loss, net.parameters())
    assert_grads_close(tape.grads, numeric)


def test_backward_through_batchnorm_matches_finite_differences():
    rng = np.random.default_rng(9)
    net = DenseNet(
        [LayerSpec(4, 6, "relu", bias=False, batch_norm=True), LayerSpec(6, 2, "identity")],
        rng,
    )
    x = rng.normal(size=(8, 4))
    target = rng.normal(size=(8, 2))

    def loss():
        saved = (net.layers[0].running_mean.copy(), net.layers[0].running_var.copy())
        out = net.forward(x, training=True)
        net.layers[0].running_mean[...] = saved[0]  # keep FD probes side-effect free
        net.layers[0].running_var[...] = saved[1]
        return 0.5 * np.sum((out - target) ** 2)

    out = net.forward(x, training=True, record=True)
    tape = net.backward(out - target)
    numeric = finite_difference(loss, net.parameters())
    assert_grads_close(tape.grads, numeric)


def test_batchnorm_train_uses_batch_stats_eval_uses_running_stats():
    rng = np.random.default_rng(10)
    net = DenseNet([LayerSpec(3, 3, "identity", batch_norm=True)], rng)
    layer = net.layers[0]
    x = rng.normal(size=(16, 3))
    pre = x @ layer.w.T + layer.b
    train_out = net.forward(x, training=True)
    expected_train = (pre - pre.mean(axis=0)) / np.sqrt(pre.var(axis=0) + 1e-5)
    assert np.allclose(train_out, expected_train, atol=1e-12)
    eval_out = net.forward(x, training=False)
    expected_eval = (pre - layer.running_mean) / np.sqrt(layer.running_var + 1e-5)
    assert np.allclose(eval_out, expected_eval, atol=1e-12)
    # eval output is deterministic regardless of batch composition
    single = net.forward(x[:2], training=False)
    assert np.allclose(single, eval_out[:2])


def test_gradcheck_100_random_coordinates():
    rng = np.random.default_rng(11)
    net = _net(rng, (6, 16, 16, 4), act="leaky_relu", final="tanh")
    x = rng.normal(size=(7, 6))

    def loss():
        return float(np.sum(np.sin(net.forward(x))))

    out = net.forward(x, record=True)
    tape = net.backward(np.cos(out))
    numeric = finite_difference(loss, net.parameters(), coords=100 // len(net.parameters()) + 1,
                                rng=rng)
    assert_grads_close(tape.grads, numeric)


def test_optimizer_zero_gradient_is_noop():
    rng = np.random.default_rng(12)
    net = _net(rng)
    before = [p.copy() for p in net.parameters()]
    optimizer_step(Adam(1e-3), net, net.zero_tape())
    for p, q in zip(net.parameters(), before):
        assert np.array_equal(p, q)


def test_adam_first_step_magnitude():
    opt = Adam(1e-3)
    p = np.array([1.0])
    opt.step([p], [np.array([1.0])])
    assert abs(abs(1.0 - p[0]) - 1e-3) < 1e-6


def test_sgd_exact_update():
    opt = Sgd(0.1)
    p = np.array([2.0, -1.0])
    opt.step([p], [np.array([0.5, 1.0])])
    assert np.array_equal(p, np.array([2.0 - 0.05, -1.0 - 0.1]))


def test_optimizer_misaligned_tape_rejected():
    rng = np.random.default_rng(13)
    net = _net(rng)
    tape = net.zero_tape()
    tape.grads[0] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        optimizer_step(Sgd(0.1), net, tape)


def test_adam_steps_bounded_and_finite():
    rng = np.random.default_rng(14)
    opt = Adam(1e-2)
    p = rng.normal(size=(8, 8))
    for _ in range(200):
        before = p.copy()
        opt.step([p], [rng.normal(size=(8, 8)) * 100.0])
        delta = np.abs(p - before)
        assert delta.max() <= opt.lr * 10.0  # per-coordinate step stays O(lr)
        assert np.isfinite(p).all()


def test_determinism_same_seed_bit_identical_after_training():
    def run():
        rng = np.random.default_rng(42)
        net = _net(rng, (4, 8, 2))
        opt = Adam(1e-3)
        data = np.random.default_rng(7).normal(size=(16, 4))
        for _ in range(25):
            out = net.forward(data, record=True)
            tape = net.backward(out)  # minimizes 0.5*sum(out^2)
            optimizer_step(opt, net, tape)
        return net

    a, b = run(), run()
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p, q)


def test_cosine_similarity_basic_cases():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine_similarity(v, v) == (pytest.approx(1.0), False)
    sim, flag = cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 5.0]))
    assert sim == pytest.approx(0.0) and not flag
    sim, _ = cosine_similarity(v, -v)
    assert sim == pytest.approx(-1.0)


def test_cosine_similarity_degenerate_flagged():
    sim, flag = cosine_similarity(np.zeros(3), np.ones(3))
    assert sim == 0.0 and flag


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(15)
    net = DenseNet(
        [LayerSpec(4, 8, "leaky_relu"), LayerSpec(8, 2, "relu", bias=False, batch_norm=True),
         LayerSpec(2, 1, "tanh")],
        rng,
    )
    net.forward(rng.normal(size=(8, 4)), training=True)  # move running stats off init
    path = tmp_path / "net.json"
    net.save(str(path))
    loaded = DenseNet.load(str(path))
    for p, q in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(p, q)
    for la, lb in zip(net.layers, loaded.layers):
        if la.running_mean is not None:
            assert np.array_equal(la.running_mean, lb.running_mean)
            assert np.array_equal(la.running_var, lb.running_var)
    x = rng.normal(size=(3, 4))
    assert np.array_equal(net.forward(x), loaded.forward(x))
    # the file itself is valid versioned json
    blob = json.loads(path.read_text())
    assert blob["version"] == 1
