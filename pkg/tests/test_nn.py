import numpy as np
import pytest

from powerproj.channel import NetworkConfig, gen_dataset, split_dataset, tensor_to_input
from powerproj.errors import ConfigError, TapeMismatch
from powerproj.nn import (
    LossSpec,
    MLPModel,
    TrainConfig,
    adam_update,
    backward,
    forward,
    load_checkpoint,
    sample_loss,
    save_checkpoint,
    train,
)
from powerproj.problem import assemble_affine_constraints

from conftest import random_feasible


def _inputs(rng, n, d):
    return 10 ** rng.uniform(-3, 1, (n, d))


def test_zero_weights_sigmoid_gives_half():
    m = MLPModel(8, 4, 2, hidden=(5,), activation="sigmoid")
    for k in m.params:
        if k.startswith(("W", "b", "beta")):
            m.params[k][...] = 0
    r, _ = forward(m, _inputs(np.random.default_rng(0), 3, 8))
    np.testing.assert_allclose(r, 0.5)


def test_eval_is_deterministic():
    m = MLPModel(8, 4, 2, hidden=(16, 16))
    h = _inputs(np.random.default_rng(1), 4, 8)
    a, _ = forward(m, h)
    b, _ = forward(m, h)
    assert np.array_equal(a, b)


def test_softmax_per_bs_sums_to_one():
    rng = np.random.default_rng(2)
    m = MLPModel(12, 6, 3, hidden=(10,), activation="softmax")
    r, _ = forward(m, _inputs(rng, 7, 12))
    # user q*B + b belongs to BS b
    sums = r.reshape(7, 2, 3).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_linear_net_gradient_is_outer_product():
    rng = np.random.default_rng(3)
    m = MLPModel(4, 2, 2, hidden=(), activation="affine")
    X = _inputs(rng, 5, 4)
    r, tape = forward(m, X)
    g = backward(m, tape, np.ones_like(r))
    a = np.log10(X)  # default statistics: zero mean, unit std
    np.testing.assert_allclose(g["W0"], a.T @ np.ones((5, 2)))
    np.testing.assert_allclose(g["b0"], [5.0, 5.0])


def test_zero_upstream_gives_zero_grads():
    m = MLPModel(8, 4, 2, hidden=(6, 6), dropout=0.0)
    X = _inputs(np.random.default_rng(4), 6, 8)
    r, tape = forward(m, X, "train")
    g = backward(m, tape, np.zeros_like(r))
    assert all(not v.any() for v in g.values())


def test_tape_mismatch():
    m = MLPModel(8, 4, 2, hidden=(6,))
    other = MLPModel(8, 4, 2, hidden=(6,))
    r, tape = forward(m, _inputs(np.random.default_rng(5), 2, 8))
    with pytest.raises(TapeMismatch):
        backward(other, tape, np.ones_like(r))
    with pytest.raises(TapeMismatch):
        backward(m, tape, np.ones((3, 4)))


def _param_fd(m, X, upstream, mode, name, idx, h=1e-6):
    P = m.params[name]
    old = P[idx]
    out = []
    for s in (1, -1):
        P[idx] = old + s * h
        r, _ = forward(m, X, mode)
        out.append(np.sum(r * upstream))
    P[idx] = old
    return (out[0] - out[1]) / (2 * h)


@pytest.mark.parametrize("activation", ["sigmoid", "softmax", "relu", "affine"])
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_layer_gradients_match_fd(activation, mode):
    rng = np.random.default_rng(6)
    m = MLPModel(8, 4, 2, hidden=(7, 5), activation=activation, dropout=0.0, seed=1)
    X = _inputs(rng, 6, 8)
    m.fit_input(X)
    for k in m.stats:
        if k.startswith("mean"):
            m.stats[k] = rng.normal(0, 0.3, m.stats[k].shape)
    for k in m.params:
        if k.startswith(("b", "beta")):
            # zero biases put dead-row outputs exactly on the ReLU kink
            m.params[k] = rng.normal(0, 0.3, m.params[k].shape)
    upstream = rng.normal(size=(6, 4))
    r, tape = forward(m, X, mode)
    g = backward(m, tape, upstream)
    names = sorted(m.params)
    probes = 0
    while probes < 30:
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in m.params[name].shape)
        fd = _param_fd(m, X, upstream, mode, name, idx)
        if mode == "train" and name in ("b0", "b1"):
            # batch statistics cancel biases feeding a batch-norm exactly
            assert abs(g[name][idx]) < 1e-12 and abs(fd) < 1e-8
            continue
        if activation == "relu" and abs(fd) < 1e-10:
            continue  # sitting on a flat piece
        scale = max(abs(fd), abs(g[name][idx]), 1e-6)
        assert abs(g[name][idx] - fd) <= 1e-4 * scale, (name, idx, g[name][idx], fd)
        probes += 1


def test_adam_zero_grads_leave_params():
    m = MLPModel(4, 2, 2, hidden=(3,))
    before = {k: v.copy() for k, v in m.params.items()}
    adam_update(m, {k: np.zeros_like(v) for k, v in m.params.items()}, 1, TrainConfig())
    assert all(np.array_equal(before[k], m.params[k]) for k in before)
    assert all(not v.any() for v in m.opt.m.values())


def test_adam_first_step_is_lr():
    m = MLPModel(1, 1, 1, hidden=(), activation="affine")
    w0 = m.params["W0"].copy()
    grads = {k: np.ones_like(v) for k, v in m.params.items()}
    adam_update(m, grads, 1, TrainConfig(lr=1e-3))
    np.testing.assert_allclose(m.params["W0"] - w0, -1e-3, rtol=1e-6)


def _tiny_dataset(n=40, seed=0):
    return gen_dataset(NetworkConfig(B=2, Q=1, model="pathloss"), n, seed=seed)


def test_lr_decay_after_ten_epochs():
    ds = _tiny_dataset(20)
    m = MLPModel.for_config(2, 1, hidden=(8,))
    train(m, ds, ds, LossSpec("none"), TrainConfig(epochs=10, lam=0.0))
    assert m.opt.lr == pytest.approx(0.001 * 0.99 ** 10)


def test_one_sample_one_epoch():
    ds = _tiny_dataset(1)
    m = MLPModel.for_config(2, 1, hidden=(4,))
    _, hist = train(m, ds, ds, LossSpec("implicit"), TrainConfig(epochs=1))
    assert len(hist) == 1


def test_no_projection_zero_lambda_is_pure_rate():
    rng = np.random.default_rng(7)
    cfg, H, _ = random_feasible(rng, 2, 1, "pathloss")
    inst = assemble_affine_constraints(H, cfg)
    r = np.array([-0.5, 2.0])  # far outside the feasible set
    loss, R, back = sample_loss(r, inst, LossSpec("none"), 0.0)
    xs = np.maximum(r, 0)
    assert loss == pytest.approx(-inst.sum_rate(xs) / 1e6)
    np.testing.assert_allclose(back(), -inst.sum_rate_grad(xs) / 1e6 * (r >= 0))


def test_explicit_toy_training_has_zero_violation():
    ds = gen_dataset(NetworkConfig(B=2, Q=1, model="pathloss"), 500, seed=3)
    tr, va, _ = split_dataset(ds)
    m = MLPModel.for_config(2, 1, hidden=(32, 32), seed=0)
    best, hist = train(m, tr, va, LossSpec("explicit"), TrainConfig(epochs=2, lam=1e4))
    assert hist[-1].val_violation_prob == 0.0


def test_checkpoint_roundtrip(tmp_path):
    ds = _tiny_dataset(20)
    m = MLPModel.for_config(2, 1, hidden=(8, 8))
    best, _ = train(m, ds, ds, LossSpec("implicit"), TrainConfig(epochs=2))
    save_checkpoint(best, tmp_path / "m.npz", {"note": "x"})
    back, extra = load_checkpoint(tmp_path / "m.npz")
    X = np.stack([tensor_to_input(H) for H in ds.samples])
    assert np.array_equal(forward(best, X)[0], forward(back, X)[0])
    assert extra == {"note": "x"} and back.opt.t == best.opt.t


def test_bad_config():
    with pytest.raises(ConfigError):
        MLPModel(4, 3, 2)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
