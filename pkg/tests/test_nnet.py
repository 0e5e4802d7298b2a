import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cooccur.affinity import average_precision
from cooccur.data.pairs import PairExample
from cooccur.nnet import (FLATTEN, RELU, SIGMOID, InputShapeError, SiameseNet, TrainConfig,
                          WeightsFormatError, backward_pair, conv, fc, forward_pair, grad_check,
                          layer_backward, layer_forward, load_params, logistic_loss,
                          numerical_gradient, predict_prob, relative_error, save_params, sgd_step,
                          sigmoid, train)

from conftest import tiny_net


# --- forward ---------------------------------------------------------------


def test_zero_parameters_give_zero_logit(rng):
    net = SiameseNet.for_patches(0)
    for p in net.params():
        p[...] = 0.0
    a, b = rng.uniform(size=(2, 17, 17, 3))
    assert forward_pair(net, a, b) == 0.0


def test_forward_is_deterministic(rng):
    net = SiameseNet.for_patches(3)
    a, b = rng.uniform(size=(2, 17, 17, 3))
    assert forward_pair(net, a, b) == forward_pair(net, a, b)


def test_logit_is_not_symmetric_before_averaging(rng):
    net = SiameseNet.for_patches(3)
    a, b = rng.uniform(size=(2, 17, 17, 3))
    assert forward_pair(net, a, b) != forward_pair(net, b, a)


def test_wrong_input_shape_rejected():
    net = SiameseNet.for_patches(0)
    with pytest.raises(InputShapeError):
        forward_pair(net, np.zeros((16, 17, 3)), np.zeros((16, 17, 3)))


def test_batched_logits_match_single_pairs(rng):
    net = SiameseNet.for_frames(1)
    a, b = rng.uniform(size=(2, 4, 33, 33, 3))
    batch = net.logits(a, b)
    single = [forward_pair(net, a[i], b[i]) for i in range(4)]
    np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)


# --- sigmoid and loss ------------------------------------------------------


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(50.0) >= 1 - 1e-20
    assert sigmoid(-2.0) == pytest.approx(0.11920292202211755, abs=1e-15)


@given(st.floats(-700, 700))
def test_sigmoid_stays_in_unit_interval(z):
    s = sigmoid(z)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(1 - sigmoid(-z), abs=1e-15)


def test_logistic_loss_values():
    assert logistic_loss(0.0, 1) == pytest.approx(math.log(2), abs=1e-15)
    assert logistic_loss(10.0, 1) == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert logistic_loss(10.0, 1) == pytest.approx(4.54e-5, rel=1e-3)
    assert logistic_loss(10.0, 0) == pytest.approx(10.0000454, abs=1e-7)


@given(st.floats(-500, 500), st.sampled_from([0, 1]))
def test_logistic_loss_matches_high_precision_oracle(z, y):
    mpmath = pytest.importorskip("mpmath")
    with mpmath.workdps(50):
        # -log s(z) = log(1 + e^-z) and -log(1 - s(z)) = log(1 + e^z)
        exact = mpmath.log1p(mpmath.exp(-mpmath.mpf(z) if y == 1 else mpmath.mpf(z)))
    assert logistic_loss(z, y) == pytest.approx(float(exact), rel=1e-12, abs=1e-300)


# --- gradients -------------------------------------------------------------


def _layer_check(spec, params, x, rng, eps=1e-5):
    """Relative error of layer_backward against central differences of sum(dy * f(x))."""
    y, _ = layer_forward(spec, params, x)
    dy = rng.normal(size=y.shape)

    def f():
        return float(np.sum(dy * layer_forward(spec, params, x)[0]))

    _, cache = layer_forward(spec, params, x)
    dx, grads = layer_backward(spec, params, cache, dy)
    worst = relative_error(dx, numerical_gradient(f, x, eps)).max()
    for p, g in zip(params, grads):
        worst = max(worst, relative_error(g, numerical_gradient(f, p, eps)).max())
    return worst


@pytest.mark.parametrize("spec,in_shape", [
    (conv(3, 4, 3, 1), (2, 7, 7, 3)),
    (conv(2, 3, 5, 2), (2, 11, 9, 2)),
    (fc(6, 4), (3, 6)),
    (RELU, (3, 5)),
    (SIGMOID, (3, 5)),
    (FLATTEN, (2, 3, 3, 2)),
])
def test_layer_gradients_match_finite_differences(spec, in_shape, rng):
    params = [rng.normal(size=s) for s in spec.param_shapes()]
    x = rng.normal(size=in_shape)
    if spec.kind == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
    assert _layer_check(spec, params, x, rng) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_siamese_gradient_check(seed):
    net = tiny_net(seed)
    r = np.random.default_rng(seed)
    ex = (r.uniform(size=(9, 9, 3)), r.uniform(size=(9, 9, 3)), seed % 2)
    assert grad_check(net, ex, epsilon=1e-5) < 1e-4


def test_sign_flipped_fc_gradient_is_caught():
    net = tiny_net(1)
    r = np.random.default_rng(1)
    ex = (r.uniform(size=(9, 9, 3)), r.uniform(size=(9, 9, 3)), 1)
    n_branch = sum(len(p) for p in net.branch_params)

    def flipped(net_, a, b, y):
        g = backward_pair(net_, a, b, y)
        g[n_branch] = -g[n_branch]  # first head fc weight
        return g

    assert grad_check(net, ex, grad_fn=flipped) == pytest.approx(2.0, abs=1e-3)


def test_linear_one_weight_derivative():
    # loss = sigmoid(w * x): d/dw = s(1-s) x
    w, x = np.array([0.7]), 1.3
    s = 1 / (1 + math.exp(-w[0] * x))
    numeric = numerical_gradient(lambda: float(1 / (1 + np.exp(-w[0] * x))), w, 1e-5)
    assert abs(numeric[0] - s * (1 - s) * x) < 1e-8


def test_zero_input_zero_bias_gives_zero_conv_weight_grads():
    net = SiameseNet.for_patches(2)
    for layer in net.branch_params + net.head_params:
        if layer:
            layer[1][...] = 0.0
    z = np.zeros((17, 17, 3))
    grads = backward_pair(net, z, z, 1)
    # params() order: conv1 W, conv1 b, conv2 W, conv2 b, ...
    assert grads[0].shape == net.branch_params[0][0].shape
    assert grads[2].shape == net.branch_params[2][0].shape
    assert not grads[0].any() and not grads[2].any()


def test_single_example_overfits_to_zero_gradient():
    net = tiny_net(4)
    r = np.random.default_rng(4)
    a, b = r.uniform(size=(2, 1, 9, 9, 3))
    params = net.params()
    vel = [np.zeros_like(p) for p in params]
    for _ in range(3000):
        _, g = net.loss_and_grads(a, b, [1.0])
        sgd_step(params, g, vel, 0.5, 0.9)
    _, g = net.loss_and_grads(a, b, [1.0])
    assert math.sqrt(sum(float((x * x).sum()) for x in g)) < 1e-6


# --- optimiser ---------------------------------------------------------------


def test_sgd_plain_step():
    p, v = [np.array([1.0])], [np.array([0.0])]
    sgd_step(p, [np.array([2.0])], v, 0.1, 0.0)
    assert p[0][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_is_fixed_point():
    p, v = [np.array([1.5, -2.0])], [np.zeros(2)]
    sgd_step(p, [np.zeros(2)], v, 0.1, 0.9)
    assert p[0].tolist() == [1.5, -2.0]


def test_sgd_two_momentum_steps():
    p, v = [np.array([0.0])], [np.array([0.0])]
    for _ in range(2):
        sgd_step(p, [np.array([1.0])], v, 0.1, 0.9)
    assert p[0][0] == pytest.approx(-0.29, abs=1e-15)


def test_lr_schedule_halves_every_quarter():
    cfg = TrainConfig(epochs=8)
    assert [cfg.lr_at(e) for e in range(8)] == [0.01, 0.01, 0.005, 0.005, 0.0025, 0.0025, 0.00125, 0.00125]


# --- training ----------------------------------------------------------------


def _separable_set(n, seed):
    r = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        la, lb = r.uniform(0, 1, 2)
        if abs(la - lb - 0.2) < 0.05:
            continue
        a = np.clip(la + r.normal(0, 0.05, (9, 9, 3)), 0, 1)
        b = np.clip(lb + r.normal(0, 0.05, (9, 9, 3)), 0, 1)
        out.append(PairExample(a, b, int(a.mean() > b.mean() + 0.2)))
    return out


def test_training_separable_pairs_reaches_high_ap():
    data = _separable_set(2000, 0)
    net, hist = train(tiny_net(0), data, TrainConfig(epochs=8, learning_rate=0.05, batch_size=32))
    a = np.stack([e.a for e in data])
    b = np.stack([e.b for e in data])
    scores = net.logits(a, b)
    assert average_precision(scores, [e.c_label for e in data]) > 0.95
    assert hist[-1] < hist[0]


def test_zero_epochs_returns_initial_net():
    net = tiny_net(5)
    out, hist = train(net, _separable_set(20, 1), TrainConfig(epochs=0))
    assert hist == []
    for p, q in zip(net.params(), out.params()):
        assert np.array_equal(p, q)


def test_training_is_bit_reproducible():
    data = _separable_set(200, 2)
    cfg = TrainConfig(epochs=2, batch_size=16, seed=7)
    n1, _ = train(tiny_net(0), data, cfg)
    n2, _ = train(tiny_net(0), data, cfg)
    for p, q in zip(n1.params(), n2.params()):
        assert np.array_equal(p, q)


def test_q_labels_required_for_q_training():
    from cooccur.nnet import MissingLabelError
    data = [PairExample(np.zeros((9, 9, 3)), np.zeros((9, 9, 3)), 1)] * 4
    with pytest.raises(MissingLabelError):
        train(tiny_net(0), data, TrainConfig(epochs=1, label_source="Q"))


# --- persistence -------------------------------------------------------------


def test_save_load_round_trip(tmp_path, rng):
    net = SiameseNet.for_patches(9)
    save_params(net, tmp_path / "w.bin")
    back = load_params(tmp_path / "w.bin")
    a, b = rng.uniform(size=(2, 100, 17, 17, 3))
    assert np.array_equal(net.logits(a, b), back.logits(a, b))


def test_corrupt_magic_rejected(tmp_path):
    save_params(tiny_net(0), tmp_path / "w.bin")
    raw = bytearray((tmp_path / "w.bin").read_bytes())
    raw[0:4] = b"XXXX"
    (tmp_path / "w.bin").write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError):
        load_params(tmp_path / "w.bin")


def test_payload_length_mismatch_rejected(tmp_path):
    save_params(tiny_net(0), tmp_path / "w.bin")
    raw = bytearray((tmp_path / "w.bin").read_bytes())
    # first layer record starts after the 16-byte header: 17 bytes of kind + hyper, then lengths
    n_w = struct.unpack_from("<Q", raw, 16 + 17)[0]
    struct.pack_into("<Q", raw, 16 + 17, n_w + 1)
    (tmp_path / "w.bin").write_bytes(bytes(raw))
    with pytest.raises(WeightsFormatError):
        load_params(tmp_path / "w.bin")


@pytest.mark.parametrize("cut", [3, 20, 200])
def test_truncated_file_rejected(tmp_path, cut):
    save_params(tiny_net(0), tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "w.bin").write_bytes(raw[:cut])
    with pytest.raises(WeightsFormatError):
        load_params(tmp_path / "w.bin")


def test_predict_prob_is_sigmoid_of_logit(rng):
    net = tiny_net(0)
    a, b = rng.uniform(size=(2, 9, 9, 3))
    assert predict_prob(net, a, b) == sigmoid(forward_pair(net, a, b))
