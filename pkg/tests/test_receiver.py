import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chirpfed.errors import ConfigurationError, InputError, ParseError
from chirpfed.receiver import (LabeledBatch, MlpParams, ber_eval,
                               default_hidden, detect, detect_batch, forward,
                               forward_batch, grad, hvp, init_params,
                               load_params, loss, save_params, sgd_step, train)


def random_net(rng, sizes=None):
    if sizes is None:
        sizes = [int(rng.integers(2, 7)), int(rng.integers(2, 7)),
                 int(rng.integers(2, 7)), 1]
    p = init_params(sizes, rng)
    # random biases keep pre-activations off the exact ReLU kink, where
    # finite differences would disagree with the (zero) subgradient
    return p.from_flat(p.to_flat() + 0.05 * rng.standard_normal(p.n_params))


def random_batch(rng, n_in, n_rows=4):
    return LabeledBatch(rng.standard_normal((n_rows, n_in)),
                        rng.integers(0, 2, size=n_rows).astype(float))


def numeric_grad(p, batch, eps=1e-6):
    theta = p.to_flat()
    out = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (loss(p.from_flat(up), batch) - loss(p.from_flat(dn), batch)) / (2 * eps)
    return out


# ----------------------------------------------------------------- structure

def test_default_hidden():
    assert default_hidden(160) == (160, 140)
    assert default_hidden(80) == (80, 70)


def test_param_validation():
    rng = np.random.default_rng(0)
    p = init_params([4, 3, 3, 1], rng)
    assert p.layer_sizes == [4, 3, 3, 1]
    assert p.n_params == 4 * 3 + 3 + 3 * 3 + 3 + 3 * 1 + 1
    with pytest.raises(ConfigurationError):
        init_params([4, 3, 1], rng)
    with pytest.raises(ConfigurationError):
        init_params([4, 3, 3, 2], rng)
    with pytest.raises(ConfigurationError):
        MlpParams((np.ones((3, 4)), np.ones((2, 3)), np.ones((1, 3))),
                  (np.zeros(3), np.zeros(2), np.zeros(1)))


def test_init_bounds_and_zero_bias():
    rng = np.random.default_rng(1)
    p = init_params([8, 8, 7, 1], rng)
    for w in p.weights:
        lim = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        assert np.all(np.abs(w) <= lim)
    for b in p.biases:
        assert np.all(b == 0)


def test_flat_round_trip():
    rng = np.random.default_rng(2)
    p = random_net(rng)
    q = p.from_flat(p.to_flat())
    for a, b in zip(p.weights, q.weights):
        assert np.array_equal(a, b)
    with pytest.raises(InputError):
        p.from_flat(np.zeros(p.n_params + 1))


def test_batch_validation():
    with pytest.raises(InputError):
        LabeledBatch(np.ones((2, 3)), np.array([0.0, 2.0]))
    with pytest.raises(InputError):
        LabeledBatch(np.ones((2, 3)), np.array([0.0]))
    with pytest.raises(InputError):
        LabeledBatch(np.array([[np.nan, 0.0]]), np.array([0.0]))


# ------------------------------------------------------------------- forward

def test_zero_net_outputs_half():
    p = MlpParams(tuple(np.zeros(s) for s in [(3, 4), (3, 3), (1, 3)]),
                  (np.zeros(3), np.zeros(3), np.zeros(1)))
    assert forward(p, np.ones(4)) == pytest.approx(0.5)


def test_relu_gating():
    # strongly negative first-layer biases kill every hidden unit, so the
    # output collapses to sigmoid(b3)
    rng = np.random.default_rng(3)
    p = random_net(rng, [4, 5, 5, 1])
    p = MlpParams(p.weights, (np.full(5, -100.0), np.full(5, -100.0),
                              np.array([0.7])))
    expect = 1.0 / (1.0 + np.exp(-0.7))
    assert forward(p, rng.standard_normal(4)) == pytest.approx(expect)


def test_forward_matches_straight_line_evaluator():
    rng = np.random.default_rng(4)
    p = random_net(rng, [6, 5, 4, 1])
    x = rng.standard_normal(6)
    # independent plain-loop evaluation
    h = x
    for w, b, last in zip(p.weights, p.biases, (False, False, True)):
        z = np.array([float(np.dot(w[i], h)) + b[i] for i in range(w.shape[0])])
        h = z if last else np.maximum(z, 0.0)
    expect = 1.0 / (1.0 + np.exp(-h[0]))
    assert forward(p, x) == pytest.approx(expect, rel=1e-12)


def test_forward_shape_checks():
    rng = np.random.default_rng(5)
    p = random_net(rng, [4, 3, 3, 1])
    with pytest.raises(InputError):
        forward(p, np.ones(5))
    with pytest.raises(InputError):
        forward_batch(p, np.ones((2, 5)))


def test_forward_output_in_open_interval():
    rng = np.random.default_rng(6)
    p = random_net(rng, [4, 3, 3, 1])
    out = forward_batch(p, rng.standard_normal((50, 4)))
    assert np.all((out > 0) & (out < 1))


# ---------------------------------------------------------------------- loss

def test_loss_values():
    rng = np.random.default_rng(7)
    p = MlpParams(tuple(np.zeros(s) for s in [(3, 4), (3, 3), (1, 3)]),
                  (np.zeros(3), np.zeros(3), np.zeros(1)))
    b = LabeledBatch(np.ones((1, 4)), np.array([1.0]))
    assert loss(p, b) == pytest.approx(0.25)  # output 0.5, label 1
    big = random_batch(rng, 4, 64)
    assert 0.0 <= loss(random_net(rng, [4, 3, 3, 1]), big) <= 1.0
    with pytest.raises(InputError):
        loss(p, LabeledBatch(np.ones((0, 4)), np.zeros(0)))


# ---------------------------------------------------------------------- grad

def test_grad_zero_at_balanced_point():
    # zero net outputs 0.5 on every input; paired labels 0 and 1 on the same
    # input make the MSE stationary there
    p = MlpParams(tuple(np.zeros(s) for s in [(3, 4), (3, 3), (1, 3)]),
                  (np.zeros(3), np.zeros(3), np.zeros(1)))
    b = LabeledBatch(np.vstack([np.ones(4), np.ones(4)]), np.array([0.0, 1.0]))
    assert np.allclose(grad(p, b), 0.0)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(5):
        p = random_net(rng)
        b = random_batch(rng, p.layer_sizes[0])
        g = grad(p, b)
        num = numeric_grad(p, b)
        denom = np.maximum(np.abs(num), 1e-8)
        assert np.max(np.abs(g - num) / denom) < 1e-4


def test_grad_1111_hand_chain_rule():
    # scalar chain: out = sigmoid(w3*relu(w2*relu(w1*x+b1)+b2)+b3)
    w1, b1, w2, b2, w3, b3 = 0.8, 0.1, 1.2, 0.2, -0.7, 0.3
    x, y = 1.5, 1.0
    p = MlpParams((np.array([[w1]]), np.array([[w2]]), np.array([[w3]])),
                  (np.array([b1]), np.array([b2]), np.array([b3])))
    batch = LabeledBatch(np.array([[x]]), np.array([y]))
    z1 = w1 * x + b1          # > 0
    a1 = z1
    z2 = w2 * a1 + b2         # > 0
    a2 = z2
    z3 = w3 * a2 + b3
    out = 1 / (1 + np.exp(-z3))
    d3 = 2 * (out - y) * out * (1 - out)
    hand = np.array([d3 * w3 * w2 * x,    # dL/dw1
                     d3 * w3 * w2,        # dL/db1
                     d3 * w3 * a1,        # dL/dw2
                     d3 * w3,             # dL/db2
                     d3 * a2,             # dL/dw3
                     d3])                 # dL/db3
    assert np.allclose(grad(p, batch), hand, rtol=1e-12)


# ----------------------------------------------------------------------- hvp

def test_hvp_zero_vector():
    rng = np.random.default_rng(9)
    p = random_net(rng)
    b = random_batch(rng, p.layer_sizes[0])
    assert np.allclose(hvp(p, b, np.zeros(p.n_params)), 0.0)


def test_hvp_matches_grad_differences():
    rng = np.random.default_rng(10)
    for _ in range(5):
        p = random_net(rng)
        b = random_batch(rng, p.layer_sizes[0])
        v = rng.standard_normal(p.n_params)
        eps = 1e-5
        theta = p.to_flat()
        num = (grad(p.from_flat(theta + eps * v), b)
               - grad(p.from_flat(theta - eps * v), b)) / (2 * eps)
        hv = hvp(p, b, v)
        denom = max(np.linalg.norm(num), 1e-10)
        assert np.linalg.norm(hv - num) / denom < 1e-3


def test_hvp_symmetry_and_linearity():
    rng = np.random.default_rng(11)
    p = random_net(rng)
    b = random_batch(rng, p.layer_sizes[0])
    u = rng.standard_normal(p.n_params)
    v = rng.standard_normal(p.n_params)
    assert np.dot(hvp(p, b, u), v) == pytest.approx(np.dot(u, hvp(p, b, v)),
                                                    abs=1e-10)
    lhs = hvp(p, b, 2.0 * u + 3.0 * v)
    rhs = 2.0 * hvp(p, b, u) + 3.0 * hvp(p, b, v)
    assert np.allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_hvp_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    p = random_net(rng)
    b = random_batch(rng, p.layer_sizes[0])
    u = rng.standard_normal(p.n_params)
    v = rng.standard_normal(p.n_params)
    assert abs(np.dot(hvp(p, b, u), v) - np.dot(u, hvp(p, b, v))) < 1e-10


# ----------------------------------------------------------- detect and BER

def test_detect_threshold_convention():
    p = MlpParams(tuple(np.zeros(s) for s in [(3, 4), (3, 3), (1, 3)]),
                  (np.zeros(3), np.zeros(3), np.zeros(1)))
    assert detect(p, np.ones(4)) == 1  # output exactly 0.5 -> 1


def test_ber_eval_basics():
    rng = np.random.default_rng(12)
    p = MlpParams(tuple(np.zeros(s) for s in [(3, 4), (3, 3), (1, 3)]),
                  (np.zeros(3), np.zeros(3), np.zeros(1)))
    x = rng.standard_normal((100, 4))
    ones = LabeledBatch(x, np.ones(100))
    zeros = LabeledBatch(x, np.zeros(100))
    assert ber_eval(p, ones) == 0.0       # constant-1 predictor
    assert ber_eval(p, zeros) == 1.0      # complemented labels
    balanced = LabeledBatch(x, (np.arange(100) % 2).astype(float))
    assert ber_eval(p, balanced) == pytest.approx(0.5)


def test_ber_complement_symmetry():
    rng = np.random.default_rng(13)
    p = random_net(rng, [4, 3, 3, 1])
    b = random_batch(rng, 4, 200)
    flipped = LabeledBatch(b.inputs, 1.0 - b.labels)
    assert ber_eval(p, b) + ber_eval(p, flipped) == pytest.approx(1.0)


# ------------------------------------------------------------------ training

def test_sgd_step_definition():
    rng = np.random.default_rng(14)
    p = random_net(rng)
    b = random_batch(rng, p.layer_sizes[0])
    q = sgd_step(p, b, 0.1)
    assert np.allclose(q.to_flat(), p.to_flat() - 0.1 * grad(p, b))


def test_training_solves_separable_toy():
    rng = np.random.default_rng(15)
    n = 64
    x = np.vstack([rng.normal(-2.0, 0.3, size=(n // 2, 2)),
                   rng.normal(2.0, 0.3, size=(n // 2, 2))])
    y = np.concatenate([np.zeros(n // 2), np.ones(n // 2)])
    batch = LabeledBatch(x, y)
    p = init_params([2, 8, 8, 1], rng)
    for step in range(10000):
        p = sgd_step(p, batch, 2.0)
        if step % 200 == 0 and loss(p, batch) < 1e-3:
            break
    assert loss(p, batch) < 1e-3


def test_train_loop_reduces_loss():
    rng = np.random.default_rng(16)
    n = 128
    x = np.vstack([rng.normal(-1.5, 0.4, size=(n // 2, 3)),
                   rng.normal(1.5, 0.4, size=(n // 2, 3))])
    y = np.concatenate([np.zeros(n // 2), np.ones(n // 2)])
    batch = LabeledBatch(x, y)
    p0 = init_params([3, 6, 5, 1], rng)
    p1 = train(p0, batch, epochs=30, lr=1e-2, batch_size=16,
               rng=np.random.default_rng(17))
    assert loss(p1, batch) < loss(p0, batch)
    assert ber_eval(p1, batch) < 0.1


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(18)
    p = random_net(rng, [16, 16, 14, 1])
    path = tmp_path / "net.cdnn"
    save_params(path, p)
    back = load_params(path)
    assert back.layer_sizes == p.layer_sizes
    assert np.array_equal(back.to_flat(), p.to_flat())  # f64 storage is exact


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.cdnn"
    bad.write_bytes(b"YUCK" + bytes(10))
    with pytest.raises(ParseError):
        load_params(bad)
    rng = np.random.default_rng(19)
    good = tmp_path / "good.cdnn"
    save_params(good, random_net(rng, [4, 3, 3, 1]))
    cut = tmp_path / "cut.cdnn"
    cut.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(ParseError):
        load_params(cut)
