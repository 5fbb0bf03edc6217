import csv

import numpy as np
import pytest

from chirpfed.errors import ConfigurationError, EmptyRoundError
from chirpfed.federation import (FmlConfig, NodeState, RoundLog, aggregate,
                                 evaluate, local_fedavg_step, local_maml_step,
                                 maml_update, run_rounds, schedule,
                                 write_round_logs)
from chirpfed.receiver import (LabeledBatch, grad, hvp, init_params, loss,
                               sgd_step)


def make_node(nid, seed, n_in=4, n_rows=8, theta=None):
    rng = np.random.default_rng(seed)
    if theta is None:
        theta = init_params([n_in, 5, 4, 1], np.random.default_rng(1000 + seed))
    tr = LabeledBatch(rng.standard_normal((n_rows, n_in)),
                      rng.integers(0, 2, n_rows).astype(float))
    te = LabeledBatch(rng.standard_normal((n_rows, n_in)),
                      rng.integers(0, 2, n_rows).astype(float))
    return NodeState(nid, theta, tr, te)


# -------------------------------------------------------------------- config

def test_config_validation():
    assert FmlConfig(K=33, G=0.3).N == 10
    with pytest.raises(ConfigurationError):
        FmlConfig(G=0.0)
    with pytest.raises(ConfigurationError):
        FmlConfig(alpha=0.0)
    with pytest.raises(ConfigurationError):
        FmlConfig(p_decode=1.5)
    with pytest.raises(ConfigurationError):
        FmlConfig(K=100, G=0.001)  # N rounds to 0
    with pytest.raises(ConfigurationError):
        FmlConfig(mode="third_order")


def test_round_log_subset_invariant():
    with pytest.raises(ConfigurationError):
        RoundLog(0, (1, 2), (3,), 0.0, 0.5, 0.5)


# --------------------------------------------------------------- MAML update

def test_maml_alpha_zero_is_sgd_on_test_split():
    node = make_node(0, 0)
    # alpha must be > 0 in config, but maml_update itself accepts alpha=0
    flat = maml_update(
        node.theta.to_flat(),
        grad_train=lambda th: grad(node.theta.from_flat(th), node.train_split),
        hvp_train=lambda th, v: hvp(node.theta.from_flat(th), node.train_split, v),
        grad_test=lambda th: grad(node.theta.from_flat(th), node.test_split),
        alpha=0.0, beta=0.05, T0=1)
    want = sgd_step(node.theta, node.test_split, 0.05)
    assert np.allclose(flat, want.to_flat())


def test_exact_meta_gradient_matches_composed_fd():
    node = make_node(0, 1)
    alpha = 0.01
    p0 = node.theta
    theta = p0.to_flat()

    def composed(th):
        phi = th - alpha * grad(p0.from_flat(th), node.train_split)
        return loss(p0.from_flat(phi), node.test_split)

    # one exact step at tiny beta recovers the meta-gradient
    beta = 1.0
    new = maml_update(
        theta,
        grad_train=lambda th: grad(p0.from_flat(th), node.train_split),
        hvp_train=lambda th, v: hvp(p0.from_flat(th), node.train_split, v),
        grad_test=lambda th: grad(p0.from_flat(th), node.test_split),
        alpha=alpha, beta=beta, T0=1, mode="exact")
    meta = (theta - new) / beta
    rng = np.random.default_rng(2)
    v = rng.standard_normal(theta.size)
    v /= np.linalg.norm(v)
    eps = 1e-6
    fd = (composed(theta + eps * v) - composed(theta - eps * v)) / (2 * eps)
    assert np.dot(meta, v) == pytest.approx(fd, rel=1e-3, abs=1e-10)


def test_maml_on_quadratic_matches_hand_update():
    # L_train = 0.5 theta'A theta - b't theta, L_test with b_test
    A = np.array([[2.0, 0.3], [0.3, 1.0]])
    b_tr = np.array([1.0, -0.5])
    b_te = np.array([0.4, 0.9])
    alpha, beta = 0.05, 0.1
    theta = np.array([0.7, -0.2])
    new = maml_update(
        theta,
        grad_train=lambda th: A @ th - b_tr,
        hvp_train=lambda th, v: A @ v,
        grad_test=lambda th: A @ th - b_te,
        alpha=alpha, beta=beta, T0=1, mode="exact")
    phi = theta - alpha * (A @ theta - b_tr)
    meta = (np.eye(2) - alpha * A) @ (A @ phi - b_te)
    assert np.allclose(new, theta - beta * meta, rtol=1e-12)


def test_first_order_drops_hessian_term():
    A = np.diag([3.0, 1.0])
    b = np.zeros(2)
    theta = np.array([1.0, 1.0])
    new = maml_update(theta, lambda th: A @ th - b, lambda th, v: A @ v,
                      lambda th: A @ th - b, alpha=0.1, beta=0.1, T0=1,
                      mode="first_order")
    phi = theta - 0.1 * (A @ theta)
    assert np.allclose(new, theta - 0.1 * (A @ phi))


# ------------------------------------------------------------- local updates

def test_fedavg_lr_zero_is_identity():
    node = make_node(0, 3)
    out = local_fedavg_step(node, lr=0.0, T0=3)
    assert np.array_equal(out.to_flat(), node.theta.to_flat())


def test_fedavg_single_step_definition():
    node = make_node(0, 4)
    full = LabeledBatch(
        np.vstack([node.train_split.inputs, node.test_split.inputs]),
        np.concatenate([node.train_split.labels, node.test_split.labels]))
    out = local_fedavg_step(node, lr=0.2, T0=1)
    want = node.theta.to_flat() - 0.2 * grad(node.theta, full)
    assert np.allclose(out.to_flat(), want)


def test_fedavg_descends_on_smooth_objective():
    node = make_node(0, 5, n_rows=32)
    full = LabeledBatch(
        np.vstack([node.train_split.inputs, node.test_split.inputs]),
        np.concatenate([node.train_split.labels, node.test_split.labels]))
    prev = loss(node.theta, full)
    out = local_fedavg_step(node, lr=0.1, T0=20)
    assert loss(out, full) <= prev


def test_local_maml_requires_both_splits():
    node = make_node(0, 6)
    empty = LabeledBatch(np.zeros((0, 4)), np.zeros(0))
    broken = NodeState(0, node.theta, node.train_split, empty)
    with pytest.raises(ConfigurationError):
        local_maml_step(broken, 0.01, 0.01, 1)


# ---------------------------------------------------------------- scheduling

def test_schedule_full_participation():
    rng = np.random.default_rng(0)
    scheduled, u = schedule(5, 5, 1.0, rng)
    assert scheduled == (0, 1, 2, 3, 4)
    assert all(u[i] == 1 for i in range(5))


def test_schedule_decode_failure():
    rng = np.random.default_rng(0)
    scheduled, u = schedule(10, 4, 0.0, rng)
    assert len(scheduled) == 4
    assert all(v == 0 for v in u.values())


def test_schedule_bounds():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        schedule(3, 4, 1.0, rng)
    with pytest.raises(ConfigurationError):
        schedule(3, 0, 1.0, rng)


def test_schedule_quick_fairness():
    rng = np.random.default_rng(1)
    counts = np.zeros(33)
    rounds = 2000
    for _ in range(rounds):
        scheduled, _ = schedule(33, 10, 1.0, rng)
        for i in scheduled:
            counts[i] += 1
    freq = counts / rounds
    assert np.all(np.abs(freq - 10 / 33) < 0.03)


# --------------------------------------------------------------- aggregation

def test_aggregate_single_and_midpoint():
    a = np.array([1.0, 2.0])
    b = np.array([3.0, 6.0])
    assert np.array_equal(aggregate([(a, 7, 1), (b, 99, 0)]), a)
    assert np.array_equal(aggregate([(a, 5, 1), (b, 5, 1)]), [2.0, 4.0])


def test_aggregate_weight_renormalization():
    a = np.array([2.0])
    # identical parameters, wildly different sizes: result is still exactly a
    out = aggregate([(a, 1, 1), (a, 1000, 1), (a, 3, 0)])
    assert out[0] == pytest.approx(2.0, rel=1e-15)


def test_aggregate_weighted_mean():
    out = aggregate([(np.array([0.0]), 1, 1), (np.array([4.0]), 3, 1)])
    assert out[0] == pytest.approx(3.0)


def test_aggregate_empty_round():
    with pytest.raises(EmptyRoundError):
        aggregate([(np.ones(2), 4, 0)])


# -------------------------------------------------------------------- rounds

def test_zero_rounds():
    nodes = [make_node(0, 7)]
    cfg = FmlConfig(K=1, G=1.0, rounds=0, seed=0)
    logs, theta = run_rounds(cfg, nodes, "fml")
    assert logs == []
    assert np.array_equal(theta.to_flat(), nodes[0].theta.to_flat())


def test_single_node_fl_equals_centralized_gd():
    node = make_node(0, 8)
    theta0 = node.theta  # run_rounds overwrites node.theta with broadcasts
    full = LabeledBatch(
        np.vstack([node.train_split.inputs, node.test_split.inputs]),
        np.concatenate([node.train_split.labels, node.test_split.labels]))
    cfg = FmlConfig(K=1, G=1.0, alpha=0.05, rounds=5, seed=0)
    logs, theta = run_rounds(cfg, [node], "fl")
    ref = theta0
    for _ in range(5):
        ref = sgd_step(ref, full, 0.05)
    assert np.allclose(theta.to_flat(), ref.to_flat(), rtol=1e-12)
    assert len(logs) == 5


def test_run_rounds_deterministic():
    def go():
        theta = init_params([4, 5, 4, 1], np.random.default_rng(0))
        nodes = [make_node(i, 20 + i, theta=theta) for i in range(4)]
        cfg = FmlConfig(K=4, G=0.5, alpha=0.05, beta=0.05, rounds=6,
                        p_decode=0.8, seed=3)
        return run_rounds(cfg, nodes, "fml")
    logs_a, theta_a = go()
    logs_b, theta_b = go()
    assert logs_a == logs_b
    assert np.array_equal(theta_a.to_flat(), theta_b.to_flat())


def test_permutation_invariance_of_trajectory():
    theta = init_params([4, 5, 4, 1], np.random.default_rng(0))
    nodes = [make_node(i, 30 + i, theta=theta) for i in range(4)]
    cfg = FmlConfig(K=4, G=1.0, alpha=0.05, beta=0.05, rounds=4, seed=9)
    _, theta_a = run_rounds(cfg, list(nodes), "fml")
    # relabel ids but keep the same node order -> same trajectory
    relabeled = [NodeState(100 + n.id, theta, n.train_split, n.test_split)
                 for n in nodes]
    logs_b, theta_b = run_rounds(cfg, relabeled, "fml")
    assert np.array_equal(theta_a.to_flat(), theta_b.to_flat())
    assert all(i >= 100 for log in logs_b for i in log.scheduled)


def test_empty_rounds_keep_parameters():
    theta = init_params([4, 5, 4, 1], np.random.default_rng(0))
    nodes = [make_node(i, 40 + i, theta=theta) for i in range(2)]
    cfg = FmlConfig(K=2, G=1.0, alpha=0.05, beta=0.05, rounds=3,
                    p_decode=0.0, seed=1)
    logs, out = run_rounds(cfg, nodes, "fml")
    assert np.array_equal(out.to_flat(), theta.to_flat())
    assert all(log.successful == () for log in logs)


def test_run_rounds_validation():
    nodes = [make_node(0, 50)]
    with pytest.raises(ConfigurationError):
        run_rounds(FmlConfig(K=1, G=1.0), nodes, "centralized")
    with pytest.raises(ConfigurationError):
        run_rounds(FmlConfig(K=2, G=1.0), nodes, "fml")
    with pytest.raises(ConfigurationError):
        run_rounds(FmlConfig(K=1, G=1.0), [], "fml")


def test_evaluate_bounds_and_adaptation():
    theta = init_params([4, 5, 4, 1], np.random.default_rng(0))
    nodes = [make_node(i, 60 + i, theta=theta) for i in range(3)]
    acc, adapted = evaluate(theta, nodes, alpha=0.01)
    assert 0.0 <= acc <= 1.0
    assert 0.0 <= adapted <= 1.0


def test_round_log_csv_export(tmp_path):
    logs = [RoundLog(0, (1, 2), (2,), 0.3, 0.5, 0.6),
            RoundLog(1, (0, 2), (0, 2), 0.2, 0.6, 0.7)]
    path = tmp_path / "rounds.csv"
    write_round_logs(path, logs)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["round", "scheduled", "successful", "train_loss",
                       "test_acc", "adapted_acc"]
    assert rows[1][1] == "1;2" and rows[1][2] == "2"
    assert float(rows[2][4]) == 0.6
