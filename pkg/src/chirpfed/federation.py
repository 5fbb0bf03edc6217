"""Federated meta-learning rounds with random scheduling.

Each communication round: broadcast the global parameters, run T0 local
MAML (or FedAvg) steps per node, uniformly schedule N of K nodes, mark each
scheduled node's upload successful with probability p_decode, and aggregate
the successful updates weighted by local data size (weights renormalized
over the successful set so the aggregate stays a convex combination).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import receiver
from .errors import ConfigurationError, EmptyRoundError, TrainingError
from .receiver import LabeledBatch, MlpParams


@dataclass(frozen=True)
class FmlConfig:
    K: int = 33
    G: float = 0.3
    alpha: float = 0.001
    beta: float = 0.0001
    T0: int = 1
    rounds: int = 50
    p_decode: float = 1.0
    seed: int = 0
    mode: str = "exact"  # meta-gradient mode: exact | first_order

    def __post_init__(self):
        if not 0 < self.G <= 1:
            raise ConfigurationError("scheduling ratio G must be in (0, 1]")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0 <= self.p_decode <= 1:
            raise ConfigurationError("p_decode must be a probability")
        if self.T0 < 1 or self.rounds < 0 or self.K < 1:
            raise ConfigurationError("K >= 1, T0 >= 1 and rounds >= 0 required")
        if self.N < 1:
            raise ConfigurationError(f"N = round(G*K) = {self.N} must be >= 1")
        if self.mode not in ("exact", "first_order"):
            raise ConfigurationError(f"unknown meta-gradient mode {self.mode!r}")

    @property
    def N(self) -> int:
        return int(round(self.G * self.K))


@dataclass
class NodeState:
    """One buoy node: parameters plus its disjoint train/test splits."""

    id: int
    theta: MlpParams
    train_split: LabeledBatch
    test_split: LabeledBatch

    @property
    def data_size(self) -> int:
        return len(self.train_split) + len(self.test_split)


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    scheduled: tuple
    successful: tuple
    train_loss: float
    test_acc: float
    adapted_acc: float

    def __post_init__(self):
        if not set(self.successful) <= set(self.scheduled):
            raise ConfigurationError("successful ids must be a subset of scheduled")


def maml_update(theta: np.ndarray, grad_train, hvp_train, grad_test, alpha: float,
                beta: float, T0: int, mode: str = "exact") -> np.ndarray:
    """Generic MAML local update on a flat parameter vector.

    grad_train(theta) and grad_test(theta) return gradients of the train and
    test losses; hvp_train(theta, v) the train-loss Hessian-vector product.
    Exact mode applies the full meta-gradient (I - alpha*H)*grad_test(phi).
    """
    for step in range(T0):
        g_tr = grad_train(theta)
        phi = theta - alpha * g_tr
        g_te = grad_test(phi)
        if mode == "exact":
            meta = g_te - alpha * hvp_train(theta, g_te)
        else:
            meta = g_te
        theta = theta - beta * meta
        if not np.all(np.isfinite(theta)):
            raise TrainingError("local MAML update diverged", step_index=step)
    return theta


def local_maml_step(node: NodeState, alpha: float, beta: float, T0: int,
                    mode: str = "exact") -> MlpParams:
    """T0 MAML steps on the node's own splits; returns new parameters."""
    if len(node.train_split) == 0 or len(node.test_split) == 0:
        raise ConfigurationError("both data splits must be nonempty")
    p0 = node.theta
    theta = maml_update(
        p0.to_flat(),
        grad_train=lambda th: receiver.grad(p0.from_flat(th), node.train_split),
        hvp_train=lambda th, v: receiver.hvp(p0.from_flat(th), node.train_split, v),
        grad_test=lambda th: receiver.grad(p0.from_flat(th), node.test_split),
        alpha=alpha, beta=beta, T0=T0, mode=mode)
    return p0.from_flat(theta)


def local_fedavg_step(node: NodeState, lr: float, T0: int) -> MlpParams:
    """T0 full-batch gradient steps on the node's local data."""
    if len(node.train_split) == 0:
        raise ConfigurationError("train split must be nonempty")
    full = LabeledBatch(
        np.vstack([node.train_split.inputs, node.test_split.inputs]),
        np.concatenate([node.train_split.labels, node.test_split.labels]))
    theta = node.theta.to_flat()
    for step in range(T0):
        theta = theta - lr * receiver.grad(node.theta.from_flat(theta), full)
        if not np.all(np.isfinite(theta)):
            raise TrainingError("local FedAvg update diverged", step_index=step)
    return node.theta.from_flat(theta)


def schedule(K: int, N: int, p_decode: float, rng):
    """Uniform N-of-K selection plus independent Bernoulli decode successes.

    Returns (scheduled ids as a sorted tuple, {id: u_i} over all K nodes).
    """
    if not 1 <= N <= K:
        raise ConfigurationError(f"need 1 <= N <= K, got N={N}, K={K}")
    chosen = rng.choice(K, size=N, replace=False)
    scheduled = tuple(sorted(int(i) for i in chosen))
    u = {i: 0 for i in range(K)}
    for i in scheduled:
        u[i] = 1 if rng.random() < p_decode else 0
    return scheduled, u


def aggregate(updates) -> np.ndarray:
    """Data-size-weighted mean over successful updates.

    `updates` is a list of (flat_params, data_size, u); entries with u == 0
    are excluded and the weights renormalized over the rest.
    """
    live = [(theta, size) for theta, size, u in updates if u]
    if not live:
        raise EmptyRoundError("no update decoded successfully this round")
    total = sum(size for _, size in live)
    acc = np.zeros_like(live[0][0])
    for theta, size in live:
        acc += (size / total) * np.asarray(theta)
    return acc


def evaluate(theta: MlpParams, nodes, alpha: float):
    """(weighted test accuracy, weighted one-step-adapted test accuracy)."""
    total = sum(n.data_size for n in nodes)
    acc = 0.0
    adapted = 0.0
    for node in nodes:
        w = node.data_size / total
        acc += w * (1.0 - receiver.ber_eval(theta, node.test_split))
        phi = theta.from_flat(
            theta.to_flat() - alpha * receiver.grad(theta, node.train_split))
        adapted += w * (1.0 - receiver.ber_eval(phi, node.test_split))
    return acc, adapted


def run_rounds(cfg: FmlConfig, nodes, mode: str = "fml"):
    """Execute cfg.rounds communication rounds; returns (logs, final params).

    mode 'fml' runs MAML local steps, 'fl' runs the FedAvg baseline with the
    inner rate alpha as its local learning rate.
    """
    if mode not in ("fml", "fl"):
        raise ConfigurationError(f"mode must be 'fml' or 'fl', got {mode!r}")
    if not nodes:
        raise ConfigurationError("node list is empty")
    if len(nodes) != cfg.K:
        raise ConfigurationError(f"config says K={cfg.K} but got {len(nodes)} nodes")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5C4ED]))
    theta = nodes[0].theta
    logs = []
    for t in range(cfg.rounds):
        updates = []
        losses = []
        for node in nodes:
            node.theta = theta
            losses.append(receiver.loss(theta, node.train_split))
            try:
                if mode == "fml":
                    new = local_maml_step(node, cfg.alpha, cfg.beta, cfg.T0, cfg.mode)
                else:
                    new = local_fedavg_step(node, cfg.alpha, cfg.T0)
            except TrainingError as exc:
                raise TrainingError(str(exc), round_index=t) from exc
            updates.append(new)
        # schedule() draws positions into the node list; logs carry node ids
        positions, u = schedule(cfg.K, cfg.N, cfg.p_decode, rng)
        scheduled = tuple(nodes[pos].id for pos in positions)
        successful = tuple(nodes[pos].id for pos in positions if u[pos])
        try:
            flat = aggregate([(updates[i].to_flat(), nodes[i].data_size, u[i])
                              for i in range(len(nodes))])
            theta = theta.from_flat(flat)
        except EmptyRoundError:
            pass  # keep previous global parameters
        test_acc, adapted_acc = evaluate(theta, nodes, cfg.alpha)
        logs.append(RoundLog(t, scheduled, successful,
                             float(np.mean(losses)), test_acc, adapted_acc))
    return logs, theta


def write_round_logs(path, logs) -> None:
    """CSV export: ids are semicolon-separated within their columns."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "scheduled", "successful",
                         "train_loss", "test_acc", "adapted_acc"])
        for log in logs:
            writer.writerow([
                log.round_index,
                ";".join(str(i) for i in log.scheduled),
                ";".join(str(i) for i in log.successful),
                f"{log.train_loss:.10g}",
                f"{log.test_acc:.10g}",
                f"{log.adapted_acc:.10g}",
            ])
