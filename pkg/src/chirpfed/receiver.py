"""Fully connected bit-detection network with exact backprop and HVP.

Architecture is fixed at four layers: input N1, two ReLU hidden layers and a
single sigmoid output neuron.  All arithmetic is float64 so the
finite-difference checks in the test suite are meaningful.  The
Hessian-vector product is computed exactly with forward-over-reverse
differentiation (Pearlmutter's R-operator); the distributional second
derivative of ReLU at its kink is taken as zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError, ParseError

CHECKPOINT_MAGIC = b"CDNN"
CHECKPOINT_VERSION = 1


def default_hidden(n1: int) -> tuple[int, int]:
    """h1 = N1, h2 = floor(7*N1/8)."""
    return n1, (7 * n1) // 8


@dataclass(frozen=True)
class MlpParams:
    """Per-layer weight matrices (out, in) and bias vectors.

    The canonical flat ordering is layer-major: W1, b1, W2, b2, W3, b3.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ConfigurationError("expected exactly three computing layers")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.size:
                raise ConfigurationError("weight/bias shape mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError("parameters contain non-finite values")
        for prev, nxt in zip(self.weights[:-1], self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ConfigurationError("consecutive layer dimensions incompatible")
        if self.weights[2].shape[0] != 1:
            raise ConfigurationError("output layer must have exactly one neuron")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def from_flat(self, flat: np.ndarray) -> "MlpParams":
        """New parameters with the same shapes, values taken from `flat`."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise InputError(f"expected {self.n_params} values, got {flat.size}")
        weights, biases, off = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[off: off + w.size].reshape(w.shape).copy())
            off += w.size
            biases.append(flat[off: off + b.size].copy())
            off += b.size
        return MlpParams(tuple(weights), tuple(biases))


@dataclass(frozen=True)
class LabeledBatch:
    """Rows of received-symbol samples with their transmitted bits."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.size:
            raise InputError("inputs must be (n, N1) with one label per row")
        if not np.all(np.isfinite(inputs)):
            raise InputError("inputs contain non-finite values")
        if not np.all((labels == 0) | (labels == 1)):
            raise InputError("labels must be bits")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size


def init_params(layer_sizes, rng) -> MlpParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    if len(layer_sizes) != 4 or layer_sizes[-1] != 1:
        raise ConfigurationError(f"layer_sizes must be [N1, h1, h2, 1], got {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_pass(p: MlpParams, x: np.ndarray):
    """All intermediate activations for a (B, N1) batch."""
    w1, w2, w3 = p.weights
    b1, b2, b3 = p.biases
    z1 = x @ w1.T + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2.T + b2
    a2 = np.maximum(z2, 0.0)
    z3 = (a2 @ w3.T + b3)[:, 0]
    out = _sigmoid(z3)
    return z1, a1, z2, a2, z3, out


def forward_batch(p: MlpParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != p.layer_sizes[0]:
        raise InputError(
            f"expected (n, {p.layer_sizes[0]}) inputs, got shape {inputs.shape}")
    return _forward_pass(p, inputs)[-1]


def forward(p: MlpParams, x) -> float:
    """Network output in (0, 1) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != p.layer_sizes[0]:
        raise InputError(f"expected input of length {p.layer_sizes[0]}, got {x.shape}")
    return float(forward_batch(p, x[None, :])[0])


def loss(p: MlpParams, batch: LabeledBatch) -> float:
    """Mean squared error between label bits and network outputs."""
    if len(batch) == 0:
        raise InputError("batch is empty")
    out = forward_batch(p, batch.inputs)
    return float(np.mean((batch.labels - out) ** 2))


def grad(p: MlpParams, batch: LabeledBatch) -> np.ndarray:
    """Exact loss gradient in the canonical flat ordering."""
    if len(batch) == 0:
        raise InputError("batch is empty")
    x, y = batch.inputs, batch.labels
    w1, w2, w3 = p.weights
    z1, a1, z2, a2, z3, out = _forward_pass(p, x)
    n = y.size
    d_out = 2.0 * (out - y) / n
    d3 = d_out * out * (1.0 - out)
    g_w3 = d3[None, :] @ a2
    g_b3 = np.array([d3.sum()])
    d2 = (d3[:, None] * w3) * (z2 > 0)
    g_w2 = d2.T @ a1
    g_b2 = d2.sum(axis=0)
    d1 = (d2 @ w2) * (z1 > 0)
    g_w1 = d1.T @ x
    g_b1 = d1.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2,
                           g_w3.ravel(), g_b3])


def hvp(p: MlpParams, batch: LabeledBatch, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product via the R-operator."""
    if len(batch) == 0:
        raise InputError("batch is empty")
    v = np.asarray(v, dtype=np.float64)
    if v.size != p.n_params:
        raise InputError(f"tangent has {v.size} entries, expected {p.n_params}")
    vp = p.from_flat(v)
    v1, v2, v3 = vp.weights
    c1, c2, c3 = vp.biases
    x, y = batch.inputs, batch.labels
    w1, w2, w3 = p.weights
    z1, a1, z2, a2, z3, out = _forward_pass(p, x)
    m1 = (z1 > 0).astype(np.float64)
    m2 = (z2 > 0).astype(np.float64)
    n = y.size

    # forward tangent sweep
    rz1 = x @ v1.T + c1
    ra1 = m1 * rz1
    rz2 = a1 @ v2.T + ra1 @ w2.T + c2
    ra2 = m2 * rz2
    rz3 = (a2 @ v3.T + ra2 @ w3.T + c3)[:, 0]
    sp = out * (1.0 - out)                    # sigmoid'
    r_out = sp * rz3

    # reverse sweep with tangents
    d_out = 2.0 * (out - y) / n
    r_d_out = 2.0 * r_out / n
    d3 = d_out * sp
    r_d3 = r_d_out * sp + d_out * sp * (1.0 - 2.0 * out) * rz3
    d2 = (d3[:, None] * w3) * m2
    r_d2 = (d3[:, None] * v3 + r_d3[:, None] * w3) * m2
    d1 = (d2 @ w2) * m1
    r_d1 = (d2 @ v2 + r_d2 @ w2) * m1

    rg_w3 = r_d3[None, :] @ a2 + d3[None, :] @ ra2
    rg_b3 = np.array([r_d3.sum()])
    rg_w2 = r_d2.T @ a1 + d2.T @ ra1
    rg_b2 = r_d2.sum(axis=0)
    rg_w1 = r_d1.T @ x
    rg_b1 = r_d1.sum(axis=0)
    return np.concatenate([rg_w1.ravel(), rg_b1, rg_w2.ravel(), rg_b2,
                           rg_w3.ravel(), rg_b3])


def detect(p: MlpParams, x) -> int:
    """Threshold the network output at 0.5 (ties decide 1)."""
    return int(forward(p, x) >= 0.5)


def detect_batch(p: MlpParams, inputs: np.ndarray) -> np.ndarray:
    return (forward_batch(p, inputs) >= 0.5).astype(np.uint8)


def ber_eval(p: MlpParams, batch: LabeledBatch) -> float:
    """Fraction of rows where detect() disagrees with the label."""
    if len(batch) == 0:
        raise InputError("batch is empty")
    pred = detect_batch(p, batch.inputs)
    return float(np.mean(pred != batch.labels))


def sgd_step(p: MlpParams, batch: LabeledBatch, lr: float) -> MlpParams:
    return p.from_flat(p.to_flat() - lr * grad(p, batch))


def train(p: MlpParams, batch: LabeledBatch, epochs: int, lr: float,
          batch_size: int, rng, adam: bool = True) -> MlpParams:
    """Minibatch training loop; Adam by default, plain SGD otherwise."""
    theta = p.to_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    n = len(batch)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start: start + batch_size]
            mb = LabeledBatch(batch.inputs[sel], batch.labels[sel])
            g = grad(p.from_flat(theta), mb)
            if adam:
                t += 1
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                mh = m / (1 - b1 ** t)
                vh = v / (1 - b2 ** t)
                theta = theta - lr * mh / (np.sqrt(vh) + eps)
            else:
                theta = theta - lr * g
    return p.from_flat(theta)


def save_params(path, p: MlpParams) -> None:
    """Checkpoint: magic, u16 version, u8 layer count, u32 sizes, f64 data."""
    sizes = p.layer_sizes
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHB", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        f.write(p.to_flat().astype("<f8").tobytes())


def load_params(path) -> MlpParams:
    with open(path, "rb") as f:
        raw = f.read()
    head = struct.calcsize("<4sHB")
    if len(raw) < head:
        raise ParseError("truncated checkpoint header", offset=len(raw))
    magic, version, n_layers = struct.unpack_from("<4sHB", raw)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported version {version}", offset=4)
    off = head
    try:
        sizes = struct.unpack_from(f"<{n_layers}I", raw, off)
    except struct.error:
        raise ParseError("truncated layer-size table", offset=off) from None
    off += 4 * n_layers
    n_params = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if len(raw) < off + 8 * n_params:
        raise ParseError("truncated parameter payload", offset=len(raw))
    flat = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off)
    rng = np.random.default_rng(0)
    template = init_params(list(sizes), rng)
    return template.from_flat(flat)
