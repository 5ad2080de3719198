"""Toy MLP stack: the victims that get hardened, simulated and attacked.

Weights and biases live as binary16 words (the format the accelerator and the
attacker see); analysis arithmetic runs in float64 while an optional flag
evaluates activations with the deployment binary16 tree GEMM.  Networks are
plain linear stacks standing in for the projection/MLP layers of bigger
models; there is no attention or normalization here on purpose.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import fp16
from .formats import MAGIC_MODEL, FORMAT_VERSION, BlobError, seal, unseal

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_GELU = 2
ACT_NAMES = {ACT_IDENTITY: "identity", ACT_RELU: "relu", ACT_GELU: "gelu"}

_GELU_C = math.sqrt(2.0 / math.pi)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LinearLayer:
    """One dense layer: weights (fan_out, fan_in) and bias as uint16 words."""

    weights: np.ndarray
    bias: np.ndarray
    activation: int = ACT_IDENTITY

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.uint16)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.uint16)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a fan_out x fan_in matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal fan_out")
        if self.activation not in ACT_NAMES:
            raise ValueError(f"unknown activation code {self.activation}")

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class ToyNetwork:
    layers: list[LinearLayer]
    class_count: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"layer dims do not compose: {a.fan_out} -> {b.fan_in}")
        if self.layers[-1].fan_out != self.class_count:
            raise ValueError("final fan_out must equal class_count")

    def copy(self) -> "ToyNetwork":
        return ToyNetwork([l.copy() for l in self.layers], self.class_count)


@dataclass
class Batch:
    inputs: np.ndarray   # (B, fan_in) float64
    labels: np.ndarray   # (B,) int64

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("batch shapes inconsistent")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def activation_apply(code: int, x: np.ndarray) -> np.ndarray:
    if code == ACT_IDENTITY:
        return x
    if code == ACT_RELU:
        return np.maximum(x, 0.0)
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def activation_grad(code: int, x: np.ndarray) -> np.ndarray:
    if code == ACT_IDENTITY:
        return np.ones_like(x)
    if code == ACT_RELU:
        return (x > 0.0).astype(np.float64)
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)


@dataclass
class ForwardTrace:
    layer_inputs: list[np.ndarray]   # float64 input seen by each layer
    pre_acts: list[np.ndarray]       # float64 pre-activation of each layer
    logits: np.ndarray               # (B, class_count) float64


def forward(net: ToyNetwork, inputs: np.ndarray, fp16_activations: bool = False) -> ForwardTrace:
    """Run the network, keeping per-layer activations for sensitivity analysis.

    Weights are always decoded from their binary16 words.  With
    ``fp16_activations`` the layer arithmetic is the deployment tree GEMM in
    binary16; otherwise everything past the decode is float64.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layers[0].fan_in:
        raise ValueError(f"input shape {x.shape} does not match fan_in {net.layers[0].fan_in}")
    layer_inputs, pre_acts = [], []
    if fp16_activations:
        xb = fp16.encode_array(x)
        for layer in net.layers:
            layer_inputs.append(fp16.decode_array(xb))
            yb = fp16.linear_fp16(xb, layer.weights, layer.bias)
            y = fp16.decode_array(yb)
            pre_acts.append(y)
            if layer.activation == ACT_RELU:
                yb = np.where(fp16.decode_array(yb) > 0, yb, np.uint16(0)).astype(np.uint16)
            elif layer.activation == ACT_GELU:
                yb = fp16.encode_array(activation_apply(ACT_GELU, y))
            xb = yb
        return ForwardTrace(layer_inputs, pre_acts, fp16.decode_array(xb))
    # flipped weights can be inf/NaN; IEEE propagation is the defined behaviour
    with np.errstate(invalid="ignore", over="ignore"):
        for layer in net.layers:
            layer_inputs.append(x)
            y = x @ fp16.decode_array(layer.weights).T + fp16.decode_array(layer.bias)
            pre_acts.append(y)
            x = activation_apply(layer.activation, y)
    return ForwardTrace(layer_inputs, pre_acts, x)


def softmax(logits: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    p = softmax(logits)
    eps = np.finfo(np.float64).tiny
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels] + eps)))


def accuracy(net: ToyNetwork, batch: Batch, **kw) -> float:
    trace = forward(net, batch.inputs, **kw)
    return float(np.mean(trace.logits.argmax(axis=1) == batch.labels))


@dataclass
class LayerStats:
    """Per-layer sensitivity statistics from one analysis batch."""

    grad: np.ndarray           # d(mean loss)/dW, (fan_out, fan_in)
    grad_abs_mean: np.ndarray  # mean over samples of |per-sample dL/dW|
    input_abs_mean: np.ndarray # mean |activation| per input lane (deadness)
    bias_grad: np.ndarray


@dataclass
class GradReport:
    loss: float
    accuracy: float
    layers: list[LayerStats]


def loss_and_gradients(net: ToyNetwork, batch: Batch) -> GradReport:
    """Mean cross-entropy with full per-weight gradients, in float64.

    Also returns, per layer, the mean absolute per-sample gradient (saliency
    material) and the mean absolute input activation per lane (the deadness
    statistic): for a linear layer the per-sample gradient factorizes as
    delta_r * x_l, so mean|grad| is exactly (|delta|^T |x|) / B.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.labels.min() < 0 or batch.labels.max() >= net.class_count:
        raise ValueError("label outside class range")
    trace = forward(net, batch.inputs)
    n = len(batch)
    probs = softmax(trace.logits)
    loss = cross_entropy(trace.logits, batch.labels)
    acc = float(np.mean(trace.logits.argmax(axis=1) == batch.labels))

    delta = probs.copy()
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n  # gradient of the mean loss at the logits
    stats: list[LayerStats] = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        x = trace.layer_inputs[i]
        stats[i] = LayerStats(
            grad=delta.T @ x,
            grad_abs_mean=np.abs(delta).T @ np.abs(x),
            input_abs_mean=np.mean(np.abs(x), axis=0),
            bias_grad=delta.sum(axis=0),
        )
        if i:
            w = fp16.decode_array(layer.weights)
            delta = (delta @ w) * activation_grad(net.layers[i - 1].activation,
                                                  trace.pre_acts[i - 1])
    return GradReport(loss, acc, stats)


def init_network(dims: list[int], activations: list[int] | None = None,
                 seed: int = 0) -> ToyNetwork:
    """Seeded Gaussian init scaled by 1/sqrt(fan_in), quantized to binary16."""
    rng = np.random.default_rng(seed)
    acts = activations or [ACT_RELU] * (len(dims) - 2) + [ACT_IDENTITY]
    layers = []
    for i, act in zip(range(len(dims) - 1), acts):
        w = rng.normal(0.0, 1.0 / math.sqrt(dims[i]), size=(dims[i + 1], dims[i]))
        layers.append(LinearLayer(fp16.encode_array(w),
                                  fp16.encode_array(np.zeros(dims[i + 1])), act))
    return ToyNetwork(layers, dims[-1])


def train_toy(net: ToyNetwork, batch: Batch, epochs: int, learning_rate: float,
              minibatch: int | None = None, seed: int = 0) -> ToyNetwork:
    """Gradient descent in float64 master weights, re-quantized to binary16.

    Full-batch by default; pass ``minibatch`` for shuffled mini-batches.
    Raises TrainingDiverged when the loss goes NaN.
    """
    if epochs == 0:
        return net.copy()
    work = net.copy()
    masters = [(fp16.decode_array(l.weights), fp16.decode_array(l.bias)) for l in work.layers]
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        if minibatch:
            order = rng.permutation(len(batch))
            slices = [order[i:i + minibatch] for i in range(0, len(batch), minibatch)]
        else:
            slices = [slice(None)]
        for sl in slices:
            sub = Batch(batch.inputs[sl], batch.labels[sl])
            report = loss_and_gradients(work, sub)
            if math.isnan(report.loss):
                raise TrainingDiverged("loss became NaN")
            for (w, b), st, layer in zip(masters, report.layers, work.layers):
                w -= learning_rate * st.grad
                b -= learning_rate * st.bias_grad
                layer.weights = fp16.encode_array(w)
                layer.bias = fp16.encode_array(b)
    return work


@dataclass
class TaskSpec:
    """Synthetic Gaussian-clusters classification task."""

    classes: int = 3
    dim: int = 16
    dead_dims: int = 6          # trailing lanes carrying near-zero noise
    train_per_class: int = 200
    attack_per_class: int = 64
    separation: float = 8.0     # min distance between class means, in sigmas
    dead_scale: float = 1e-4
    seed: int = 2024


@dataclass
class Dataset:
    train: Batch
    attack: Batch               # held-out split used by the attack harness
    means: np.ndarray


def _class_means(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    live = spec.dim - spec.dead_dims
    while True:
        m = rng.normal(0.0, 1.0, size=(spec.classes, live))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        m *= spec.separation
        d = np.linalg.norm(m[:, None] - m[None, :], axis=2)
        if spec.classes == 1 or d[~np.eye(spec.classes, dtype=bool)].min() >= spec.separation:
            means = np.zeros((spec.classes, spec.dim))
            means[:, :live] = m
            return means


def synth_dataset(spec: TaskSpec) -> Dataset:
    """Deterministic Gaussian clusters; trailing dead lanes stay near zero."""
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    live = spec.dim - spec.dead_dims

    def draw(per_class: int) -> Batch:
        xs, ys = [], []
        for c in range(spec.classes):
            x = rng.normal(0.0, 1.0, size=(per_class, spec.dim))
            x[:, live:] *= spec.dead_scale
            x[:, :live] += means[c, :live]
            xs.append(x)
            ys.append(np.full(per_class, c))
        if not xs or per_class == 0:
            return Batch(np.zeros((0, spec.dim)), np.zeros(0, np.int64))
        return Batch(np.concatenate(xs), np.concatenate(ys))

    return Dataset(draw(spec.train_per_class), draw(spec.attack_per_class), means)


BUNDLED_TASKS = {
    "clusters3": TaskSpec(),
    "clusters2": TaskSpec(classes=2, dim=16, dead_dims=5, separation=7.0, seed=77),
}


def bundled_model(task: str = "clusters3", hidden: int = 16, epochs: int = 150,
                  learning_rate: float = 0.5, seed: int = 0) -> tuple[ToyNetwork, Dataset]:
    """Train the canonical victim for a bundled task; deterministic per seed."""
    spec = BUNDLED_TASKS[task]
    data = synth_dataset(spec)
    net = init_network([spec.dim, hidden, spec.classes], seed=seed)
    return train_toy(net, data.train, epochs, learning_rate), data


# --- model file format ------------------------------------------------------

def save_model(net: ToyNetwork) -> bytes:
    body = bytearray(MAGIC_MODEL)
    body += struct.pack("<BH", FORMAT_VERSION, len(net.layers))
    for layer in net.layers:
        body += struct.pack("<IIB", layer.fan_in, layer.fan_out, layer.activation)
        body += layer.weights.astype("<u2").tobytes()
        body += layer.bias.astype("<u2").tobytes()
    return seal(bytes(body))


def load_model(blob: bytes) -> ToyNetwork:
    body = unseal(blob, MAGIC_MODEL)
    (layer_count,) = struct.unpack_from("<H", body, 0)
    off = 2
    layers = []
    for _ in range(layer_count):
        if off + 9 > len(body):
            raise BlobError("truncated", "layer header")
        fan_in, fan_out, act = struct.unpack_from("<IIB", body, off)
        off += 9
        nb_w, nb_b = fan_out * fan_in * 2, fan_out * 2
        if off + nb_w + nb_b > len(body):
            raise BlobError("truncated", "layer payload")
        w = np.frombuffer(body, "<u2", count=fan_out * fan_in, offset=off).reshape(fan_out, fan_in)
        off += nb_w
        b = np.frombuffer(body, "<u2", count=fan_out, offset=off)
        off += nb_b
        if act not in ACT_NAMES:
            raise BlobError("index", f"activation code {act}")
        layers.append(LinearLayer(w.copy(), b.copy(), act))
    if off != len(body):
        raise BlobError("count", "trailing bytes after last layer")
    try:
        return ToyNetwork(layers, layers[-1].fan_out if layers else 0)
    except ValueError as e:
        raise BlobError("index", str(e))
