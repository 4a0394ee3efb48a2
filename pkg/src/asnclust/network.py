"""Dense feed-forward networks trained with plain SGD.

Supports per-layer freezing and a canonical flattening of the trainable
parameters; the flattened difference before/after local training is the
update vector that federated clients exchange. Networks are treated as
immutable snapshots: every training step returns a new network and never
touches frozen arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "relu", "sigmoid")
LOSSES = ("mse", "softmax_ce")
CHECKPOINT_VERSION = 1


def _activate(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _activate_deriv(name, z):
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 - s)
    raise ValueError(f"unknown activation {name!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"
    frozen: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("layer weights must be a 2-D (out, in) matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must match the weight row count")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "Layer":
        return Layer(self.weights.copy(), self.bias.copy(), self.activation, self.frozen)


class DenseNetwork:
    """Ordered dense layers; `bottleneck` marks the adaptation layer."""

    def __init__(self, layers, bottleneck: int | None = None):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_size != nxt.in_size:
                raise ValueError(
                    f"layer sizes do not chain: {prev.out_size} -> {nxt.in_size}"
                )
        if bottleneck is not None and not 0 <= bottleneck < len(layers):
            raise ValueError(f"bottleneck index {bottleneck} out of range")
        self.layers = layers
        self.bottleneck = bottleneck

    @property
    def input_size(self) -> int:
        return self.layers[0].in_size

    @property
    def output_size(self) -> int:
        return self.layers[-1].out_size

    @property
    def total_parameter_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    @property
    def trainable_parameter_count(self) -> int:
        return sum(layer.param_count for layer in self.layers if not layer.frozen)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([layer.copy() for layer in self.layers], self.bottleneck)

    def __repr__(self):
        widths = [self.input_size] + [layer.out_size for layer in self.layers]
        return f"DenseNetwork({'->'.join(map(str, widths))}, bottleneck={self.bottleneck})"


def forward(net: DenseNetwork, x) -> np.ndarray:
    """Affine + activation composition for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_size,):
        raise ValueError(f"expected input of shape ({net.input_size},), got {x.shape}")
    return forward_batch(net, x[None, :])[0]


def forward_batch(net: DenseNetwork, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_size:
        raise ValueError(f"expected (batch, {net.input_size}) inputs, got {X.shape}")
    a = X
    for layer in net.layers:
        a = _activate(layer.activation, a @ layer.weights.T + layer.bias)
    return a


def mse_loss(y, y_hat) -> float:
    """Mean of squared differences between two equal-length vectors."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.mean((y - y_hat) ** 2))


def loss_and_gradients(net: DenseNetwork, X, T, loss: str = "mse"):
    """Mean batch loss and its gradients for every unfrozen layer.

    For "mse" the targets T are output-sized rows; the per-sample loss is
    the mean squared error over output components. For "softmax_ce" the
    targets are integer class labels and the output layer must be linear.
    Returns (loss_value, grads) with grads[i] = (dW, db) or None for
    frozen layers.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    X = np.asarray(X, dtype=np.float64)
    batch = X.shape[0]
    pre = []  # pre-activations per layer
    acts = [X]
    a = X
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        pre.append(z)
        a = _activate(layer.activation, z)
        acts.append(a)

    out_layer = net.layers[-1]
    if loss == "mse":
        T = np.asarray(T, dtype=np.float64)
        diff = acts[-1] - T
        value = float(np.mean(np.mean(diff**2, axis=1)))
        # d(mean loss)/d(pre-activation of the top layer)
        delta = (2.0 * diff / diff.shape[1] / batch) * _activate_deriv(
            out_layer.activation, pre[-1]
        )
    else:
        labels = np.asarray(T, dtype=np.intp)
        if out_layer.activation != "linear":
            raise ValueError("softmax_ce expects a linear output layer")
        probs = softmax(pre[-1])
        value = float(np.mean(-np.log(probs[np.arange(batch), labels] + 1e-300)))
        delta = probs.copy()
        delta[np.arange(batch), labels] -= 1.0
        delta /= batch

    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if not layer.frozen:
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ layer.weights) * _activate_deriv(
                net.layers[i - 1].activation, pre[i - 1]
            )
    return value, grads


def _as_batch_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2:
        return np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1])
    if not batch:
        raise ValueError("batch must be nonempty")
    xs, ts = zip(*batch)
    return np.asarray(xs, dtype=np.float64), np.asarray(ts)


def sgd_step(net: DenseNetwork, batch, lr: float, loss: str = "mse") -> DenseNetwork:
    """One SGD step on the mean batch loss; frozen layers are untouched.

    `batch` is either a list of (input, target) pairs or a (X, T) tuple of
    stacked arrays.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    X, T = _as_batch_arrays(batch)
    _, grads = loss_and_gradients(net, X, T, loss)
    new_layers = []
    for layer, grad in zip(net.layers, grads):
        if grad is None:
            new_layers.append(layer)  # frozen: reuse arrays bit-for-bit
        else:
            dW, db = grad
            new_layers.append(
                Layer(layer.weights - lr * dW, layer.bias - lr * db, layer.activation, False)
            )
    return DenseNetwork(new_layers, net.bottleneck)


def flatten_trainable(net: DenseNetwork) -> np.ndarray:
    """Unfrozen parameters as one vector: layer order, row-major W, then bias."""
    parts = []
    for layer in net.layers:
        if not layer.frozen:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias)
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unflatten_trainable(net: DenseNetwork, flat) -> DenseNetwork:
    """Inverse of flatten_trainable; frozen layers are carried over unchanged."""
    flat = np.asarray(flat, dtype=np.float64).ravel()
    expected = net.trainable_parameter_count
    if flat.size != expected:
        raise ValueError(f"expected {expected} trainable values, got {flat.size}")
    new_layers = []
    offset = 0
    for layer in net.layers:
        if layer.frozen:
            new_layers.append(layer)
            continue
        w_size = layer.weights.size
        weights = flat[offset : offset + w_size].reshape(layer.weights.shape).copy()
        offset += w_size
        bias = flat[offset : offset + layer.bias.size].copy()
        offset += layer.bias.size
        new_layers.append(Layer(weights, bias, layer.activation, False))
    return DenseNetwork(new_layers, net.bottleneck)


def glorot_uniform(out_size: int, in_size: int, rng) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_size + out_size))
    return rng.uniform(-bound, bound, size=(out_size, in_size))


def build_dense(widths, activations, seed=0, bottleneck=None) -> DenseNetwork:
    """Network from layer widths; biases start at zero, weights Glorot-uniform."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    if len(activations) != len(widths) - 1:
        raise ValueError("need one activation per weight layer")
    rng = np.random.default_rng(seed)
    layers = []
    for i, act in enumerate(activations):
        layers.append(
            Layer(glorot_uniform(widths[i + 1], widths[i], rng), np.zeros(widths[i + 1]), act)
        )
    return DenseNetwork(layers, bottleneck)


@dataclass(frozen=True)
class AutoencoderConfig:
    """Light-weight symmetric autoencoder over per-frame LMBE vectors."""

    widths: tuple = (128, 20, 8, 4, 8, 20, 128)
    bottleneck: int | None = None  # weight-layer index; None picks the narrowest
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    seed: int = 0


def build_autoencoder(config: AutoencoderConfig = AutoencoderConfig()) -> DenseNetwork:
    """Autoencoder with all layers trainable and the bottleneck layer marked.

    The bottleneck defaults to the weight layer producing the narrowest
    internal width; only that layer stays trainable during federated
    adaptation (see prepare_adaptation_model).
    """
    widths = config.widths
    if len(widths) < 3:
        raise ValueError("autoencoder needs at least one hidden width")
    if widths[0] != widths[-1]:
        raise ValueError("autoencoder input and output widths must match")
    acts = [config.hidden_activation] * (len(widths) - 2) + [config.output_activation]
    if config.bottleneck is None:
        internal = widths[1:-1]
        bottleneck = int(np.argmin(internal))  # weight layer feeding that width
    else:
        bottleneck = config.bottleneck
    return build_dense(widths, acts, seed=config.seed, bottleneck=bottleneck)


def prepare_adaptation_model(net: DenseNetwork, seed) -> DenseNetwork:
    """Freeze everything except the bottleneck layer and re-initialize it.

    This is the per-cluster starting model for federated adaptation: the
    pre-trained feature layers stay fixed while the bottleneck restarts
    from fresh Glorot-uniform weights and zero bias.
    """
    if net.bottleneck is None:
        raise ValueError("network has no designated bottleneck layer")
    rng = np.random.default_rng(seed)
    layers = []
    for i, layer in enumerate(net.layers):
        if i == net.bottleneck:
            layers.append(
                Layer(
                    glorot_uniform(layer.out_size, layer.in_size, rng),
                    np.zeros(layer.out_size),
                    layer.activation,
                    frozen=False,
                )
            )
        else:
            layers.append(Layer(layer.weights, layer.bias, layer.activation, frozen=True))
    return DenseNetwork(layers, net.bottleneck)


def pretrain(
    net: DenseNetwork,
    dataset,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
):
    """Shuffled mini-batch SGD on self-reconstruction for `epochs` passes.

    Returns (trained_net, per_epoch_losses). epochs=0 returns the input
    network unchanged with an empty loss history.
    """
    X = np.asarray(dataset, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("pretraining dataset must be a nonempty (frames, dim) array")
    if X.shape[1] != net.input_size:
        raise ValueError(f"dataset dim {X.shape[1]} does not match input {net.input_size}")
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(int(epochs)):
        order = rng.permutation(X.shape[0])
        epoch_loss = 0.0
        for start in range(0, X.shape[0], batch_size):
            idx = order[start : start + batch_size]
            value, grads = loss_and_gradients(net, X[idx], X[idx], "mse")
            epoch_loss += value * idx.size
            new_layers = []
            for layer, grad in zip(net.layers, grads):
                if grad is None:
                    new_layers.append(layer)
                else:
                    dW, db = grad
                    new_layers.append(
                        Layer(
                            layer.weights - lr * dW,
                            layer.bias - lr * db,
                            layer.activation,
                            False,
                        )
                    )
            net = DenseNetwork(new_layers, net.bottleneck)
        losses.append(epoch_loss / X.shape[0])
    return net, losses


def save_checkpoint(net: DenseNetwork, path, extra: dict | None = None) -> None:
    """Serialize a network to .npz; parameters round-trip bit-for-bit."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "activations": [layer.activation for layer in net.layers],
        "frozen": [bool(layer.frozen) for layer in net.layers],
        "bottleneck": net.bottleneck,
        "extra": extra or {},
    }
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"w{i}"] = layer.weights
        arrays[f"b{i}"] = layer.bias
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Load a network written by save_checkpoint; returns (net, extra)."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        layers = []
        for i, (act, frozen) in enumerate(zip(meta["activations"], meta["frozen"])):
            layers.append(Layer(data[f"w{i}"], data[f"b{i}"], act, frozen))
    return DenseNetwork(layers, meta["bottleneck"]), meta["extra"]
