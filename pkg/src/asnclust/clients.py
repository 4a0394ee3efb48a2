"""Client-side logic: local model adaptation on private features.

Feature matrices stay inside ClientHandle instances; only the flattened
weight-update vector produced by local_update ever leaves this module.
The server engine talks to handles purely through node_id / local_update.
"""

from __future__ import annotations

import numpy as np

from .features import LmbeMatrix
from .network import DenseNetwork, flatten_trainable, loss_and_gradients, Layer


def local_update(
    features: LmbeMatrix,
    cluster_model: DenseNetwork,
    seed,
    lr: float = 0.1,
    epochs: int = 1,
    batch_size: int = 32,
) -> np.ndarray:
    """Train the cluster model locally and return the trainable-parameter delta.

    Runs `epochs` shuffled mini-batch passes of self-reconstruction SGD over
    the client's feature frames, then returns flatten(after) - flatten(before)
    over the unfrozen parameters. epochs=0 yields an exact zero vector.
    """
    X = features.values
    if X.shape[0] == 0:
        raise ValueError("client has no feature frames to train on")
    if X.shape[1] != cluster_model.input_size:
        raise ValueError(
            f"feature dim {X.shape[1]} does not match model input {cluster_model.input_size}"
        )
    before = flatten_trainable(cluster_model)
    net = cluster_model
    rng = np.random.default_rng(seed)
    for _ in range(int(epochs)):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch_size):
            idx = order[start : start + batch_size]
            _, grads = loss_and_gradients(net, X[idx], X[idx], "mse")
            new_layers = []
            for layer, grad in zip(net.layers, grads):
                if grad is None:
                    new_layers.append(layer)
                else:
                    dW, db = grad
                    new_layers.append(
                        Layer(layer.weights - lr * dW, layer.bias - lr * db, layer.activation, False)
                    )
            net = DenseNetwork(new_layers, net.bottleneck)
    return flatten_trainable(net) - before


class ClientHandle:
    """Privacy boundary around one node's local features."""

    def __init__(self, node_id: int, features: LmbeMatrix):
        self._node_id = int(node_id)
        self._features = features

    @property
    def node_id(self) -> int:
        return self._node_id

    @property
    def frame_count(self) -> int:
        return self._features.frame_count

    def local_update(self, cluster_model, seed, lr=0.1, epochs=1, batch_size=32):
        return local_update(self._features, cluster_model, seed, lr, epochs, batch_size)

    def __repr__(self):
        return f"ClientHandle(node_id={self._node_id}, frames={self.frame_count})"


def make_clients(features_by_node: dict) -> list:
    """ClientHandles from {node_id: LmbeMatrix}, ordered by node id."""
    return [ClientHandle(node_id, features_by_node[node_id]) for node_id in sorted(features_by_node)]
