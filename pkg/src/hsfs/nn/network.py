"""Sequential network container with explicit forward/backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hsfs.errors import NonFiniteError, ShapeError
from hsfs.nn.layers import Dense, Layer, Softmax


@dataclass
class Activations:
    """Everything ``Network.backward`` needs from one forward call."""

    outputs: list
    caches: list
    network_id: int
    version: int
    training: bool

    @property
    def output(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple
    seed: int = 0
    training: bool = False
    dtype: type = np.float32
    version: int = field(default=0, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.rng = np.random.default_rng(self.seed)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    @property
    def head(self) -> str:
        if self.layers and isinstance(self.layers[-1], Softmax):
            return "softmax"
        return "linear"

    def reseed(self, seed: int | None = None):
        self.rng = np.random.default_rng(self.seed if seed is None else seed)

    def forward(self, batch: np.ndarray, training: bool | None = None) -> Activations:
        training = self.training if training is None else training
        batch = np.asarray(batch)
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape[1:]} does not match network input {self.input_shape}"
            )
        x = batch.astype(self.dtype, copy=False)
        outputs, caches = [x], []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x, training, self.rng)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite activation after layer {i} ({layer.kind})")
            outputs.append(x)
            caches.append(cache)
        return Activations(outputs, caches, id(self), self.version, training)

    def predict(self, batch: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Inference-mode output, evaluated in fixed-size chunks."""
        batch = np.asarray(batch)
        if len(batch) == 0:
            return np.zeros((0,) + self.output_shape, dtype=self.dtype)
        parts = [
            self.forward(batch[i : i + batch_size], training=False).output
            for i in range(0, len(batch), batch_size)
        ]
        return np.concatenate(parts)

    def backward(self, acts: Activations, loss_grad: np.ndarray, input_grad: bool = False):
        """Gradients of the loss for every layer's parameters, in layer order.

        With ``input_grad=True`` returns ``(grads, d_loss/d_batch)``.
        """
        if acts.network_id != id(self) or acts.version != self.version:
            raise ShapeError("activations are stale or belong to another network")
        if loss_grad.shape != acts.output.shape:
            raise ShapeError(f"loss gradient shape {loss_grad.shape} != output {acts.output.shape}")
        g = loss_grad.astype(self.dtype, copy=False)
        grads: list[dict] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, grads[i] = self.layers[i].backward(acts.caches[i], g)
        return (grads, g) if input_grad else grads

    def parameters(self):
        """Yield ``(layer_index, name, array)`` in canonical (serialisation) order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    @property
    def n_params(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def first_dense(self) -> Dense:
        if not self.layers or not isinstance(self.layers[0], Dense):
            raise ShapeError("first layer is not dense")
        return self.layers[0]

    def astype(self, dtype) -> "Network":
        net = Network([layer.astype(dtype) for layer in self.layers], self.input_shape,
                      seed=self.seed, training=self.training, dtype=dtype)
        return net

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "seed": int(self.seed),
            "layers": [layer.config() for layer in self.layers],
        }

    def bump(self):
        self.version += 1
