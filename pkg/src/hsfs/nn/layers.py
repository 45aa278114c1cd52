"""Layer implementations for the numpy engine.

Dense layers take ``(N, D)`` batches. Spatial layers take channels-last
``(N, H, W, C)`` batches, which is the natural (row, col, band) order of a
hyperspectral cube.

Every layer exposes ``forward(x, training, rng) -> (y, cache)`` and
``backward(cache, grad_y) -> (grad_x, param_grads)``.
"""

from __future__ import annotations

import numpy as np

from hsfs.errors import ShapeError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return tuple(input_shape)

    def forward(self, x, training, rng):
        raise NotImplementedError

    def backward(self, cache, grad_y):
        raise NotImplementedError

    def pattern(self, cache):
        """Piecewise-linear branch taken in the last forward, or None.

        Finite differences are only meaningful when a perturbation does not
        change this pattern.
        """
        return None

    def config(self) -> dict:
        return {"kind": self.kind}

    def astype(self, dtype) -> "Layer":
        clone = self._clone()
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    def _clone(self) -> "Layer":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        return clone


class Dense(Layer):
    """Fully connected layer with weights stored as ``(out_dim, in_dim)``.

    The forward pass accumulates input features strictly in index order, so
    a network that drops input ``j`` produces bit-identical outputs to one
    whose weight column ``j`` is zero. Matmul kernels do not guarantee this.
    """

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, rng=None, dtype=np.float32):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ShapeError(f"dense dims must be positive, got {in_dim}->{out_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "W": glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype),
            "b": np.zeros(out_dim, dtype=dtype),
        }

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_dim,):
            raise ShapeError(f"dense expects ({self.in_dim},), got {tuple(input_shape)}")
        return (self.out_dim,)

    def forward(self, x, training, rng):
        W, b = self.params["W"], self.params["b"]
        y = np.empty((x.shape[0], self.out_dim), dtype=W.dtype)
        y[...] = b
        for j in range(self.in_dim):
            y += x[:, j : j + 1] * W[:, j]
        return y, x

    def backward(self, x, grad_y):
        W = self.params["W"]
        grads = {"W": grad_y.T @ x, "b": grad_y.sum(axis=0)}
        return grad_y @ W, grads

    def config(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class Conv2D(Layer):
    """3x3 convolution, stride 1, zero "same" padding. Kernels are ``(3, 3, Cin, Cout)``."""

    kind = "conv2d"
    size = 3

    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=np.float32):
        super().__init__()
        if in_ch < 1 or out_ch < 1:
            raise ShapeError(f"conv channels must be positive, got {in_ch}->{out_ch}")
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        rng = rng if rng is not None else np.random.default_rng(0)
        k = self.size
        self.params = {
            "K": glorot_uniform(rng, (k, k, in_ch, out_ch), k * k * in_ch, k * k * out_ch, dtype),
            "b": np.zeros(out_ch, dtype=dtype),
        }

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[2] != self.in_ch:
            raise ShapeError(f"conv expects (H, W, {self.in_ch}), got {tuple(input_shape)}")
        return (input_shape[0], input_shape[1], self.out_ch)

    def forward(self, x, training, rng):
        K, b = self.params["K"], self.params["b"]
        n, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        y = np.empty((n, h, w, self.out_ch), dtype=K.dtype)
        y[...] = b
        for di in range(3):
            for dj in range(3):
                y += xp[:, di : di + h, dj : dj + w, :] @ K[di, dj]
        return y, xp

    def backward(self, xp, grad_y):
        K = self.params["K"]
        n, h, w, _ = grad_y.shape
        g2 = grad_y.reshape(-1, self.out_ch)
        dK = np.empty_like(K)
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, di : di + h, dj : dj + w, :]
                dK[di, dj] = patch.reshape(-1, self.in_ch).T @ g2
                dxp[:, di : di + h, dj : dj + w, :] += grad_y @ K[di, dj].T
        grads = {"K": dK, "b": g2.sum(axis=0)}
        return dxp[:, 1:-1, 1:-1, :], grads

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng):
        mask = x > 0
        return np.where(mask, x, x.dtype.type(0)), mask

    def backward(self, mask, grad_y):
        return np.where(mask, grad_y, grad_y.dtype.type(0)), {}

    def pattern(self, mask):
        return mask


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, training, rng):
        if not training or self.rate == 0.0:
            return x, None
        keep = rng.random(x.shape) >= self.rate
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(keep, x * scale, x.dtype.type(0)), (keep, scale)

    def backward(self, cache, grad_y):
        if cache is None:
            return grad_y, {}
        keep, scale = cache
        return np.where(keep, grad_y * scale, grad_y.dtype.type(0)), {}

    def config(self):
        return {"kind": self.kind, "rate": self.rate}


class MaxPool2(Layer):
    """2x2 max pooling. Ties route the gradient to the first maximum in row-major order."""

    kind = "maxpool2"

    def output_shape(self, input_shape):
        h, w, c = _spatial(input_shape, self.kind)
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward(self, x, training, rng):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, grad_y):
        shape, idx = cache
        n, h, w, c = shape
        onehot = idx[..., None] == np.arange(4)
        blocks = np.where(onehot, grad_y[..., None], grad_y.dtype.type(0))
        blocks = blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return blocks.reshape(shape), {}

    def pattern(self, cache):
        return cache[1]


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling; backward sums each 2x2 block."""

    kind = "upsample2"

    def output_shape(self, input_shape):
        h, w, c = _spatial(input_shape, self.kind)
        return (2 * h, 2 * w, c)

    def forward(self, x, training, rng):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, cache, grad_y):
        n, h2, w2, c = grad_y.shape
        return grad_y.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)), {}


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training, rng):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        return p, p

    def backward(self, p, grad_y):
        inner = (grad_y * p).sum(axis=-1, keepdims=True)
        return p * (grad_y - inner), {}


def _spatial(input_shape, kind):
    if len(input_shape) != 3:
        raise ShapeError(f"{kind} expects (H, W, C), got {tuple(input_shape)}")
    return tuple(int(s) for s in input_shape)


LAYER_TYPES = {
    cls.kind: cls for cls in (Dense, Conv2D, ReLU, Dropout, MaxPool2, Upsample2, Softmax)
}


def layer_from_config(cfg: dict, dtype=np.float32) -> Layer:
    """Rebuild a layer from ``Layer.config()`` output with zeroed parameters."""
    kind = cfg["kind"]
    if kind == "dense":
        layer = Dense(cfg["in_dim"], cfg["out_dim"], dtype=dtype)
    elif kind == "conv2d":
        layer = Conv2D(cfg["in_ch"], cfg["out_ch"], dtype=dtype)
    elif kind == "dropout":
        layer = Dropout(cfg["rate"])
    elif kind in LAYER_TYPES:
        layer = LAYER_TYPES[kind]()
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    for v in layer.params.values():
        v[...] = 0
    return layer
