"""Adam and Adadelta with per-parameter accumulators.

Accumulators are keyed by ``(layer_index, param_name)`` and mirror parameter
shapes and dtypes.
"""

from __future__ import annotations

import numpy as np

from hsfs.errors import NonFiniteError, ShapeError


class Optimizer:
    kind = "base"

    def __init__(self):
        self.state: dict[tuple, dict[str, np.ndarray]] = {}
        self.t = 0

    def _slots(self, key, param):
        raise NotImplementedError

    def _delta(self, slots, g):
        raise NotImplementedError

    def step(self, net, grads: list[dict]):
        """Update ``net``'s parameters in place from per-layer gradients."""
        self.t += 1
        updates = []
        for i, name, param in net.parameters():
            g = grads[i][name]
            if g.shape != param.shape:
                raise ShapeError(f"gradient {g.shape} != parameter {param.shape} at layer {i}.{name}")
            key = (i, name)
            if key not in self.state:
                self.state[key] = self._slots(param)
            delta = self._delta(self.state[key], g.astype(param.dtype, copy=False))
            if not np.all(np.isfinite(delta)):
                raise NonFiniteError(f"non-finite update for layer {i}.{name}")
            updates.append((param, delta))
        for param, delta in updates:
            param += delta
        net.bump()

    def hyperparams(self) -> dict:
        return {"kind": self.kind}


class Adam(Optimizer):
    """Adam with bias-corrected first and second moments."""

    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__()
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def _slots(self, param):
        return {"m": np.zeros_like(param), "v": np.zeros_like(param)}

    def _delta(self, s, g):
        dt = g.dtype.type
        b1, b2 = dt(self.beta1), dt(self.beta2)
        s["m"] *= b1
        s["m"] += (1 - b1) * g
        s["v"] *= b2
        s["v"] += (1 - b2) * g * g
        m_hat = s["m"] / dt(1.0 - self.beta1**self.t)
        v_hat = s["v"] / dt(1.0 - self.beta2**self.t)
        return -dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def hyperparams(self):
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


class Adadelta(Optimizer):
    """Adadelta: step = -lr * RMS[dx]_{t-1} / RMS[g]_t * g."""

    kind = "adadelta"

    def __init__(self, lr=1.0, rho=0.95, eps=1e-6):
        super().__init__()
        self.lr, self.rho, self.eps = lr, rho, eps

    def _slots(self, param):
        return {"g2": np.zeros_like(param), "dx2": np.zeros_like(param)}

    def _delta(self, s, g):
        dt = g.dtype.type
        rho, eps = dt(self.rho), dt(self.eps)
        s["g2"] *= rho
        s["g2"] += (1 - rho) * g * g
        dx = -np.sqrt(s["dx2"] + eps) / np.sqrt(s["g2"] + eps) * g
        s["dx2"] *= rho
        s["dx2"] += (1 - rho) * dx * dx
        return dt(self.lr) * dx

    def hyperparams(self):
        return {"kind": self.kind, "lr": self.lr, "rho": self.rho, "eps": self.eps}


def make_optimizer(kind: str, **kwargs) -> Optimizer:
    kinds = {"adam": Adam, "adadelta": Adadelta}
    try:
        cls = kinds[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {kind!r}") from None
    return cls(**{k: v for k, v in kwargs.items() if v is not None})
