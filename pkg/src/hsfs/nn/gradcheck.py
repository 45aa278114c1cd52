"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hsfs.nn.losses import loss as loss_fn
from hsfs.nn.network import Network


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)  # "layer.name" -> float
    checked: int = 0
    skipped_kinks: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def summary(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.max_rel_error.items()]
        lines.append(f"worst={self.worst:.3e} checked={self.checked} skipped={self.skipped_kinks}")
        return "\n".join(lines)


def relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _evaluate(net, batch, target, loss, training, seed):
    if training:
        net.reseed(seed)
    acts = net.forward(batch, training=training)
    value, grad = loss_fn(loss, acts.output, target)
    signature = [layer.pattern(c) for layer, c in zip(net.layers, acts.caches)]
    return value, grad, acts, signature


def _same_pattern(a, b):
    return all((x is None and y is None) or np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    net: Network,
    batch,
    target,
    loss: str = "cross_entropy",
    tolerance: float = 1e-4,
    step: float = 1e-3,
    training: bool = False,
    max_entries: int | None = None,
    seed: int = 0,
    check_input: bool = False,
) -> GradCheckReport:
    """Compare backprop gradients with central differences of the loss.

    The check runs on a float64 copy of ``net`` so that rounding noise in the
    difference quotient stays far below ``tolerance``. Entries whose +/-step
    perturbation flips a ReLU sign or a max-pool winner are non-differentiable
    there and are counted in ``skipped_kinks`` instead of compared.
    ``training=True`` freezes dropout masks by reseeding before every pass.
    ``check_input=True`` also checks the gradient w.r.t. the batch itself,
    which exercises parameter-free layers sitting in front of the first
    trainable one.
    """
    work = net.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    _, grad_out, acts, base_sig = _evaluate(work, batch, target, loss, training, seed)
    analytic, d_batch = work.backward(acts, grad_out, input_grad=True)
    analytic = list(analytic) + [{"x": d_batch}]
    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    targets = list(work.parameters())
    if check_input:
        targets.append((len(work.layers), "x", batch))
    for i, name, param in targets:
        flat = param.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for k in indices:
            orig = flat[k]
            flat[k] = orig + step
            f_plus, _, _, sig_plus = _evaluate(work, batch, target, loss, training, seed)
            flat[k] = orig - step
            f_minus, _, _, sig_minus = _evaluate(work, batch, target, loss, training, seed)
            flat[k] = orig
            if not (_same_pattern(sig_plus, base_sig) and _same_pattern(sig_minus, base_sig)):
                report.skipped_kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            err = float(relative_error(analytic[i][name].reshape(-1)[k], numeric))
            worst = max(worst, err)
            report.checked += 1
        report.max_rel_error[f"{i}.{name}"] = worst
    return report
