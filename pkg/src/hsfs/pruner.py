"""Iterative band pruning driven by first-layer weight magnitudes.

The loop: train a classifier on the retained bands, score each input band
by the summed absolute weight leaving it, drop the lowest-scoring band and
re-measure validation accuracy without retraining. When accuracy falls more
than ``tau`` below the accuracy measured right after the last training, a
fresh (optionally narrower) network is trained on the surviving bands.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from hsfs.classifier import MlpConfig, accuracy, build_mlp, train
from hsfs.dataio import PixelDataset
from hsfs.errors import DivergenceError, ShapeError
from hsfs.nn import Dense, Network

log = logging.getLogger(__name__)


@dataclass
class PruneConfig:
    tau: float = 0.005
    max_retrains: int = 20
    min_features: int = 4
    mlp: MlpConfig = field(default_factory=MlpConfig)
    retrain_optimizer: str = "adadelta"
    retrain_lr: float | None = None
    rescale: str = "proportional"  # or "fixed"
    min_hidden: int = 16

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.min_features < 1 or self.max_retrains < 0:
            raise ValueError("min_features must be >= 1 and max_retrains >= 0")
        if self.rescale not in ("proportional", "fixed"):
            raise ValueError(f"unknown rescale policy {self.rescale!r}")

    def hidden_for(self, n_features: int, original: int) -> tuple:
        if self.rescale == "fixed":
            return self.mlp.hidden
        return tuple(max(self.min_hidden, round(h * n_features / original)) for h in self.mlp.hidden)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "max_retrains": self.max_retrains, "min_features": self.min_features,
            "mlp": self.mlp.to_dict(), "retrain_optimizer": self.retrain_optimizer,
            "retrain_lr": self.retrain_lr, "rescale": self.rescale, "min_hidden": self.min_hidden,
        }


@dataclass
class PruneStep:
    step: int
    removed: int  # original band index
    val_acc: float  # accuracy right after removal, before any retraining
    retrained: bool
    retrained_acc: float | None = None


@dataclass
class PruneState:
    features: list  # retained original band indices, sorted
    original_bands: int
    network: Network | None = None
    gamma: np.ndarray | None = None
    baseline_acc: float = float("nan")
    initial_acc: float = float("nan")
    retrain_count: int = 0
    history: list = field(default_factory=list)
    halt_reason: str = ""

    @property
    def final_acc(self) -> float:
        if not self.history:
            return self.baseline_acc
        last = self.history[-1]
        return last.retrained_acc if last.retrained else last.val_acc

    def summary(self) -> dict:
        return {
            "original_bands": self.original_bands,
            "retained": list(self.features),
            "removed": len(self.history),
            "retrain_count": self.retrain_count,
            "initial_val_acc": self.initial_acc,
            "final_val_acc": self.final_acc,
            "halt_reason": self.halt_reason,
        }


def worthiness(net: Network) -> np.ndarray:
    """Sum of absolute first-layer weights leaving each input feature."""
    W = net.first_dense().params["W"]
    return np.abs(W).sum(axis=0)


def drop_input(net: Network, position: int) -> Network:
    """Copy of ``net`` without input ``position`` (its first-layer column)."""
    first = net.first_dense()
    if first.in_dim < 2:
        raise ShapeError("cannot drop the last remaining input")
    keep = np.delete(np.arange(first.in_dim), position)
    new = first._clone()
    new.in_dim = first.in_dim - 1
    new.params = {"W": first.params["W"][:, keep].copy(), "b": first.params["b"].copy()}
    rest = [layer.astype(net.dtype) for layer in net.layers[1:]]
    return Network([new] + rest, (new.in_dim,), seed=net.seed, dtype=net.dtype)


def zero_input_column(net: Network, position: int) -> Network:
    out = net.copy()
    out.first_dense().params["W"][:, position] = 0
    return out


def remove_min(state: PruneState, min_features: int = 1):
    """Drop the retained band with the smallest worthiness (lowest index on ties).

    Returns ``(removed_original_index, position_in_retained_list)`` and
    updates ``state.features``, ``state.network`` and ``state.gamma``.
    """
    if len(state.features) <= min_features:
        raise ShapeError(f"already at the {min_features}-feature floor")
    gamma = worthiness(state.network)
    pos = int(np.argmin(gamma))  # argmin returns the first minimum
    removed = state.features.pop(pos)
    state.network = drop_input(state.network, pos)
    state.gamma = np.delete(gamma, pos)
    return removed, pos


def restrict(ds: PixelDataset, features) -> PixelDataset:
    return PixelDataset(ds.features[:, list(features)], ds.labels)


def eval_without_retrain(net: Network, val: PixelDataset, features) -> float:
    if net.input_shape != (len(features),):
        raise ShapeError(f"network expects {net.input_shape[0]} inputs, got {len(features)} features")
    return accuracy(net, restrict(val, features))


def _train_new(train_ds, val_ds, features, cfg: PruneConfig, original: int, round_: int) -> Network:
    if round_ == 0:
        mlp = MlpConfig(**{**cfg.mlp.to_dict(), "input_dim": len(features)})
    else:
        mlp = MlpConfig(**{
            **cfg.mlp.to_dict(),
            "input_dim": len(features),
            "hidden": cfg.hidden_for(len(features), original),
            "optimizer": cfg.retrain_optimizer,
            "lr": cfg.retrain_lr,
            "seed": cfg.mlp.seed + round_,
        })
    net, _ = train(build_mlp(mlp), restrict(train_ds, features), restrict(val_ds, features), mlp)
    return net


def run_prune(train_ds: PixelDataset, val_ds: PixelDataset, cfg: PruneConfig,
              network: Network | None = None, progress=None) -> PruneState:
    """Run the prune/retrain loop on normalized datasets.

    ``network`` optionally supplies an already trained full-width classifier
    in place of the initial training. Halts when the retrain count exceeds
    ``cfg.max_retrains`` or the ``cfg.min_features`` floor is reached. A
    diverging retrain stops the loop with ``halt_reason == "diverged"`` and
    the history gathered so far.
    """
    original = train_ds.dims
    state = PruneState(features=list(range(original)), original_bands=original)
    state.network = network if network is not None else _train_new(train_ds, val_ds, state.features, cfg, original, 0)
    state.baseline_acc = state.initial_acc = eval_without_retrain(state.network, val_ds, state.features)
    state.gamma = worthiness(state.network)
    step = 0
    while True:
        if len(state.features) <= cfg.min_features:
            state.halt_reason = "min_features"
            break
        removed, _ = remove_min(state, cfg.min_features)
        acc = eval_without_retrain(state.network, val_ds, state.features)
        entry = PruneStep(step, removed, acc, False)
        state.history.append(entry)
        if state.baseline_acc - acc > cfg.tau:
            state.retrain_count += 1
            try:
                state.network = _train_new(train_ds, val_ds, state.features, cfg, original, state.retrain_count)
            except DivergenceError as exc:
                log.warning("retrain %d diverged: %s", state.retrain_count, exc)
                state.halt_reason = "diverged"
                break
            state.baseline_acc = eval_without_retrain(state.network, val_ds, state.features)
            state.gamma = worthiness(state.network)
            entry.retrained, entry.retrained_acc = True, state.baseline_acc
        if progress is not None:
            progress(state, entry)
        step += 1
        if state.retrain_count > cfg.max_retrains:
            state.halt_reason = "max_retrains"
            break
    return state


def removal_order_map(history, bands: int) -> np.ndarray:
    """Entry ``j`` is the step at which band ``j`` was removed, ``bands`` if retained."""
    order = np.full(bands, bands, dtype=np.int64)
    for h in history:
        order[h.removed] = h.step
    return order


def retained_from_order(order: np.ndarray) -> list[int]:
    return [int(j) for j in np.flatnonzero(np.asarray(order) == len(order))]
