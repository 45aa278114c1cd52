"""Convolutional encoder-decoder that regresses coded cell masks from chips.

The target is a single-channel map with BG=0, N+=1, N-=2, trained with MSE,
so the network segments and classifies in one output.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from hsfs.dataio import Checkpoint
from hsfs.errors import DivergenceError, NonFiniteError, ShapeError
from hsfs.nn import Conv2D, Dropout, MaxPool2, Network, ReLU, Upsample2, make_optimizer, mse
from hsfs.pipeline import ChipSet, NormStats, fit_channel_stats

log = logging.getLogger(__name__)

FULL_SCALE_WIDTHS = (128, 128, 64, 64, 1)


@dataclass
class CnnConfig:
    size: int = 16
    bands: int = 16
    widths: tuple = (32, 32, 32, 32, 1)
    dropout: float = 0.25
    epochs: int = 40
    batch_size: int = 16
    optimizer: str = "adadelta"
    lr: float | None = None
    rho: float | None = None
    eps: float | None = None
    val_frac: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.size % 4 or self.size < 4:
            raise ShapeError(f"chip size must be divisible by 4, got {self.size}")
        if len(self.widths) != 5 or min(self.widths) < 1 or self.widths[-1] != 1:
            raise ShapeError(f"need five positive widths ending in 1, got {self.widths}")
        if self.bands < 1:
            raise ShapeError("bands must be positive")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def optimizer_kwargs(self) -> dict:
        kw = {"lr": self.lr}
        if self.optimizer == "adadelta":
            kw.update(rho=self.rho, eps=self.eps)
        elif self.eps is not None:
            kw["eps"] = self.eps
        return kw


def build_cnn(cfg: CnnConfig) -> Network:
    """Conv, Dropout, Pool, Conv, Pool, Conv, Upsample, Dropout, Conv, Upsample, Conv(->1).

    Every convolution is 3x3 with ReLU except the last, which is linear.
    """
    rng = np.random.default_rng((cfg.seed, 1))
    w1, w2, w3, w4, w5 = cfg.widths
    layers = [
        Conv2D(cfg.bands, w1, rng), ReLU(), Dropout(cfg.dropout), MaxPool2(),
        Conv2D(w1, w2, rng), ReLU(), MaxPool2(),
        Conv2D(w2, w3, rng), ReLU(), Upsample2(), Dropout(cfg.dropout),
        Conv2D(w3, w4, rng), ReLU(), Upsample2(),
        Conv2D(w4, w5, rng),
    ]
    net = Network(layers, (cfg.size, cfg.size, cfg.bands), seed=cfg.seed)
    for layer, before, after in zip(layers, net.shapes, net.shapes[1:]):
        side = before[0]
        if isinstance(layer, MaxPool2):
            side //= 2
        elif isinstance(layer, Upsample2):
            side *= 2
        if after[:2] != (side, side):
            raise ShapeError(f"{layer.kind} maps {before} to {after}")
    if net.output_shape != (cfg.size, cfg.size, 1):
        raise ShapeError(f"output {net.output_shape} does not match the chip")
    return net


def layer_shapes(net: Network) -> list[tuple]:
    """``(kind, output_shape)`` for each layer, for comparing against a reference stack."""
    return [(layer.kind, shape) for layer, shape in zip(net.layers, net.shapes[1:])]


@dataclass
class MaskPrediction:
    values: np.ndarray  # (S, S) continuous codes

    @property
    def labels(self) -> np.ndarray:
        return np.clip(np.rint(self.values), 0, 2).astype(np.uint8)


def _targets(masks: np.ndarray) -> np.ndarray:
    return masks.astype(np.float32)[..., None]


def _unpack(model):
    if isinstance(model, Checkpoint):
        return model.network, NormStats(model.mean, model.std)
    return model, None


def _inputs(model, cubes):
    net, stats = _unpack(model)
    cubes = np.asarray(cubes, dtype=np.float32)
    if cubes.shape[1:] != net.input_shape:
        raise ShapeError(f"chips {cubes.shape[1:]} do not match network input {net.input_shape}")
    return net, (stats.apply(cubes) if stats is not None else cubes)


def predict_values(model, cubes: np.ndarray, batch_size: int = 64) -> np.ndarray:
    net, x = _inputs(model, cubes)
    return net.predict(x, batch_size=batch_size)[..., 0]


def predict_mask(model, chip: np.ndarray) -> MaskPrediction:
    """Continuous code map for a single ``(S, S, B)`` chip."""
    return MaskPrediction(predict_values(model, np.asarray(chip)[None])[0])


def l1_error(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return float(np.abs(pred - target).mean())


def eval_l1(model, chips: ChipSet) -> float:
    """Mean per-pixel absolute error between predicted and coded masks."""
    return l1_error(predict_values(model, chips.cubes), chips.masks)


def split_holdout(chips: ChipSet, val_frac: float, seed: int):
    n = len(chips)
    n_val = int(round(n * val_frac))
    if val_frac > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    perm = np.random.default_rng((seed, 3)).permutation(n)
    return chips.subset(np.sort(perm[n_val:])), chips.subset(np.sort(perm[:n_val]))


def train_masker(net: Network, train_chips: ChipSet, val_chips: ChipSet | None, cfg: CnnConfig):
    """Minibatch MSE training on already-normalized chips.

    Keeps the parameters with the lowest held-out MSE (training MSE when no
    held-out chips are given). Returns ``(net, history)``.
    """
    opt = make_optimizer(cfg.optimizer, **cfg.optimizer_kwargs())
    rng = np.random.default_rng((cfg.seed, 2))
    x, y = train_chips.cubes, _targets(train_chips.masks)
    n = len(train_chips)
    best, best_params, history = np.inf, None, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                acts = net.forward(x[idx], training=True)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            value, grad = mse(acts.output, y[idx])
            if not np.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: non-finite loss")
            opt.step(net, net.backward(acts, grad))
            total += value * len(idx)
        record = {"epoch": epoch, "train_mse": total / max(n, 1)}
        if val_chips is not None and len(val_chips):
            pred = net.predict(val_chips.cubes, batch_size=64)
            record["val_mse"] = float(np.mean((pred - _targets(val_chips.masks)) ** 2))
            record["val_l1"] = l1_error(pred[..., 0], val_chips.masks)
        score = record.get("val_mse", record["train_mse"])
        history.append(record)
        log.debug("epoch %d %s", epoch, record)
        if score < best:
            best, best_params = score, [p.copy() for _, _, p in net.parameters()]
    if best_params is not None:
        for (_, _, p), saved in zip(net.parameters(), best_params):
            p[...] = saved
        net.bump()
    return net, history


def fit_masker(chips: ChipSet, cfg: CnnConfig):
    """Hold out ``cfg.val_frac`` of ``chips``, normalize, build, train, package."""
    if chips.size != cfg.size or chips.bands != cfg.bands:
        cfg = CnnConfig(**{**cfg.to_dict(), "size": chips.size, "bands": chips.bands})
    train_chips, val_chips = split_holdout(chips, cfg.val_frac, cfg.seed)
    stats = fit_channel_stats(train_chips.cubes)

    def norm(c: ChipSet) -> ChipSet:
        return ChipSet(stats.apply(c.cubes), c.masks, c.provenance)

    net, history = train_masker(build_cnn(cfg), norm(train_chips), norm(val_chips), cfg)
    ckpt = Checkpoint(net, stats.mean, stats.std, list(range(cfg.bands)), cfg.bands,
                      {"cnn": cfg.to_dict()})
    return ckpt, history
