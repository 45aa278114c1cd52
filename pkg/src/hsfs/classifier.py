"""Dense per-pixel classifier: build, train, evaluate, classify whole cubes."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from hsfs.dataio import N_LABELS, Checkpoint, PixelDataset
from hsfs.errors import DivergenceError, NonFiniteError, ShapeError
from hsfs.nn import Dense, Dropout, Network, ReLU, Softmax, cross_entropy, make_optimizer
from hsfs.pipeline import NormStats, normalize_fit

log = logging.getLogger(__name__)

# overlay colours; background stays transparent
OVERLAY_COLOURS = {1: (255, 140, 0), 2: (255, 230, 0)}


@dataclass
class MlpConfig:
    input_dim: int = 512
    hidden: tuple = (128, 256)
    dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float | None = None  # None means the optimizer's own default
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1 or len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ShapeError(f"invalid MLP dims: input {self.input_dim}, hidden {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def build_mlp(cfg: MlpConfig) -> Network:
    """Dense -> ReLU -> Dropout -> Dense -> ReLU -> Dense(3) -> Softmax."""
    rng = np.random.default_rng((cfg.seed, 1))
    h1, h2 = cfg.hidden
    layers = [
        Dense(cfg.input_dim, h1, rng), ReLU(), Dropout(cfg.dropout),
        Dense(h1, h2, rng), ReLU(),
        Dense(h2, N_LABELS, rng), Softmax(),
    ]
    return Network(layers, (cfg.input_dim,), seed=cfg.seed)


def predict_labels(net: Network, x: np.ndarray) -> np.ndarray:
    return net.predict(x).argmax(axis=1).astype(np.uint8)


def accuracy(net: Network, ds: PixelDataset) -> float:
    if not len(ds):
        return 0.0
    return float(np.mean(predict_labels(net, ds.features) == ds.labels))


def train(net: Network, train_ds: PixelDataset, val_ds: PixelDataset, cfg: MlpConfig):
    """Minibatch training on cross-entropy, keeping the best-validation weights.

    Returns ``(net, history)``; ``history`` has one dict per epoch.
    """
    opt = make_optimizer(cfg.optimizer, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 2))
    x, y = train_ds.features, train_ds.labels.astype(np.int64)
    n = len(train_ds)
    best_acc, best_params = -1.0, None
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                acts = net.forward(x[idx], training=True)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            value, grad = cross_entropy(acts.output, y[idx])
            if not np.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: non-finite loss after {start} samples")
            opt.step(net, net.backward(acts, grad))
            losses.append(value * len(idx))
            correct += int(np.sum(acts.output.argmax(axis=1) == y[idx]))
        val_acc = accuracy(net, val_ds) if len(val_ds) else float("nan")
        history.append({
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / max(n, 1)),
            "train_acc": correct / max(n, 1),
            "val_acc": val_acc,
        })
        log.debug("epoch %d loss %.4f val %.4f", epoch, history[-1]["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = [p.copy() for _, _, p in net.parameters()]
    if best_params is not None:
        for (_, _, p), saved in zip(net.parameters(), best_params):
            p[...] = saved
        net.bump()
    return net, history


def fit_pixel_classifier(train_ds: PixelDataset, val_ds: PixelDataset, cfg: MlpConfig,
                         features=None, original_bands=None):
    """Normalize with training statistics, build, train and package a checkpoint.

    ``train_ds``/``val_ds`` hold raw spectra over ``features`` (default: all bands).
    """
    stats = normalize_fit(train_ds)
    if cfg.input_dim != train_ds.dims:
        cfg = MlpConfig(**{**cfg.to_dict(), "input_dim": train_ds.dims})
    net = build_mlp(cfg)
    net, history = train(
        net,
        PixelDataset(stats.apply(train_ds.features), train_ds.labels),
        PixelDataset(stats.apply(val_ds.features), val_ds.labels),
        cfg,
    )
    features = list(range(train_ds.dims)) if features is None else list(features)
    ckpt = Checkpoint(net, stats.mean, stats.std, features,
                      original_bands or train_ds.dims, {"mlp": cfg.to_dict()})
    return ckpt, history


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows: true class, cols: predicted class
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    empty_classes: list = field(default_factory=list)

    @property
    def macro(self) -> dict:
        return {
            "precision": float(self.precision.mean()),
            "recall": float(self.recall.mean()),
            "f1": float(self.f1.mean()),
        }

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro": self.macro,
            "accuracy": self.accuracy,
            "empty_classes": self.empty_classes,
        }

    def table(self) -> str:
        from hsfs.dataio import LABEL_NAMES

        rows = ["class,precision,recall,f1,support"]
        support = self.confusion.sum(axis=1)
        for k, name in enumerate(LABEL_NAMES):
            rows.append(f"{name},{self.precision[k]:.4f},{self.recall[k]:.4f},{self.f1[k]:.4f},{support[k]}")
        m = self.macro
        rows.append(f"average,{m['precision']:.4f},{m['recall']:.4f},{m['f1']:.4f},{support.sum()}")
        return "\n".join(rows) + "\n"


def _safe_div(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def evaluate_predictions(y_true, y_pred, n_classes: int = N_LABELS) -> EvalReport:
    """Confusion matrix and per-class precision/recall/F1 with macro averages.

    A class with no true or no predicted samples gets 0 for the undefined
    metric and is listed in ``empty_classes``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_tot, true_tot = cm.sum(axis=0), cm.sum(axis=1)
    precision = _safe_div(tp, pred_tot)
    recall = _safe_div(tp, true_tot)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    empty = [k for k in range(n_classes) if pred_tot[k] == 0 or true_tot[k] == 0]
    if empty:
        warnings.warn(f"classes {empty} have no true or no predicted samples; metrics set to 0")
    return EvalReport(cm, precision, recall, f1, float(tp.sum() / cm.sum()), empty)


def evaluate(net: Network, ds: PixelDataset) -> EvalReport:
    return evaluate_predictions(ds.labels, predict_labels(net, ds.features))


def majority_baseline(ds: PixelDataset, train_ds: PixelDataset | None = None) -> EvalReport:
    """Predict the most frequent class of ``train_ds`` (default ``ds``) everywhere."""
    ref = ds if train_ds is None else train_ds
    if not len(ref):
        raise ValueError("majority baseline needs a non-empty dataset")
    majority = int(np.argmax(ref.counts()))
    return evaluate_predictions(ds.labels, np.full(len(ds), majority))


# -- whole cubes -------------------------------------------------------------


def prepare_features(ckpt: Checkpoint, spectra: np.ndarray) -> np.ndarray:
    """Select the checkpoint's retained bands from raw spectra and normalize."""
    spectra = np.asarray(spectra, dtype=np.float32)
    if spectra.shape[-1] != ckpt.original_bands:
        raise ShapeError(
            f"input has {spectra.shape[-1]} bands, checkpoint expects {ckpt.original_bands}"
        )
    return NormStats(ckpt.mean, ckpt.std).apply(spectra[..., ckpt.features])


def classify_cube(ckpt: Checkpoint, cube: np.ndarray):
    """Per-pixel argmax labels and an RGB overlay of the predictions.

    The overlay is a grey rendering of mean band intensity with N+ pixels
    tinted orange and N- pixels tinted yellow; background is left untinted.
    """
    h, w, b = cube.shape
    x = prepare_features(ckpt, cube.reshape(h * w, b))
    labels = predict_labels(ckpt.network, x).reshape(h, w)
    return labels, overlay(cube, labels)


def overlay(cube: np.ndarray, labels: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    grey = cube.mean(axis=2)
    lo, hi = float(grey.min()), float(grey.max())
    grey = (grey - lo) / (hi - lo) if hi > lo else np.zeros_like(grey)
    rgb = np.repeat((255 * grey)[..., None], 3, axis=2)
    for label, colour in OVERLAY_COLOURS.items():
        sel = labels == label
        rgb[sel] = (1 - alpha) * rgb[sel] + alpha * np.array(colour, dtype=np.float64)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
