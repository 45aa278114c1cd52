"""Command line for hsfs, one subcommand per pipeline stage.

Every subcommand writes into ``--out`` a ``resolved_config.json`` (all
settings that influenced the run, including the seed) and a
``summary.json`` with its headline numbers. Settings come from
``--config`` (JSON) and are overridden by flags; the seed falls back to the
``HSFS_SEED`` environment variable and then to 0.

Exit codes: 0 ok, 2 usage, 3 missing/invalid input, 4 file format error,
5 infeasible request, 6 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from hsfs import dataio, pipeline, plotting
from hsfs.classifier import (
    MlpConfig,
    classify_cube,
    evaluate,
    fit_pixel_classifier,
    majority_baseline,
    prepare_features,
)
from hsfs.dataio import Checkpoint, PixelDataset
from hsfs.errors import DivergenceError, HsfsError, ShapeError
from hsfs.masker import CnnConfig, MaskPrediction, eval_l1, fit_masker, predict_values
from hsfs.pruner import PruneConfig, removal_order_map, run_prune
from hsfs.synthgen import default_spec, render_scene

log = logging.getLogger("hsfs")

EXIT_USAGE = 2
EXIT_INPUT = 3

SCENE_DEFAULTS = {
    "bands": 64, "informative": 8, "height": 64, "width": 64, "noise_std": 0.08,
    "separation": 6.0, "n_cells": 12, "marker_floor": 0.5, "edge_intensity": 0.3,
    "brightness_range": [0.4, 0.8], "spectra_seed": None,
}
CHIP_DEFAULTS = {"size": 16, "count": 2000, "min_nontrivial_frac": 0.9, "min_cell_pixels": 1}


# -- config resolution -------------------------------------------------------


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    try:
        return json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {args.config} is not valid JSON: {exc}") from exc


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    return int(os.environ.get("HSFS_SEED", 0))


def _section(cfg: dict, name: str, defaults: dict, overrides: dict) -> dict:
    out = dict(defaults)
    out.update(cfg.get(name, {}))
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _mlp_config(cfg, args, seed, input_dim) -> MlpConfig:
    d = _section(cfg, "mlp", MlpConfig(input_dim=input_dim).to_dict(), {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "dropout": getattr(args, "dropout", None),
        "optimizer": getattr(args, "optimizer", None),
        "lr": getattr(args, "lr", None),
    })
    d.update(seed=seed, input_dim=input_dim)
    return MlpConfig(**d)


def _finish(out: Path, resolved: dict, summary: dict):
    dataio.write_json(out / "resolved_config.json", resolved)
    dataio.write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))


def _inputs(**paths) -> dict:
    for name, p in paths.items():
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{name}: {p} does not exist")
    return {k: str(v) for k, v in paths.items() if v is not None}


# -- subcommands -------------------------------------------------------------


def cmd_gen(args, cfg, seed):
    scene = _section(cfg, "scene", SCENE_DEFAULTS, {
        "bands": args.bands, "informative": args.informative, "height": args.height,
        "width": args.width, "noise_std": args.noise, "n_cells": args.cells,
        "marker_floor": args.marker_floor, "spectra_seed": args.spectra_seed,
    })
    spec = default_spec(
        bands=scene["bands"], n_informative=scene["informative"], seed=seed,
        height=scene["height"], width=scene["width"], noise_std=scene["noise_std"],
        separation=scene["separation"], n_cells=scene["n_cells"],
        marker_floor=scene["marker_floor"], edge_intensity=scene["edge_intensity"],
        brightness_range=tuple(scene["brightness_range"]), spectra_seed=scene["spectra_seed"],
    )
    sc = render_scene(spec)
    out = Path(args.out)
    dataio.write_cube(out / "scene.hsc", sc.cube)
    dataio.write_mask(out / "scene.msk", sc.mask)
    dataio.write_json(out / "scene.json", {
        "informative_channels": sc.informative_channels, "spec": spec.to_dict(), "cells": sc.cells,
    })
    plotting.plot_class_spectra(sc.cube, sc.mask, out / "class_spectra.png", sc.informative_channels)
    counts = np.bincount(sc.mask.ravel(), minlength=3)
    _finish(out, {"command": "gen", "seed": seed, "scene": scene},
            {"shape": list(sc.cube.shape), "informative_channels": sc.informative_channels,
             "label_counts": counts.tolist(), "cells": len(sc.cells)})


def cmd_pixelize(args, cfg, seed):
    inputs = _inputs(cube=args.cube, mask=args.mask)
    ds = pipeline.pixelize(dataio.read_cube(args.cube), dataio.read_mask(args.mask))
    out = Path(args.out)
    dataio.write_pixels(out / "pixels.pxd", ds)
    _finish(out, {"command": "pixelize", "seed": seed, "inputs": inputs},
            {"records": len(ds), "dims": ds.dims, "label_counts": ds.counts().tolist()})


def cmd_balance(args, cfg, seed):
    inputs = _inputs(pixels=args.pixels)
    ds = pipeline.undersample_uniform(dataio.read_pixels(args.pixels), seed)
    out = Path(args.out)
    dataio.write_pixels(out / "balanced.pxd", ds)
    _finish(out, {"command": "balance", "seed": seed, "inputs": inputs},
            {"records": len(ds), "label_counts": ds.counts().tolist()})


def cmd_split(args, cfg, seed):
    inputs = _inputs(pixels=args.pixels)
    fr = _section(cfg, "split", {"train": 0.8, "val": 0.1, "test": 0.1},
                  {"train": args.train_frac, "val": args.val_frac, "test": args.test_frac})
    spec = pipeline.SplitSpec(fr["train"], fr["val"], fr["test"], seed)
    parts = pipeline.split(dataio.read_pixels(args.pixels), spec)
    out = Path(args.out)
    for name, part in zip(("train", "val", "test"), parts):
        dataio.write_pixels(out / f"{name}.pxd", part)
    _finish(out, {"command": "split", "seed": seed, "inputs": inputs, "split": fr},
            {name: len(p) for name, p in zip(("train", "val", "test"), parts)})


def _write_history(path, history):
    if not history:
        return
    keys = list(history[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def cmd_train_pixel(args, cfg, seed):
    inputs = _inputs(train=args.train, val=args.val)
    train_ds, val_ds = dataio.read_pixels(args.train), dataio.read_pixels(args.val)
    mlp = _mlp_config(cfg, args, seed, train_ds.dims)
    ckpt, history = fit_pixel_classifier(train_ds, val_ds, mlp)
    out = Path(args.out)
    dataio.write_checkpoint(out / "model.nnw", ckpt)
    _write_history(out / "history.csv", history)
    plotting.plot_training(history, out / "training.png")
    best = max(h["val_acc"] for h in history) if history else float("nan")
    _finish(out, {"command": "train-pixel", "seed": seed, "inputs": inputs, "mlp": mlp.to_dict()},
            {"best_val_acc": best, "epochs": len(history), "params": ckpt.network.n_params})


def _eval_ds(ckpt: Checkpoint, ds: PixelDataset) -> PixelDataset:
    return PixelDataset(prepare_features(ckpt, ds.features), ds.labels)


def cmd_eval_pixel(args, cfg, seed):
    inputs = _inputs(model=args.model, pixels=args.pixels, train=args.train)
    ckpt = dataio.read_checkpoint(args.model)
    ds = dataio.read_pixels(args.pixels)
    report = evaluate(ckpt.network, _eval_ds(ckpt, ds))
    base = majority_baseline(ds, dataio.read_pixels(args.train) if args.train else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.table())
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *dataio.LABEL_NAMES])
        for name, row in zip(dataio.LABEL_NAMES, report.confusion):
            w.writerow([name, *row.tolist()])
    plotting.plot_confusion(report.confusion, out / "confusion.png")
    summary = {"accuracy": report.accuracy, "macro": report.macro,
               "majority_baseline_accuracy": base.accuracy, "records": len(ds)}
    dataio.write_json(out / "report.json", {"model": report.to_dict(), "majority_baseline": base.to_dict()})
    _finish(out, {"command": "eval-pixel", "seed": seed, "inputs": inputs}, summary)


def cmd_classify_cube(args, cfg, seed):
    inputs = _inputs(model=args.model, cube=args.cube, mask=args.mask)
    ckpt = dataio.read_checkpoint(args.model)
    cube = dataio.read_cube(args.cube)
    labels, rgb = classify_cube(ckpt, cube)
    out = Path(args.out)
    dataio.write_mask(out / "labels.msk", labels)
    dataio.write_ppm(out / "overlay.ppm", rgb)
    plotting.save_rgb(rgb, out / "overlay.png")
    summary = {"label_counts": np.bincount(labels.ravel(), minlength=3).tolist()}
    if args.mask:
        truth = dataio.read_mask(args.mask)
        summary["agreement"] = float(np.mean(truth == labels))
    _finish(out, {"command": "classify-cube", "seed": seed, "inputs": inputs}, summary)


def _prune_config(cfg, args, seed, input_dim) -> PruneConfig:
    d = _section(cfg, "prune", {}, {
        "tau": args.tau, "max_retrains": args.max_retrains, "min_features": args.min_features,
        "rescale": args.rescale,
    })
    d["mlp"] = _mlp_config(cfg, args, seed, input_dim)
    return PruneConfig(**d)


def cmd_prune(args, cfg, seed):
    inputs = _inputs(train=args.train, val=args.val, model=args.model)
    train_ds, val_ds = dataio.read_pixels(args.train), dataio.read_pixels(args.val)
    pcfg = _prune_config(cfg, args, seed, train_ds.dims)
    network = None
    if args.model:
        init = dataio.read_checkpoint(args.model)
        if init.features != list(range(train_ds.dims)):
            raise ShapeError("initial model must use every band of the training data")
        stats = pipeline.NormStats(init.mean, init.std)
        network = init.network
    else:
        stats = pipeline.normalize_fit(train_ds)
    trn = pipeline.normalize_apply(stats, train_ds)
    van = pipeline.normalize_apply(stats, val_ds)

    def progress(state, entry):
        if entry.retrained:
            log.info("step %d: %d bands left, acc %.4f -> retrain #%d acc %.4f", entry.step,
                     len(state.features), entry.val_acc, state.retrain_count, entry.retrained_acc)

    state = run_prune(trn, van, pcfg, network=network, progress=progress)
    out = Path(args.out)
    dataio.write_prune_report(state.history, train_ds.dims, out)
    order = removal_order_map(state.history, train_ds.dims)
    plotting.plot_prune_curve(state.history, state.initial_acc, out / "prune_curve.png")
    plotting.plot_removal_order(order, out / "removal_order.png")
    ckpt = Checkpoint(state.network, stats.mean[state.features], stats.std[state.features],
                      state.features, train_ds.dims, {"prune": pcfg.to_dict()})
    dataio.write_checkpoint(out / "model.nnw", ckpt)
    _finish(out, {"command": "prune", "seed": seed, "inputs": inputs, "prune": pcfg.to_dict()},
            state.summary())
    if state.halt_reason == "diverged":
        raise DivergenceError("retraining diverged; partial prune report written")


def cmd_chips(args, cfg, seed):
    if len(args.cube) != len(args.mask):
        raise ShapeError("give one --mask per --cube")
    inputs = _inputs(**{f"cube{i}": c for i, c in enumerate(args.cube)},
                     **{f"mask{i}": m for i, m in enumerate(args.mask)})
    ch = _section(cfg, "chips", CHIP_DEFAULTS, {
        "size": args.size, "count": args.count, "min_nontrivial_frac": args.min_nontrivial,
    })
    n_src = len(args.cube)
    sets = []
    for i, (c, m) in enumerate(zip(args.cube, args.mask)):
        count = ch["count"] // n_src + (1 if i < ch["count"] % n_src else 0)
        sets.append(pipeline.make_chips(
            dataio.read_cube(c), dataio.read_mask(m), ch["size"], count,
            ch["min_nontrivial_frac"], seed=seed * 1000 + i,
            min_cell_pixels=ch["min_cell_pixels"], source=f"source{i}",
        ))
    chips = pipeline.ChipSet.concat(sets)
    out = Path(args.out)
    pipeline.write_chipset(out / "chips", chips)
    _finish(out, {"command": "chips", "seed": seed, "inputs": inputs, "chips": ch},
            {"chips": len(chips), "nontrivial_fraction": chips.nontrivial_fraction(ch["min_cell_pixels"])})


def cmd_train_mask(args, cfg, seed):
    inputs = _inputs(chips=args.chips)
    chips = pipeline.read_chipset(args.chips)
    d = _section(cfg, "cnn", CnnConfig().to_dict(), {
        "epochs": args.epochs, "batch_size": args.batch_size, "dropout": args.dropout,
        "widths": args.widths,
    })
    d.update(seed=seed, size=chips.size, bands=chips.bands)
    cnn = CnnConfig(**d)
    ckpt, history = fit_masker(chips, cnn)
    out = Path(args.out)
    dataio.write_checkpoint(out / "model.nnw", ckpt)
    _write_history(out / "history.csv", history)
    plotting.plot_training(history, out / "training.png", keys=("train_mse", "val_mse"))
    last = history[-1] if history else {}
    _finish(out, {"command": "train-mask", "seed": seed, "inputs": inputs, "cnn": cnn.to_dict()},
            {"epochs": len(history), "best_val_mse": min((h.get("val_mse", np.inf) for h in history), default=None),
             "final_val_l1": last.get("val_l1")})


def cmd_eval_mask(args, cfg, seed):
    inputs = _inputs(model=args.model, chips=args.chips)
    ckpt = dataio.read_checkpoint(args.model)
    chips = pipeline.read_chipset(args.chips)
    values = predict_values(ckpt, chips.cubes)
    l1 = eval_l1(ckpt, chips)
    out = Path(args.out)
    pred_dir = out / "predictions"
    for i, v in enumerate(values):
        dataio.write_mask(pred_dir / f"chip_{i:05d}.msk", MaskPrediction(v).labels)
        dataio.write_cube(pred_dir / f"chip_{i:05d}.hsc", v[..., None])
    plotting.plot_mask_examples(chips.cubes, chips.masks.astype(np.float32), values, out / "examples.png")
    per_chip = np.abs(values - chips.masks).mean(axis=(1, 2))
    rounded_acc = float(np.mean(np.clip(np.rint(values), 0, 2) == chips.masks))
    _finish(out, {"command": "eval-mask", "seed": seed, "inputs": inputs},
            {"mean_l1": l1, "chips": len(chips), "worst_chip_l1": float(per_chip.max()),
             "rounded_pixel_accuracy": rounded_acc})


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsfs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1, help="worker bound (runs are single-threaded)")
        p.add_argument("-o", "--out", required=True, help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("gen", cmd_gen, "render a synthetic scene")
    p.add_argument("--bands", type=int)
    p.add_argument("--informative", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--cells", type=int)
    p.add_argument("--marker-floor", type=float)
    p.add_argument("--spectra-seed", type=int,
                   help="seed for the class spectra, so several scenes can share them")

    p = add("pixelize", cmd_pixelize, "split a cube and mask into labelled pixels")
    p.add_argument("--cube", required=True)
    p.add_argument("--mask", required=True)

    p = add("balance", cmd_balance, "uniform random undersampling to equal class counts")
    p.add_argument("--pixels", required=True)

    p = add("split", cmd_split, "shuffled train/val/test split")
    p.add_argument("--pixels", required=True)
    p.add_argument("--train-frac", type=float)
    p.add_argument("--val-frac", type=float)
    p.add_argument("--test-frac", type=float)

    def mlp_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--dropout", type=float)
        p.add_argument("--optimizer", choices=("adam", "adadelta"))
        p.add_argument("--lr", type=float)

    p = add("train-pixel", cmd_train_pixel, "train the dense pixel classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    mlp_flags(p)

    p = add("eval-pixel", cmd_eval_pixel, "precision/recall/F1 and confusion matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--pixels", required=True)
    p.add_argument("--train", help="training pixels for the majority-class baseline")

    p = add("classify-cube", cmd_classify_cube, "label every pixel of a cube")
    p.add_argument("--model", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--mask", help="ground truth, for an agreement score")

    p = add("prune", cmd_prune, "iterative band pruning with retraining")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--model", help="trained full-band classifier to start from")
    p.add_argument("--tau", type=float)
    p.add_argument("--max-retrains", type=int)
    p.add_argument("--min-features", type=int)
    p.add_argument("--rescale", choices=("proportional", "fixed"))
    mlp_flags(p)

    p = add("chips", cmd_chips, "augmented chips for the masker")
    p.add_argument("--cube", action="append", required=True)
    p.add_argument("--mask", action="append", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--min-nontrivial", type=float)

    p = add("train-mask", cmd_train_mask, "train the convolutional masker")
    p.add_argument("--chips", required=True, help="chip directory with manifest.json")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--widths", type=int, nargs=5)

    p = add("eval-mask", cmd_eval_mask, "per-pixel L1 error of predicted masks")
    p.add_argument("--model", required=True)
    p.add_argument("--chips", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        seed = _seed(args, cfg)
        args.func(args, cfg, seed)
    except HsfsError as exc:
        print(f"hsfs {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, ValueError, KeyError) as exc:
        print(f"hsfs {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
