"""Acceptance criteria, one test per criterion.

Each test records its measurements through the ``criterion`` fixture, which
prints a single PASS/FAIL line per criterion (also repeated in the terminal
summary), and then asserts every check.
"""

import io
import json
import time
from pathlib import Path

import numpy as np

from hsfs import cli, dataio
from hsfs.classifier import MlpConfig, build_mlp, evaluate, fit_pixel_classifier
from hsfs.dataio import Checkpoint, PixelDataset
from hsfs.errors import BadMagicError, TruncatedFileError
from hsfs.masker import FULL_SCALE_WIDTHS, CnnConfig, build_cnn, eval_l1, fit_masker, layer_shapes
from hsfs.nn import Conv2D, Dense, Dropout, MaxPool2, Network, ReLU, Softmax, Upsample2, grad_check
from hsfs.pipeline import (
    ChipSet,
    SplitSpec,
    make_chips,
    normalize_apply,
    normalize_fit,
    pixelize,
    split,
    split_indices,
    undersample_uniform,
)
from hsfs.pruner import PruneConfig, drop_input, run_prune, worthiness, zero_input_column
from hsfs.synthgen import default_spec, render_scene

SCENE_SEED = 3
# Chip scenes share class spectra (spectra_seed) but differ in layout; the
# held-out chips come from scenes never seen in training.
TRAIN_SCENES = range(101, 111)
TEST_SCENES = range(901, 905)


def test_criterion_1_gradient_correctness(criterion):
    log = criterion(1, "gradient correctness")
    t0 = time.perf_counter()
    worst = {"dense+dropout+softmax/CE": 0.0, "conv+pool+upsample+dropout/MSE": 0.0}
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n_in = int(rng.integers(3, 9))
        dense = Network([Dense(n_in, 6, rng), ReLU(), Dropout(0.5), Dense(6, 3, rng), Softmax()], (n_in,))
        r = grad_check(dense, rng.normal(size=(4, n_in)), rng.integers(0, 3, 4), loss="cross_entropy",
                       check_input=True)
        worst["dense+dropout+softmax/CE"] = max(worst["dense+dropout+softmax/CE"], r.worst)
        checked += r.checked
        spatial = Network([Conv2D(2, 3, rng), ReLU(), MaxPool2(), Dropout(0.5), Upsample2(), Conv2D(3, 1, rng)],
                          (6, 6, 2))
        r = grad_check(spatial, rng.normal(size=(2, 6, 6, 2)), rng.normal(size=(2, 6, 6, 1)), loss="mse",
                       check_input=True)
        worst["conv+pool+upsample+dropout/MSE"] = max(worst["conv+pool+upsample+dropout/MSE"], r.worst)
        checked += r.checked
    elapsed = time.perf_counter() - t0
    for path, err in worst.items():
        log.check(err < 1e-4, f"{path} max rel err {err:.2e} (< 1e-4)")
    log.check(checked > 0, f"{checked} entries over 20 seeds")
    log.check(elapsed < 60, f"{elapsed:.1f} s (< 60 s)")
    log.assert_all()


def test_criterion_2_pruning_equivalence(criterion):
    log = criterion(2, "pruning equivalence")
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        dims = int(rng.integers(2, 33))
        net = build_mlp(MlpConfig(input_dim=dims, hidden=(16, 12), seed=seed))
        for _, _, p in net.parameters():
            p[...] = rng.normal(size=p.shape)
        x = rng.normal(size=(100, dims)).astype(np.float32)
        j = int(rng.integers(dims))
        zeroed = zero_input_column(net, j).predict(x)
        dropped = drop_input(net, j).predict(np.delete(x, j, axis=1))
        mismatches += zeroed.tobytes() != dropped.tobytes()
    elapsed = time.perf_counter() - t0
    log.check(mismatches == 0, f"{mismatches}/50 nets with differing logits")
    log.check(elapsed < 10, f"{elapsed:.1f} s (< 10 s)")
    log.assert_all()


def test_criterion_3_greedy_order(criterion):
    log = criterion(3, "greedy order")
    t0 = time.perf_counter()
    wrong = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        dims = int(rng.integers(2, 17))
        net = build_mlp(MlpConfig(input_dim=dims, hidden=(8, 6), seed=seed))
        W = net.first_dense().params["W"]
        # round to a coarse grid so some columns tie exactly
        W[...] = np.round(rng.normal(size=W.shape))
        if dims > 3:
            W[:, 3] = W[:, 1]
        ds = PixelDataset(rng.normal(size=(20, dims)), rng.integers(0, 3, 20))
        gamma0 = worthiness(net)
        expected = np.argsort(gamma0, kind="stable")[:-1].tolist()
        state = run_prune(ds, ds, PruneConfig(tau=1.0, min_features=1), network=net)
        wrong += [h.removed for h in state.history] != expected or state.retrain_count != 0
    elapsed = time.perf_counter() - t0
    log.check(wrong == 0, f"{wrong}/10 nets deviate from stable argsort of gamma")
    log.check(elapsed < 5, f"{elapsed:.1f} s (< 5 s)")
    log.assert_all()


def test_criterion_4_synthetic_classification(criterion):
    log = criterion(4, "synthetic classification")
    t0 = time.perf_counter()
    scene = render_scene(default_spec(64, 8, seed=SCENE_SEED))
    ds = undersample_uniform(pixelize(scene.cube, scene.mask), seed=SCENE_SEED)
    train, val, test = split(ds, SplitSpec(seed=SCENE_SEED))
    ckpt, _ = fit_pixel_classifier(train, val, MlpConfig(input_dim=64, seed=SCENE_SEED))
    acc = evaluate(ckpt.network, normalize_apply(normalize_fit(train), test)).accuracy
    elapsed = time.perf_counter() - t0
    log.check(acc >= 0.97, f"test acc {acc:.4f} (>= 0.97)")
    log.check(elapsed < 180, f"{elapsed:.1f} s (< 180 s)")
    log.assert_all()


def test_criterion_5_synthetic_pruning(criterion):
    log = criterion(5, "synthetic pruning")
    t0 = time.perf_counter()
    scene = render_scene(default_spec(64, 8, seed=SCENE_SEED))
    ds = undersample_uniform(pixelize(scene.cube, scene.mask), seed=SCENE_SEED)
    train, val, _ = split(ds, SplitSpec(seed=SCENE_SEED))
    stats = normalize_fit(train)
    cfg = PruneConfig(tau=0.005, max_retrains=20, mlp=MlpConfig(input_dim=64, seed=SCENE_SEED))
    state = run_prune(normalize_apply(stats, train), normalize_apply(stats, val), cfg)
    elapsed = time.perf_counter() - t0
    removed = len(state.history)
    kept = sorted(set(state.features) & set(scene.informative_channels))
    log.check(removed >= 0.8 * 64, f"removed {removed}/64 (>= 52)")
    log.check(state.final_acc >= state.initial_acc - 0.02,
              f"val acc {state.initial_acc:.4f} -> {state.final_acc:.4f} (>= initial - 0.02)")
    log.check(len(kept) >= 6, f"{len(kept)}/8 planted bands kept (>= 6)")
    log.check(elapsed < 900, f"{elapsed:.1f} s (< 900 s)")
    log.assert_all()


def test_criterion_6_balancing_and_splitting(criterion):
    log = criterion(6, "balancing and splitting")
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    unequal = broken = 0
    for _ in range(1000):
        n, seed = int(rng.integers(10, 400)), int(rng.integers(2**31))
        labels = np.concatenate([[0, 1, 2], rng.integers(0, 3, n - 3)]).astype(np.uint8)
        ds = PixelDataset(rng.normal(size=(n, 2)), labels)
        counts = undersample_uniform(ds, seed).counts()
        unequal += len(set(counts.tolist())) != 1 or counts[0] != np.bincount(labels).min()
        parts = split_indices(n, SplitSpec(seed=seed))
        joined = np.concatenate(parts)
        broken += len(joined) != n or not np.array_equal(np.sort(joined), np.arange(n))
    elapsed = time.perf_counter() - t0
    log.check(unequal == 0, f"{unequal}/1000 unequal class counts")
    log.check(broken == 0, f"{broken}/1000 splits not a partition")
    log.check(elapsed < 5, f"{elapsed:.1f} s (< 5 s)")
    log.assert_all()


def chips_from(seeds, count):
    sets = []
    for s in seeds:
        scene = render_scene(default_spec(16, 4, seed=s, spectra_seed=0))
        sets.append(make_chips(scene.cube, scene.mask, 16, count, seed=s, source=f"scene{s}"))
    return ChipSet.concat(sets)


def test_criterion_7_masker(criterion):
    log = criterion(7, "masker desk-scale")
    t0 = time.perf_counter()
    train = chips_from(TRAIN_SCENES, 200)
    held_out = chips_from(TEST_SCENES, 150)
    ckpt, _ = fit_masker(train, CnnConfig(size=16, bands=16))
    l1 = eval_l1(ckpt, held_out)
    full = build_cnn(CnnConfig(size=48, bands=512, widths=FULL_SCALE_WIDTHS))
    convs = [shape for kind, shape in layer_shapes(full) if kind == "conv2d"]
    elapsed = time.perf_counter() - t0
    log.check(len(train) >= 2000, f"{len(train)} training chips")
    log.check(l1 < 0.15, f"held-out L1 {l1:.4f} (< 0.15) on {len(held_out)} chips")
    log.check(convs == [(48, 48, 128), (24, 24, 128), (12, 12, 64), (24, 24, 64), (48, 48, 1)],
              "48x48x512 stack shape-checks")
    log.check(elapsed < 1200, f"{elapsed:.1f} s (< 1200 s)")
    log.assert_all()


def _random_instances(rng):
    h, w, b = (int(v) for v in rng.integers(1, 9, 3))
    yield "HSC1", dataio.write_cube, dataio.read_cube, rng.normal(size=(h, w, b)).astype(np.float32)
    yield "MSK1", dataio.write_mask, dataio.read_mask, rng.integers(0, 3, (h, w)).astype(np.uint8)
    n, d = int(rng.integers(0, 30)), int(rng.integers(1, 10))
    yield "PXD1", dataio.write_pixels, dataio.read_pixels, PixelDataset(rng.normal(size=(n, d)),
                                                                        rng.integers(0, 3, n))
    dims = int(rng.integers(1, 8))
    net = build_mlp(MlpConfig(input_dim=dims, hidden=tuple(int(v) for v in rng.integers(1, 6, 2)),
                              seed=int(rng.integers(1000))))
    ckpt = Checkpoint(net, rng.normal(size=dims), rng.random(dims) + 0.1,
                      sorted(rng.choice(dims + 5, dims, replace=False).tolist()), dims + 5,
                      {"k": int(rng.integers(100))})
    yield "NNW1", dataio.write_checkpoint, dataio.read_checkpoint, ckpt


def test_criterion_8_format_roundtrips(criterion):
    log = criterion(8, "format round-trips")
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    failures = {"HSC1": 0, "MSK1": 0, "PXD1": 0, "NNW1": 0}
    distinct = {name: True for name in failures}
    for _ in range(500):
        for name, write, read, value in _random_instances(rng):
            buf = io.BytesIO()
            write(buf, value)
            raw = buf.getvalue()
            again = io.BytesIO()
            write(again, read(io.BytesIO(raw)))
            failures[name] += again.getvalue() != raw
            for corrupt, expected in ((b"ZZZZ" + raw[4:], BadMagicError), (raw[:-1], TruncatedFileError)):
                try:
                    read(io.BytesIO(corrupt))
                    distinct[name] = False
                except expected:
                    pass
                except Exception:
                    distinct[name] = False
    elapsed = time.perf_counter() - t0
    for name in failures:
        log.check(failures[name] == 0 and distinct[name],
                  f"{name} {500 - failures[name]}/500 exact, corruption errors distinct={distinct[name]}")
    log.check(elapsed < 10, f"{elapsed:.1f} s (< 10 s)")
    log.assert_all()


PIPELINE = [
    ["gen", "-o", "gen", "--config", "config.json"],
    ["pixelize", "-o", "pix", "--cube", "gen/scene.hsc", "--mask", "gen/scene.msk"],
    ["balance", "-o", "bal", "--pixels", "pix/pixels.pxd"],
    ["split", "-o", "split", "--pixels", "bal/balanced.pxd"],
    ["train-pixel", "-o", "mlp", "--train", "split/train.pxd", "--val", "split/val.pxd", "--config", "config.json"],
    ["eval-pixel", "-o", "evalp", "--model", "mlp/model.nnw", "--pixels", "split/test.pxd",
     "--train", "split/train.pxd"],
    ["classify-cube", "-o", "cls", "--model", "mlp/model.nnw", "--cube", "gen/scene.hsc",
     "--mask", "gen/scene.msk"],
    ["prune", "-o", "prune", "--train", "split/train.pxd", "--val", "split/val.pxd", "--config", "config.json"],
    ["chips", "-o", "chips", "--cube", "gen/scene.hsc", "--mask", "gen/scene.msk", "--config", "config.json"],
    ["train-mask", "-o", "cnn", "--chips", "chips/chips", "--config", "config.json"],
    ["eval-mask", "-o", "evalm", "--model", "cnn/model.nnw", "--chips", "chips/chips"],
]

SMALL_CONFIG = {
    "seed": 5,
    "scene": {"bands": 8, "informative": 2, "height": 32, "width": 32, "n_cells": 4},
    "mlp": {"hidden": [16, 16], "epochs": 3},
    "prune": {"tau": 0.01, "max_retrains": 2},
    "chips": {"size": 8, "count": 40},
    "cnn": {"widths": [4, 4, 4, 4, 1], "epochs": 2},
}


def _run_pipeline(root: Path, monkeypatch):
    root.mkdir()
    (root / "config.json").write_text(json.dumps(SMALL_CONFIG))
    monkeypatch.chdir(root)
    codes = [cli.main(argv + ["--seed", "5"]) for argv in PIPELINE]
    return codes, {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(criterion, tmp_path, monkeypatch, capsys):
    log = criterion(9, "determinism")
    codes_a, files_a = _run_pipeline(tmp_path / "a", monkeypatch)
    codes_b, files_b = _run_pipeline(tmp_path / "b", monkeypatch)
    capsys.readouterr()
    differ = sorted(name for name in files_a if files_a[name] != files_b.get(name))
    commands = {argv[0] for argv in PIPELINE}
    log.check(codes_a == codes_b == [0] * len(PIPELINE), f"exit codes {codes_a}")
    log.check(set(files_a) == set(files_b), f"{len(files_a)} files from {len(commands)} subcommands")
    log.check(not differ, f"{len(differ)} files differ {differ[:5]}")
    log.assert_all()
