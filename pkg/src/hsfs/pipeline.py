"""Dataset construction: pixelization, balancing, splits, normalization, chips."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hsfs import dataio
from hsfs.dataio import N_LABELS, PixelDataset
from hsfs.errors import InfeasibleError, ShapeError

TRANSFORMS = ("crop", "flip_h", "flip_v", "rot90", "rot180", "rot270")


def pixelize(cube: np.ndarray, mask: np.ndarray) -> PixelDataset:
    """One record per pixel in row-major order."""
    if cube.ndim != 3 or cube.shape[:2] != mask.shape:
        raise ShapeError(f"cube {cube.shape} and mask {mask.shape} do not align")
    h, w, b = cube.shape
    return PixelDataset(cube.reshape(h * w, b), mask.reshape(h * w))


def undersample_uniform(ds: PixelDataset, seed: int) -> PixelDataset:
    """Draw every class down to the smallest class count, without replacement.

    Selected records keep their original relative order.
    """
    counts = ds.counts()
    if np.any(counts == 0):
        missing = [dataio.LABEL_NAMES[k] for k in np.flatnonzero(counts == 0)]
        raise InfeasibleError(f"cannot balance: no samples of class {', '.join(missing)}")
    m = int(counts.min())
    rng = np.random.default_rng(seed)
    keep = []
    for k in range(N_LABELS):
        idx = np.flatnonzero(ds.labels == k)
        keep.append(rng.choice(idx, size=m, replace=False))
    return ds.subset(np.sort(np.concatenate(keep)))


@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(not 0.0 < f < 1.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must lie in (0, 1) and sum to 1, got {fr}")


def split_indices(n: int, spec: SplitSpec):
    if n < 10:
        raise InfeasibleError(f"need at least 10 records to split, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_val = math.floor(n * spec.val)
    n_test = math.floor(n * spec.test)
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split(ds: PixelDataset, spec: SplitSpec):
    """Shuffled train/val/test partition; rounding remainder goes to train."""
    return tuple(ds.subset(idx) for idx in split_indices(len(ds), spec))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def restrict(self, features) -> "NormStats":
        return NormStats(self.mean[features], self.std[features])


def fit_channel_stats(x: np.ndarray) -> NormStats:
    """Per-channel z-score stats over every axis but the last.

    Channels with std below 1e-8 get mean 0 and std 1, so they pass through unchanged.
    """
    flat = np.asarray(x).reshape(-1, np.asarray(x).shape[-1]).astype(np.float64)
    if flat.shape[0] == 0:
        raise InfeasibleError("cannot fit normalization on an empty dataset")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    const = std < 1e-8
    mean[const] = 0.0
    std[const] = 1.0
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def normalize_fit(train: PixelDataset) -> NormStats:
    return fit_channel_stats(train.features)


def normalize_apply(stats: NormStats, ds: PixelDataset) -> PixelDataset:
    return PixelDataset(stats.apply(ds.features), ds.labels)


# -- chips -------------------------------------------------------------------


def apply_transform(arr: np.ndarray, name: str) -> np.ndarray:
    """Apply a named transform to the two leading (spatial) axes."""
    if name == "crop":
        out = arr
    elif name == "flip_h":
        out = arr[:, ::-1]
    elif name == "flip_v":
        out = arr[::-1]
    elif name.startswith("rot"):
        out = np.rot90(arr, k=int(name[3:]) // 90, axes=(0, 1))
    else:
        raise ValueError(f"unknown transform {name!r}")
    return np.ascontiguousarray(out)


@dataclass
class ChipSet:
    cubes: np.ndarray  # (n, S, S, B) float32
    masks: np.ndarray  # (n, S, S) uint8
    provenance: list = field(default_factory=list)  # {"source", "row", "col", "transform"}

    def __len__(self):
        return len(self.masks)

    @property
    def size(self) -> int:
        return self.masks.shape[1]

    @property
    def bands(self) -> int:
        return self.cubes.shape[3]

    def subset(self, idx) -> "ChipSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ChipSet(self.cubes[idx], self.masks[idx], [self.provenance[i] for i in idx])

    def nontrivial_fraction(self, min_cell_pixels: int = 1) -> float:
        if not len(self):
            return 0.0
        return float(np.mean((self.masks > 0).sum(axis=(1, 2)) >= min_cell_pixels))

    @staticmethod
    def concat(sets: list["ChipSet"]) -> "ChipSet":
        return ChipSet(
            np.concatenate([s.cubes for s in sets]),
            np.concatenate([s.masks for s in sets]),
            [p for s in sets for p in s.provenance],
        )


def make_chips(
    cube: np.ndarray,
    mask: np.ndarray,
    size: int,
    count: int,
    min_nontrivial_frac: float = 0.9,
    seed: int = 0,
    min_cell_pixels: int = 1,
    source: str = "scene",
) -> ChipSet:
    """Rejection-sample augmented ``size`` x ``size`` chips.

    Offsets and transforms are uniform. Trivial (all-background) chips are
    accepted only while enough slots remain to still meet the non-trivial
    quota. Gives up after ``100 * count`` draws.
    """
    h, w, b = cube.shape
    if mask.shape != (h, w):
        raise ShapeError(f"cube {cube.shape} and mask {mask.shape} do not align")
    if size % 2 or size < 2:
        raise ShapeError(f"chip size must be even, got {size}")
    if size > min(h, w):
        raise ShapeError(f"chip size {size} exceeds image {h}x{w}")
    need = math.ceil(min_nontrivial_frac * count - 1e-9)
    if need > 0 and np.count_nonzero(mask) < min_cell_pixels:
        raise InfeasibleError("mask has no cells, so no chip can be non-trivial")
    rng = np.random.default_rng(seed)
    cubes = np.empty((count, size, size, b), dtype=np.float32)
    masks = np.empty((count, size, size), dtype=np.uint8)
    prov = []
    trivial_budget = count - need
    n = 0
    for _ in range(100 * count):
        if n == count:
            break
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        t = TRANSFORMS[int(rng.integers(len(TRANSFORMS)))]
        m = mask[r : r + size, c : c + size]
        if np.count_nonzero(m) < min_cell_pixels:
            if trivial_budget == 0:
                continue
            trivial_budget -= 1
        cubes[n] = apply_transform(cube[r : r + size, c : c + size], t)
        masks[n] = apply_transform(m, t)
        prov.append({"source": source, "row": r, "col": c, "transform": t})
        n += 1
    if n < count:
        raise InfeasibleError(f"only {n} of {count} chips met the non-trivial quota")
    return ChipSet(cubes, masks, prov)


def write_chipset(out_dir, chips: ChipSet):
    """Paired HSC1/MSK1 files plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(chips)):
        stem = f"chip_{i:05d}"
        dataio.write_cube(out_dir / f"{stem}.hsc", chips.cubes[i])
        dataio.write_mask(out_dir / f"{stem}.msk", chips.masks[i])
        entries.append({"cube": f"{stem}.hsc", "mask": f"{stem}.msk", **chips.provenance[i]})
    dataio.write_json(out_dir / "manifest.json", {"size": chips.size, "bands": chips.bands, "chips": entries})


def read_chipset(src_dir) -> ChipSet:
    src_dir = Path(src_dir)
    manifest = dataio.read_json(src_dir / "manifest.json")
    entries = manifest["chips"]
    s, b = manifest["size"], manifest["bands"]
    cubes = np.empty((len(entries), s, s, b), dtype=np.float32)
    masks = np.empty((len(entries), s, s), dtype=np.uint8)
    prov = []
    for i, e in enumerate(entries):
        cubes[i] = dataio.read_cube(src_dir / e["cube"])
        masks[i] = dataio.read_mask(src_dir / e["mask"])
        prov.append({k: e[k] for k in ("source", "row", "col", "transform")})
    return ChipSet(cubes, masks, prov)
