"""Little-endian binary formats and text reports.

======  =========================================================
HSC1    u32 H, W, B then H*W*B f32 in (row, col, band) order
MSK1    u32 H, W then H*W u8 labels (row-major), labels in {0, 1, 2}
PXD1    u32 N, D then N records of (u8 label, D f32)
NNW1    u32 header length, UTF-8 JSON header, f32 parameter blob
======  =========================================================

Every reader accepts a path or a binary file object and raises
:class:`BadMagicError`, :class:`TruncatedFileError` or
:class:`InconsistentSizeError` for the three ways a file can be malformed.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hsfs.errors import (
    BadMagicError,
    InconsistentSizeError,
    TruncatedFileError,
    ValidationError,
)
from hsfs.nn.layers import layer_from_config
from hsfs.nn.network import Network

U32_MAX = 2**32 - 1
N_LABELS = 3
LABEL_NAMES = ("BG", "N+", "N-")


@dataclass
class PixelDataset:
    """N labelled spectra. ``features`` is (N, D) float32, ``labels`` is (N,) uint8."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise InconsistentSizeError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "PixelDataset":
        return PixelDataset(self.features[idx], self.labels[idx])

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_LABELS)


@dataclass
class Checkpoint:
    """A network plus everything needed to feed it raw spectra."""

    network: Network
    mean: np.ndarray
    std: np.ndarray
    features: list[int]
    original_bands: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        self.features = [int(f) for f in self.features]
        f = np.asarray(self.features)
        if f.size and (np.any(np.diff(f) <= 0) or f[0] < 0 or f[-1] >= self.original_bands):
            raise ValidationError("retained features must be sorted, unique and < original_bands")


# -- low level helpers -------------------------------------------------------


def _open_read(src):
    if isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as fh:
            return fh.read()
    return src.read()


def _write(dst, payload: bytes):
    if isinstance(dst, (str, os.PathLike)):
        Path(dst).parent.mkdir(parents=True, exist_ok=True)
        with open(dst, "wb") as fh:
            fh.write(payload)
    else:
        dst.write(payload)


def _check_magic(buf: bytes, magic: bytes):
    if len(buf) < 4:
        raise TruncatedFileError(f"file too short for {magic.decode()} magic")
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {buf[:4]!r}")


def _u32s(buf: bytes, count: int, offset: int = 4):
    end = offset + 4 * count
    if len(buf) < end:
        raise TruncatedFileError("file truncated inside header")
    return struct.unpack_from(f"<{count}I", buf, offset), end


def _payload(buf: bytes, offset: int, nbytes: int) -> bytes:
    have = len(buf) - offset
    if have < nbytes:
        raise TruncatedFileError(f"payload truncated: expected {nbytes} bytes, found {have}")
    if have > nbytes:
        raise InconsistentSizeError(f"{have - nbytes} trailing bytes after declared payload")
    return buf[offset:]


def _dims(*dims):
    for d in dims:
        if not 0 <= int(d) <= U32_MAX:
            raise InconsistentSizeError(f"dimension {d} does not fit in u32")
    return struct.pack(f"<{len(dims)}I", *(int(d) for d in dims))


def validate_labels(labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) >= N_LABELS:
        raise ValidationError(f"label value {int(labels.max())} outside {{0, 1, 2}}")


# -- HSC1 --------------------------------------------------------------------


def write_cube(dst, cube: np.ndarray):
    cube = np.asarray(cube)
    if cube.ndim != 3 or cube.shape[2] < 1:
        raise InconsistentSizeError(f"cube must be (H, W, B>=1), got {cube.shape}")
    data = np.ascontiguousarray(cube, dtype="<f4")
    _write(dst, b"HSC1" + _dims(*cube.shape) + data.tobytes())


def read_cube(src) -> np.ndarray:
    buf = _open_read(src)
    _check_magic(buf, b"HSC1")
    (h, w, b), off = _u32s(buf, 3)
    if b < 1:
        raise InconsistentSizeError("cube must have at least one band")
    raw = _payload(buf, off, 4 * h * w * b)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(h, w, b)


# -- MSK1 --------------------------------------------------------------------


def write_mask(dst, mask: np.ndarray):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InconsistentSizeError(f"mask must be 2-D, got {mask.shape}")
    validate_labels(mask)
    _write(dst, b"MSK1" + _dims(*mask.shape) + np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_mask(src) -> np.ndarray:
    buf = _open_read(src)
    _check_magic(buf, b"MSK1")
    (h, w), off = _u32s(buf, 2)
    mask = np.frombuffer(_payload(buf, off, h * w), dtype=np.uint8).reshape(h, w).copy()
    validate_labels(mask)
    return mask


# -- PXD1 --------------------------------------------------------------------


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("x", "<f4", (d,))])


def write_pixels(dst, ds: PixelDataset):
    validate_labels(ds.labels)
    rec = np.empty(len(ds), dtype=_record_dtype(ds.dims))
    rec["label"] = ds.labels
    rec["x"] = ds.features
    _write(dst, b"PXD1" + _dims(len(ds), ds.dims) + rec.tobytes())


def read_pixels(src) -> PixelDataset:
    buf = _open_read(src)
    _check_magic(buf, b"PXD1")
    (n, d), off = _u32s(buf, 2)
    dt = _record_dtype(d)
    rec = np.frombuffer(_payload(buf, off, n * dt.itemsize), dtype=dt)
    ds = PixelDataset(rec["x"].astype(np.float32).reshape(n, d), rec["label"].copy())
    validate_labels(ds.labels)
    return ds


# -- NNW1 --------------------------------------------------------------------


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=np.float32).ravel()]


def checkpoint_header(ckpt: Checkpoint) -> dict:
    net = ckpt.network
    return {
        "architecture": net.architecture(),
        "normalization": {"mean": _floats(ckpt.mean), "std": _floats(ckpt.std)},
        "features": list(ckpt.features),
        "original_bands": int(ckpt.original_bands),
        "params": [
            {"layer": i, "name": name, "shape": list(p.shape)} for i, name, p in net.parameters()
        ],
        "meta": ckpt.meta,
    }


def write_checkpoint(dst, ckpt: Checkpoint):
    header = json.dumps(checkpoint_header(ckpt), sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for _, _, p in ckpt.network.parameters()
    )
    _write(dst, b"NNW1" + _dims(len(header)) + header + blob)


def read_checkpoint(src) -> Checkpoint:
    buf = _open_read(src)
    _check_magic(buf, b"NNW1")
    (hlen,), off = _u32s(buf, 1)
    if len(buf) < off + hlen:
        raise TruncatedFileError("checkpoint header truncated")
    try:
        header = json.loads(buf[off : off + hlen].decode("utf-8"))
        arch = header["architecture"]
        layers = [layer_from_config(c) for c in arch["layers"]]
        net = Network(layers, tuple(arch["input_shape"]), seed=arch.get("seed", 0))
    except (ValueError, KeyError, TypeError) as exc:
        raise InconsistentSizeError(f"malformed checkpoint header: {exc}") from exc
    params = list(net.parameters())
    declared = [(p["layer"], p["name"], tuple(p["shape"])) for p in header["params"]]
    if declared != [(i, n, a.shape) for i, n, a in params]:
        raise InconsistentSizeError("parameter table does not match architecture")
    blob = _payload(buf, off + hlen, 4 * sum(a.size for _, _, a in params))
    values = np.frombuffer(blob, dtype="<f4")
    pos = 0
    for _, _, a in params:
        a[...] = values[pos : pos + a.size].reshape(a.shape)
        pos += a.size
    norm = header["normalization"]
    return Checkpoint(
        net,
        np.array(norm["mean"], dtype=np.float32),
        np.array(norm["std"], dtype=np.float32),
        header["features"],
        header["original_bands"],
        header.get("meta", {}),
    )


# -- reports -----------------------------------------------------------------

CURVE_COLUMNS = (
    "step", "removed_count", "removed_feature_index", "val_accuracy", "retrained", "retrained_val_accuracy",
)


def write_prune_report(history, bands: int, out_dir) -> tuple[Path, Path]:
    """Write ``prune_curve.csv`` and ``removal_order.txt`` into ``out_dir``.

    ``history`` is a sequence of pruner steps (see ``hsfs.pruner.PruneStep``).
    """
    from hsfs.pruner import removal_order_map

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve = out_dir / "prune_curve.csv"
    with open(curve, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for h in history:
            post = "" if h.retrained_acc is None else f"{h.retrained_acc:.6f}"
            writer.writerow(
                [h.step, h.step + 1, h.removed, f"{h.val_acc:.6f}", int(h.retrained), post]
            )
    order_path = out_dir / "removal_order.txt"
    write_removal_order(order_path, removal_order_map(history, bands))
    return curve, order_path


def write_removal_order(dst, order: np.ndarray, per_row: int = 16):
    order = np.asarray(order, dtype=np.int64)
    lines = [
        "# removal step per band; bands still retained carry the sentinel value",
        f"bands {len(order)}",
        f"sentinel {len(order)}",
    ]
    for i in range(0, len(order), per_row):
        lines.append(" ".join(str(v) for v in order[i : i + per_row]))
    Path(dst).write_text("\n".join(lines) + "\n")


def read_removal_order(src) -> np.ndarray:
    values, bands = [], None
    for line in Path(src).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("bands"):
            bands = int(line.split()[1])
        elif not line.startswith("sentinel"):
            values.extend(int(v) for v in line.split())
    order = np.array(values, dtype=np.int64)
    if bands is None or len(order) != bands:
        raise InconsistentSizeError("removal order length does not match declared band count")
    return order


def read_prune_curve(src) -> list[dict]:
    with open(src, newline="") as fh:
        return list(csv.DictReader(fh))


def write_ppm(dst, rgb: np.ndarray):
    """Binary (P6) PPM, the simplest lossless RGB image format."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    _write(dst, f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(src) -> np.ndarray:
    buf = _open_read(src)
    stream = io.BytesIO(buf)
    if stream.readline().strip() != b"P6":
        raise BadMagicError("not a binary PPM")
    w, h = (int(v) for v in stream.readline().split())
    stream.readline()
    return np.frombuffer(stream.read(), dtype=np.uint8).reshape(h, w, 3)


def write_json(dst, obj):
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    Path(dst).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(src):
    return json.loads(Path(src).read_text())
