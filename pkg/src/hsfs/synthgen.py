"""Synthetic hyperspectral scenes with planted class-discriminative bands.

Each class has a spectrum built from Gaussian peaks. N+ and N- share every
broad peak; they differ only through narrow lines at a handful of
"informative" bands, so the bands a good pruner should keep are known.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from hsfs.errors import InfeasibleError

BG, NPLUS, NMINUS = 0, 1, 2
LINE_WIDTH = 0.35


@dataclass
class ClassSpectrum:
    label: int
    peaks: list = field(default_factory=list)  # (center, width, amplitude)
    baseline: float = 0.0

    def __post_init__(self):
        self.peaks = [tuple(float(v) for v in p) for p in self.peaks]
        if any(a < 0 for _, _, a in self.peaks):
            raise ValueError("peak amplitudes must be non-negative")

    def render(self, bands: int) -> np.ndarray:
        x = np.arange(bands, dtype=np.float64)
        s = np.full(bands, self.baseline, dtype=np.float64)
        for center, width, amp in self.peaks:
            s += amp * np.exp(-0.5 * ((x - center) / width) ** 2)
        return s


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    bands: int = 64
    n_cells: int = 12
    radius_range: tuple = (4.0, 7.0)
    spectra: dict = field(default_factory=dict)  # label -> ClassSpectrum
    noise_std: float = 0.08
    mixture: tuple = (0.5, 0.5)  # fraction of cells that are N+, N-
    seed: int = 0
    edge_intensity: float = 0.3  # relative brightness at a cell's rim
    brightness_range: tuple = (0.4, 0.8)

    def __post_init__(self):
        if len(self.spectra) and set(self.spectra) != {BG, NPLUS, NMINUS}:
            raise ValueError("spectra must cover BG, N+ and N-")
        if self.radius_range[0] <= 0 or self.radius_range[0] > self.radius_range[1]:
            raise ValueError(f"bad radius range {self.radius_range}")
        if 2 * self.radius_range[0] + 2 > min(self.height, self.width):
            raise InfeasibleError("cells do not fit in the frame")
        if abs(sum(self.mixture) - 1.0) > 1e-9:
            raise ValueError("class mixture must sum to 1")

    def class_spectra(self) -> np.ndarray:
        """(3, B) array of noiseless spectra indexed by label."""
        return np.stack([self.spectra[k].render(self.bands) for k in (BG, NPLUS, NMINUS)])

    @property
    def informative_channels(self) -> list[int]:
        s = self.class_spectra()
        return [int(c) for c in np.flatnonzero(np.abs(s[NPLUS] - s[NMINUS]) > 3 * self.noise_std)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spectra"] = {str(k): asdict(v) for k, v in self.spectra.items()}
        d["radius_range"] = list(self.radius_range)
        d["mixture"] = list(self.mixture)
        d["brightness_range"] = list(self.brightness_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["spectra"] = {
            int(k): ClassSpectrum(v["label"], v["peaks"], v["baseline"]) for k, v in d["spectra"].items()
        }
        for key in ("radius_range", "mixture", "brightness_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class Scene(NamedTuple):
    cube: np.ndarray
    mask: np.ndarray
    informative_channels: list
    cells: list  # dicts with center, axes, angle, label, area


def _pick_informative(rng, bands: int, n: int) -> list[int]:
    lo, hi = (2, bands - 2) if bands >= 8 else (0, bands)
    for spacing in (3, 2, 1):
        candidates = np.arange(lo, hi)
        chosen: list[int] = []
        for c in rng.permutation(candidates):
            if all(abs(int(c) - o) >= spacing for o in chosen):
                chosen.append(int(c))
                if len(chosen) == n:
                    return sorted(chosen)
    raise InfeasibleError(f"cannot place {n} informative bands in {bands}")


def default_spec(
    bands: int = 64,
    n_informative: int = 8,
    seed: int = 0,
    height: int = 64,
    width: int = 64,
    noise_std: float = 0.08,
    separation: float = 6.0,
    n_cells: int = 12,
    marker_floor: float = 0.5,
    edge_intensity: float = 0.3,
    brightness_range: tuple = (0.4, 0.8),
    spectra_seed: int | None = None,
) -> SceneSpec:
    """Standard scene: four shared emission peaks plus planted marker lines.

    ``separation`` is the N+/N- line height difference in units of
    ``noise_std``. Markers alternate between N+ and N- so each class has its
    own lines; with ``marker_floor`` > 0 the other class also shows a weaker
    line there, at that fraction of the full height.

    Marker positions come from ``spectra_seed`` (default ``seed``), so several
    scenes can share spectra while differing in layout and noise.
    """
    if bands < 1 or not 0 <= n_informative < bands:
        raise InfeasibleError(f"need 0 <= n_informative < bands, got {n_informative}, {bands}")
    if not 0.0 <= marker_floor < 1.0:
        raise ValueError(f"marker_floor must lie in [0, 1), got {marker_floor}")
    if separation < 5.0:
        raise InfeasibleError("marker lines must exceed five noise standard deviations")
    rng = np.random.default_rng(seed if spectra_seed is None else spectra_seed)
    shared = [
        (0.15 * bands, 0.06 * bands, 0.6),
        (0.40 * bands, 0.08 * bands, 1.0),
        (0.62 * bands, 0.05 * bands, 0.8),
        (0.85 * bands, 0.07 * bands, 0.5),
    ]
    markers = _pick_informative(rng, bands, n_informative) if n_informative else []
    high = separation * noise_std / (1.0 - marker_floor)
    low = marker_floor * high
    plus = [(c, LINE_WIDTH, high if k % 2 == 0 else low) for k, c in enumerate(markers)]
    minus = [(c, LINE_WIDTH, low if k % 2 == 0 else high) for k, c in enumerate(markers)]
    spectra = {
        BG: ClassSpectrum(BG, [(0.5 * bands, bands, 0.03)], baseline=0.1),
        NPLUS: ClassSpectrum(NPLUS, shared + plus, baseline=0.1),
        NMINUS: ClassSpectrum(NMINUS, shared + minus, baseline=0.1),
    }
    spec = SceneSpec(height=height, width=width, bands=bands, n_cells=n_cells,
                     spectra=spectra, noise_std=noise_std, seed=seed,
                     edge_intensity=edge_intensity, brightness_range=tuple(brightness_range))
    if len(spec.informative_channels) != n_informative:
        raise InfeasibleError("marker lines overlap; informative band count is off")
    return spec


def _place_cells(spec: SceneSpec, rng) -> list[dict]:
    n_plus = int(round(spec.n_cells * spec.mixture[0]))
    labels = rng.permutation([NPLUS] * n_plus + [NMINUS] * (spec.n_cells - n_plus))
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    rows, cols = np.mgrid[0 : spec.height, 0 : spec.width]
    cells = []
    for label in labels:
        for _ in range(1000):
            a, b = rng.uniform(*spec.radius_range, size=2)
            angle = rng.uniform(0, np.pi)
            reach = max(a, b) + 1
            if 2 * reach >= min(spec.height, spec.width):
                continue
            cy = rng.uniform(reach, spec.height - reach)
            cx = rng.uniform(reach, spec.width - reach)
            ca, sa = np.cos(angle), np.sin(angle)
            u = (cols - cx) * ca + (rows - cy) * sa
            v = -(cols - cx) * sa + (rows - cy) * ca
            rho2 = (u / a) ** 2 + (v / b) ** 2
            support = rho2 <= 1.0
            # keep a one-pixel gap so neighbouring cells never touch
            halo = ((u / (a + 1)) ** 2 + (v / (b + 1)) ** 2) <= 1.0
            if support.sum() == 0 or np.any(halo & occupied):
                continue
            occupied |= support
            cells.append({
                "center": [float(cy), float(cx)], "axes": [float(a), float(b)],
                "angle": float(angle), "label": int(label), "area": int(support.sum()),
                "brightness": float(rng.uniform(*spec.brightness_range)),
                "_support": support, "_rho2": rho2,
            })
            break
        else:
            raise InfeasibleError(f"could not place {spec.n_cells} non-overlapping cells")
    return cells


def render_scene(spec: SceneSpec) -> Scene:
    """Render a cube and its exact label mask from ``spec``.

    Cell pixels get ``class_spectrum * intensity + noise`` where intensity
    falls off quadratically from the cell centre to ``edge_intensity`` at
    the rim; background pixels get the background spectrum plus noise.
    """
    rng = np.random.default_rng(spec.seed)
    spectra = spec.class_spectra()
    cells = _place_cells(spec, rng)
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    intensity = np.zeros((spec.height, spec.width))
    for cell in cells:
        support, rho2 = cell.pop("_support"), cell.pop("_rho2")
        mask[support] = cell["label"]
        falloff = 1.0 - (1.0 - spec.edge_intensity) * rho2[support]
        intensity[support] = cell["brightness"] * falloff
    cube = np.where(
        (mask == BG)[..., None],
        spectra[BG],
        spectra[mask] * intensity[..., None],
    )
    cube = cube + rng.normal(0.0, spec.noise_std, size=cube.shape)
    cube = np.maximum(cube, 0.0).astype(np.float32)
    return Scene(cube, mask, spec.informative_channels, cells)
