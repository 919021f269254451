"""Volume data model, raw+JSON file I/O, phantoms, slicing and augmentation.

Arrays are indexed ``[x, y, z]`` with shape ``(W, H, L)``. On disk the payload
is written x-fastest (Fortran order), little-endian.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError

FORMAT_VERSION = 1

_VOLUME_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("u1")


@dataclass
class CTVolume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ParameterError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMap:
    data: np.ndarray
    num_classes: int
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ParameterError(f"label map must be 3D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > self.num_classes):
            raise ParameterError(f"label values must lie in 0..{self.num_classes}")
        self.data = data.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Slice2D:
    data: np.ndarray
    index: int


@dataclass
class PhantomSpec:
    """Geometry and intensity model for synthetic multi-organ phantoms.

    Each organ is an axis-aligned ellipsoid. Centers are given as fractions of
    the grid, radii in voxels. Intensities use a CT-like scale (soft-tissue
    background, organs brighter) and are windowed to [0, 1] downstream.
    """

    num_classes: int = 3
    grid: Tuple[int, int, int] = (64, 64, 64)
    centers: Sequence[Sequence[float]] = (
        (0.30, 0.30, 0.35),
        (0.70, 0.30, 0.60),
        (0.50, 0.72, 0.45),
    )
    radii: Sequence[Sequence[float]] = ((9.0, 7.0, 8.0), (7.0, 9.0, 7.0), (8.0, 8.0, 6.0))
    center_jitter: float = 3.0
    radius_jitter: float = 0.15
    background_mean: float = -40.0
    class_means: Sequence[float] = (50.0, 130.0, 210.0)
    noise_std: float = 25.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def max_extents(self) -> np.ndarray:
        """(N, 2, 3) array of the widest box each class can occupy after jitter."""
        grid = np.asarray(self.grid, dtype=float)
        out = np.empty((self.num_classes, 2, 3))
        for n in range(self.num_classes):
            c = np.asarray(self.centers[n], dtype=float) * grid
            half = self.center_jitter + np.asarray(self.radii[n], dtype=float) * (1 + self.radius_jitter)
            out[n, 0] = c - half
            out[n, 1] = c + half
        return out

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ParameterError("num_classes must be >= 1")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ParameterError(f"bad grid {self.grid}")
        for name in ("centers", "radii", "class_means"):
            if len(getattr(self, name)) != self.num_classes:
                raise ParameterError(f"{name} must have {self.num_classes} entries")
        if min(min(r) for r in self.radii) <= 0:
            raise ParameterError("radii must be positive")
        if self.center_jitter < 0 or not 0 <= self.radius_jitter < 1 or self.noise_std < 0:
            raise ParameterError("jitter and noise parameters must be non-negative")
        if self.num_classes > 255:
            raise ParameterError("at most 255 classes fit the label payload")
        ext = self.max_extents()
        hi_limit = np.asarray(self.grid, dtype=float) - 1
        for n in range(self.num_classes):
            if np.any(ext[n, 0] < 0) or np.any(ext[n, 1] > hi_limit):
                raise ParameterError(f"class {n + 1} can leave the grid at maximal jitter")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                separated = np.any((ext[a, 1] < ext[b, 0]) | (ext[b, 1] < ext[a, 0]))
                if not separated:
                    raise ParameterError(f"classes {a + 1} and {b + 1} may overlap at maximal jitter")


@dataclass
class AugSpec:
    noise_sigmas: List[float] = field(default_factory=lambda: [0.5, 1.0, 1.5])
    rescale_factors: List[float] = field(default_factory=lambda: [0.9, 1.1])
    include_original: bool = True

    def num_variants(self) -> int:
        return int(self.include_original) + len(self.noise_sigmas) + len(self.rescale_factors)


# --------------------------------------------------------------------- file I/O


def _stem(path) -> str:
    path = os.fspath(path)
    for suffix in (".raw", ".json"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _write_pair(stem: str, payload: np.ndarray, meta: dict) -> None:
    Path(stem).parent.mkdir(parents=True, exist_ok=True)
    with open(stem + ".raw", "wb") as fh:
        fh.write(payload.ravel(order="F").tobytes())
    with open(stem + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_pair(stem: str, dtype: np.dtype) -> Tuple[np.ndarray, dict]:
    try:
        with open(stem + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar {stem}.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar {stem}.json: {exc}") from exc
    try:
        dims = tuple(int(d) for d in meta["dims"])
        declared = np.dtype(meta["dtype"]).newbyteorder("<")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"sidecar {stem}.json lacks valid dims/dtype") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"sidecar {stem}.json declares bad dims {dims}")
    if declared != dtype:
        raise FormatError(f"sidecar {stem}.json declares dtype {meta['dtype']}, expected {dtype.name}")
    if meta.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported order {meta.get('order')!r}")
    try:
        raw = Path(stem + ".raw").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing payload {stem}.raw") from exc
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload {stem}.raw has {len(raw)} bytes, sidecar dims {dims} require {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    return np.array(arr, order="C"), meta


def save_volume(v: CTVolume, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "dims": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": "float32",
        "order": "x-fastest",
        "id": v.id,
    }
    _write_pair(_stem(path), v.data.astype(_VOLUME_DTYPE), meta)


def load_volume(path) -> CTVolume:
    stem = _stem(path)
    data, meta = _read_pair(stem, _VOLUME_DTYPE)
    try:
        return CTVolume(data, tuple(meta.get("spacing", (1.0, 1.0, 1.0))), meta.get("id", ""))
    except ParameterError as exc:
        raise FormatError(f"{stem}: {exc}") from exc


def save_labels(y: LabelMap, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "dims": list(y.shape),
        "dtype": "uint8",
        "order": "x-fastest",
        "num_classes": int(y.num_classes),
        "id": y.id,
    }
    _write_pair(_stem(path), y.data.astype(_LABEL_DTYPE), meta)


def load_labels(path) -> LabelMap:
    stem = _stem(path)
    data, meta = _read_pair(stem, _LABEL_DTYPE)
    try:
        return LabelMap(data, int(meta["num_classes"]), meta.get("id", ""))
    except (KeyError, ParameterError) as exc:
        raise FormatError(f"{stem}: {exc}") from exc


@dataclass
class ManifestEntry:
    id: str
    volume_path: str
    label_path: str
    split: str


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    rows = [
        {"id": e.id, "volume_path": e.volume_path, "label_path": e.label_path, "split": e.split}
        for e in entries
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")


def read_manifest(path) -> List[ManifestEntry]:
    """Read a manifest; relative paths are resolved against its directory."""
    base = Path(path).parent
    try:
        with open(path) as fh:
            rows = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"manifest {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    out = []
    for row in rows:
        try:
            out.append(
                ManifestEntry(
                    id=row["id"],
                    volume_path=str(base / row["volume_path"]),
                    label_path=str(base / row["label_path"]),
                    split=row["split"],
                )
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest {path}: malformed entry {row!r}") from exc
    return out


# ------------------------------------------------------------------ operations


def slice_axial(v) -> List[Slice2D]:
    data = v.data if isinstance(v, CTVolume) else np.asarray(v)
    return [Slice2D(data=data[:, :, z], index=z) for z in range(data.shape[2])]


def stack_slices(slices: Sequence[Slice2D]) -> np.ndarray:
    ordered = sorted(slices, key=lambda s: s.index)
    return np.stack([s.data for s in ordered], axis=2)


def normalize_intensity(v: CTVolume, lo: float, hi: float) -> CTVolume:
    if not lo < hi:
        raise ParameterError(f"window requires lo < hi, got lo={lo}, hi={hi}")
    data = (np.clip(v.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return CTVolume(data.astype(np.float32), v.spacing, v.id)


def synth_phantom(spec: PhantomSpec, seed: int) -> Tuple[CTVolume, LabelMap]:
    spec.validate()
    rng = np.random.default_rng(seed)
    grid = np.asarray(spec.grid, dtype=float)
    xs, ys, zs = (np.arange(d, dtype=float) for d in spec.grid)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")

    labels = np.zeros(spec.grid, dtype=np.uint8)
    for n in range(spec.num_classes):
        center = np.asarray(spec.centers[n], dtype=float) * grid
        center = center + rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
        radii = np.asarray(spec.radii[n], dtype=float)
        radii = radii * (1 + rng.uniform(-spec.radius_jitter, spec.radius_jitter, 3))
        inside = (
            ((X - center[0]) / radii[0]) ** 2
            + ((Y - center[1]) / radii[1]) ** 2
            + ((Z - center[2]) / radii[2]) ** 2
        ) <= 1.0
        labels[inside] = n + 1

    means = np.concatenate([[spec.background_mean], np.asarray(spec.class_means, dtype=float)])
    data = means[labels]
    if spec.noise_std > 0:
        data = data + rng.normal(0.0, spec.noise_std, spec.grid)
    sid = f"phantom_{seed}"
    return CTVolume(data, spec.spacing, sid), LabelMap(labels, spec.num_classes, sid)


def _rescale(v: CTVolume, y: LabelMap, factor: float, tag: str) -> Tuple[CTVolume, LabelMap]:
    shape = tuple(max(1, int(round(d * factor))) for d in v.shape)
    zoom = [s / d for s, d in zip(shape, v.shape)]
    data = ndimage.zoom(v.data, zoom, order=1, mode="nearest", grid_mode=True)
    labels = ndimage.zoom(y.data, zoom, order=0, mode="nearest", grid_mode=True)
    spacing = tuple(s / z for s, z in zip(v.spacing, zoom))
    return (
        CTVolume(data, spacing, f"{v.id}_{tag}"),
        LabelMap(labels, y.num_classes, f"{y.id}_{tag}"),
    )


def augment(v: CTVolume, y: LabelMap, spec: AugSpec, seed: int) -> List[Tuple[CTVolume, LabelMap]]:
    """Expand one sample into noise and rescale variants.

    Order is fixed: original, one variant per noise sigma, one per rescale
    factor. Noise variants keep the labels; rescaled ones change the grid.
    """
    if v.shape != y.shape:
        raise ParameterError(f"volume shape {v.shape} != label shape {y.shape}")
    for f in spec.rescale_factors:
        if f <= 0:
            raise ParameterError(f"rescale factor must be positive, got {f}")
    for s in spec.noise_sigmas:
        if s < 0:
            raise ParameterError(f"noise sigma must be non-negative, got {s}")

    out = []
    if spec.include_original:
        out.append((CTVolume(v.data.copy(), v.spacing, v.id), LabelMap(y.data.copy(), y.num_classes, y.id)))
    streams = np.random.SeedSequence(seed).spawn(len(spec.noise_sigmas))
    for sigma, ss in zip(spec.noise_sigmas, streams):
        rng = np.random.default_rng(ss)
        noisy = v.data + rng.normal(0.0, sigma, v.shape).astype(np.float32)
        tag = f"noise{sigma:g}"
        out.append((CTVolume(noisy, v.spacing, f"{v.id}_{tag}"), LabelMap(y.data.copy(), y.num_classes, f"{y.id}_{tag}")))
    for f in spec.rescale_factors:
        out.append(_rescale(v, y, f, f"scale{f:g}"))
    return out


def fit_to_grid(arr: np.ndarray, dims: Sequence[int], mode: str = "constant") -> np.ndarray:
    """Center-crop or pad ``arr`` to ``dims``; ``mode`` is passed to ``np.pad``."""
    src, pad = [], []
    for have, want in zip(arr.shape, dims):
        if have >= want:
            off = (have - want) // 2
            src.append(slice(off, off + want))
            pad.append((0, 0))
        else:
            off = (want - have) // 2
            src.append(slice(0, have))
            pad.append((off, want - have - off))
    return np.pad(arr[tuple(src)], pad, mode=mode)


def load_sample(entry: ManifestEntry) -> Tuple[CTVolume, LabelMap]:
    v = load_volume(entry.volume_path)
    y = load_labels(entry.label_path)
    if v.shape != y.shape:
        raise FormatError(f"sample {entry.id}: volume {v.shape} and labels {y.shape} disagree")
    return v, y

