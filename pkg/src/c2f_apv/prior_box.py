"""Corpus-level organ bounding boxes, their learned encoding, and crop/embed."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, MissingClassError, ParameterError

Dims = Tuple[int, int, int]


@dataclass(frozen=True)
class PriorBox:
    class_id: int
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ParameterError("box needs three center and three size values")
        if min(self.size) <= 0:
            raise ParameterError(f"box extents must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def voxel_bounds(self, dims: Dims) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
        """Inclusive integer index range of voxels whose centers lie in the box, clamped."""
        lo = tuple(max(0, math.ceil(v)) for v in self.lower)
        hi = tuple(min(d - 1, math.floor(v)) for v, d in zip(self.upper, dims))
        return lo, hi

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Which integer voxel coordinates (K, 3) lie inside the box."""
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)


@dataclass
class PriorBoxSet:
    boxes: Dict[int, PriorBox]
    grid: Dims

    @property
    def num_classes(self) -> int:
        return len(self.boxes)

    def __getitem__(self, n: int) -> PriorBox:
        return self.boxes[n]

    def padded(self, fraction: float) -> "PriorBoxSet":
        return PriorBoxSet({n: pad_box(b, fraction, self.grid) for n, b in self.boxes.items()}, self.grid)

    def to_json(self) -> list:
        return [
            {"class_id": n, "center": list(b.center), "size": list(b.size), "grid": list(self.grid)}
            for n, b in sorted(self.boxes.items())
        ]

    @classmethod
    def from_json(cls, rows: list) -> "PriorBoxSet":
        if not rows:
            raise FormatError("priors file holds no boxes")
        try:
            grids = {tuple(int(g) for g in r["grid"]) for r in rows}
            boxes = {int(r["class_id"]): PriorBox(int(r["class_id"]), r["center"], r["size"]) for r in rows}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed priors entry: {exc}") from exc
        if len(grids) != 1:
            raise FormatError(f"priors disagree on grid dims: {sorted(grids)}")
        return cls(boxes, grids.pop())


def save_priors(priors: PriorBoxSet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(priors.to_json(), fh, indent=2)
        fh.write("\n")


def load_priors(path) -> PriorBoxSet:
    try:
        with open(path) as fh:
            return PriorBoxSet.from_json(json.load(fh))
    except FileNotFoundError as exc:
        raise FormatError(f"priors file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"priors file {path} is not valid JSON: {exc}") from exc


def _class_extent(mask: np.ndarray):
    """Per-axis (min, max) of the True voxels, or None when empty."""
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        if idx.size == 0:
            return None
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]))
    return np.asarray(lo), np.asarray(hi)


def compute_prior_boxes(labels: Sequence, num_classes: int) -> PriorBoxSet:
    """Union of per-sample organ extents over a training corpus, one box per class."""
    if num_classes < 1:
        raise ParameterError("num_classes must be >= 1")
    arrays = [np.asarray(y if isinstance(y, np.ndarray) else y.data) for y in labels]
    if not arrays:
        raise ParameterError("no label maps given")
    dims = arrays[0].shape
    if any(a.shape != dims for a in arrays):
        raise ParameterError("label maps must share grid dims")

    boxes = {}
    for n in range(1, num_classes + 1):
        lo = np.full(3, np.iinfo(np.int64).max)
        hi = np.full(3, -1)
        for a in arrays:
            ext = _class_extent(a == n)
            if ext is None:
                continue
            lo = np.minimum(lo, ext[0])
            hi = np.maximum(hi, ext[1])
        if hi[0] < 0:
            raise MissingClassError(n)
        boxes[n] = PriorBox(n, tuple((lo + hi) / 2.0), tuple(hi - lo + 1.0))
    return PriorBoxSet(boxes, tuple(int(d) for d in dims))


def pad_box(b: PriorBox, fraction: float, dims: Dims) -> PriorBox:
    """Grow every extent by ``fraction`` and clamp to the grid's outer voxel faces."""
    if fraction < 0:
        raise ParameterError(f"pad fraction must be >= 0, got {fraction}")
    half = np.asarray(b.size) * (1 + fraction) / 2
    lo = np.asarray(b.center) - half
    hi = np.asarray(b.center) + half
    lo = np.maximum(lo, -0.5)
    hi = np.minimum(hi, np.asarray(dims, dtype=float) - 0.5)
    return PriorBox(b.class_id, tuple((lo + hi) / 2), tuple(hi - lo))


@dataclass
class SubVolume:
    """Region cut out of a parent grid; ``data`` may carry leading channel axes."""

    data: object
    box: PriorBox
    class_id: int
    parent_dims: Dims
    lo: Tuple[int, int, int] = field(default=(0, 0, 0))
    hi: Tuple[int, int, int] = field(default=(0, 0, 0))

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return tuple(int(h - l + 1) for l, h in zip(self.lo, self.hi))


def crop(volume, b: PriorBox) -> SubVolume:
    """Cut the voxels under ``b`` from the last three axes of ``volume`` (numpy or torch)."""
    dims = tuple(int(d) for d in volume.shape[-3:])
    lo, hi = b.voxel_bounds(dims)
    if any(h < l for l, h in zip(lo, hi)):
        raise ParameterError(f"box {b} does not intersect grid {dims}")
    data = volume[..., lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    return SubVolume(data=data, box=b, class_id=b.class_id, parent_dims=dims, lo=lo, hi=hi)


def embed(sub: SubVolume, fill: float = 0.0):
    data = sub.data
    lead = tuple(data.shape[:-3])
    sl = (...,) + tuple(slice(l, h + 1) for l, h in zip(sub.lo, sub.hi))
    if isinstance(data, torch.Tensor):
        out = torch.full(lead + tuple(sub.parent_dims), fill, dtype=data.dtype, device=data.device)
    else:
        out = np.full(lead + tuple(sub.parent_dims), fill, dtype=np.asarray(data).dtype)
    out[sl] = data
    return out


def normalized_box(b: PriorBox, dims: Dims) -> np.ndarray:
    d = np.asarray(dims, dtype=float)
    return np.concatenate([np.asarray(b.center) / d, np.asarray(b.size) / d])


class PriorEncoder(nn.Module):
    """Two-layer MLP mapping the six normalized box values to a prior feature."""

    def __init__(self, dim: int = 32, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(6, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.dim = dim

    def forward(self, box_values: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(box_values)))


def encode_prior(b: PriorBox, encoder: PriorEncoder, dims: Dims) -> torch.Tensor:
    p = next(encoder.parameters())
    values = torch.as_tensor(normalized_box(b, dims), dtype=p.dtype, device=p.device)
    return encoder(values)


def to_cube(x: torch.Tensor, size: int, mode: str = "trilinear") -> torch.Tensor:
    """Resample a (B, C, w, h, l) tensor to a fixed ``size``^3 grid."""
    if mode == "nearest":
        return F.interpolate(x, size=(size,) * 3, mode="nearest-exact")
    return F.interpolate(x, size=(size,) * 3, mode="trilinear", align_corners=False)


def from_cube(x: torch.Tensor, shape: Sequence[int]) -> torch.Tensor:
    return F.interpolate(x, size=tuple(int(s) for s in shape), mode="trilinear", align_corners=False)
