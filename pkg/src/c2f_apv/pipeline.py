"""Model container and the slice -> coarse -> attend -> crop -> fine inference path."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch

from .coarse import AttendedVolume, CoarseNet, SaliencyNet, coarse_volume
from .config import RunConfig
from .errors import ConfigurationError
from .fine import FineNet, ThresholdTable, threshold_mask
from .prior_box import PriorBoxSet, PriorEncoder, SubVolume, crop, embed, from_cube, normalized_box, to_cube
from .volume import CTVolume, normalize_intensity

STAGES = ("coarse", "fine", "apv")
STAGE_COLUMNS = {"coarse": "Our-C", "fine": "Our-F", "apv": "Our-A"}


def fine_in_channels(source: str, num_classes: int) -> int:
    return {"attended": 1, "probability": num_classes, "both-concatenated": 1 + num_classes}[source]


@dataclass
class Models:
    coarse: CoarseNet
    saliency: SaliencyNet
    fine: FineNet
    encoder: PriorEncoder

    @classmethod
    def build(cls, cfg: RunConfig, num_classes: int) -> "Models":
        m = cfg.model
        if cfg.crop.source not in ("attended", "probability", "both-concatenated"):
            raise ConfigurationError(f"unknown crop source {cfg.crop.source!r}")
        return cls(
            coarse=CoarseNet(num_classes, m.coarse_width),
            saliency=SaliencyNet(num_classes, m.saliency_width),
            fine=FineNet(
                num_classes,
                m.fine_width,
                in_channels=fine_in_channels(cfg.crop.source, num_classes),
                prior_dim=m.prior_dim,
                dropout=m.dropout,
            ),
            encoder=PriorEncoder(m.prior_dim, m.prior_hidden),
        )

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {"coarse": self.coarse, "saliency": self.saliency, "fine": self.fine, "encoder": self.encoder}

    def train(self, mode: bool = True) -> "Models":
        for mod in self.modules().values():
            mod.train(mode)
        return self

    def eval(self) -> "Models":
        return self.train(False)

    def to(self, dtype) -> "Models":
        for mod in self.modules().values():
            mod.to(dtype)
        return self

    def clone(self) -> "Models":
        return copy.deepcopy(self)

    def state(self) -> Dict[str, Dict[str, torch.Tensor]]:
        return {k: copy.deepcopy(v.state_dict()) for k, v in self.modules().items()}

    def load_state(self, states: Dict[str, Dict[str, torch.Tensor]]) -> None:
        for name, mod in self.modules().items():
            if name in states:
                mod.load_state_dict(states[name])


def volume_tensor(v: CTVolume, cfg: RunConfig) -> torch.Tensor:
    return torch.from_numpy(normalize_intensity(v, cfg.window.lo, cfg.window.hi).data.copy())


@dataclass
class FineBatch:
    x: torch.Tensor  # (N, C, S, S, S)
    class_ids: torch.Tensor  # (N,) 1-based
    box_values: torch.Tensor  # (N, 6) normalized boxes
    subs: List[SubVolume]
    target: Optional[torch.Tensor] = None  # (N, S, S, S) binary


def fine_batch(
    att: AttendedVolume,
    priors: PriorBoxSet,
    cfg: RunConfig,
    labels: Optional[torch.Tensor] = None,
) -> FineBatch:
    """Crop one sub-volume per class with the (already padded) priors and resample to the cube."""
    source = att.source(cfg.crop.source)
    size = cfg.crop.cube_size
    xs, subs, targets, ids, boxes = [], [], [], [], []
    for n in sorted(priors.boxes):
        box = priors[n]
        sub = crop(source, box)
        subs.append(sub)
        xs.append(to_cube(sub.data[None], size)[0])
        ids.append(n)
        boxes.append(normalized_box(box, priors.grid))
        if labels is not None:
            lab = crop(labels, box).data
            targets.append(to_cube((lab == n).to(source.dtype)[None, None], size, mode="nearest")[0, 0])
    return FineBatch(
        x=torch.stack(xs),
        class_ids=torch.tensor(ids),
        box_values=torch.tensor(np.stack(boxes), dtype=source.dtype),
        subs=subs,
        target=torch.stack(targets) if labels is not None else None,
    )


def run_coarse(models: Models, vol: torch.Tensor, cfg: RunConfig) -> AttendedVolume:
    with torch.no_grad():
        return coarse_volume(vol, models.coarse, models.saliency, cfg.model.recurrent_iters)


def coarse_labels(att: AttendedVolume) -> np.ndarray:
    return att.prob.argmax(dim=0).numpy().astype(np.uint8)


def fine_probabilities(models: Models, att: AttendedVolume, priors: PriorBoxSet, cfg: RunConfig) -> np.ndarray:
    """Per-class full-grid organ probabilities (N, W, H, L); zero outside each box."""
    batch = fine_batch(att, priors, cfg)
    with torch.no_grad():
        out = models.fine(batch.x, models.encoder(batch.box_values))
    full = []
    for i, sub in enumerate(batch.subs):
        p = from_cube(out.prob[i][None, None], sub.spatial_shape)[0, 0].clamp(0, 1)
        full.append(embed(SubVolume(p.numpy(), sub.box, sub.class_id, sub.parent_dims, sub.lo, sub.hi), 0.0))
    return np.stack(full)


def merge_fine(probs: np.ndarray, class_ids: List[int], table: ThresholdTable) -> np.ndarray:
    """Label map from per-class probabilities: the most probable class passing its threshold."""
    passing = np.stack([threshold_mask(probs[i], n, table) for i, n in enumerate(class_ids)]).astype(bool)
    scored = np.where(passing, probs, -1.0)
    best = scored.argmax(axis=0)
    labels = np.asarray(class_ids, dtype=np.uint8)[best]
    return np.where(passing.any(axis=0), labels, 0).astype(np.uint8)


def check_grid(vol_shape, priors: PriorBoxSet) -> None:
    if tuple(vol_shape) != tuple(priors.grid):
        raise ConfigurationError(f"volume grid {tuple(vol_shape)} does not match priors grid {tuple(priors.grid)}")


def predict(models: Models, v: CTVolume, priors: PriorBoxSet, cfg: RunConfig, stage: str = "apv") -> np.ndarray:
    """Full-volume label map for one stage (``coarse`` or a fine-network stage)."""
    check_grid(v.shape, priors)
    models.eval()
    att = run_coarse(models, volume_tensor(v, cfg), cfg)
    if stage == "coarse":
        return coarse_labels(att)
    padded = priors.padded(cfg.crop.pad_fraction)
    probs = fine_probabilities(models, att, padded, cfg)
    ids = sorted(padded.boxes)
    return merge_fine(probs, ids, ThresholdTable.uniform(len(ids), cfg.threshold))
