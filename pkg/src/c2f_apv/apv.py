"""Adversarial performance validator.

The predicted organ is softly erased from the fine-stage input and the
fine network's own classifier (same parameters, no copy) scores what is
left. The score of the target class is the performance-validation loss:
a complete segmentation leaves nothing to recognise.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ParameterError
from .fine import FineNet, frozen_norm_stats

MODES = ("complement", "literal")


@dataclass(frozen=True)
class SoftMaskConfig:
    w: float = 10.0
    sigma: float = 0.5
    mode: str = "complement"

    def __post_init__(self):
        if self.w <= 0:
            raise ParameterError(f"mask sharpness w must be > 0, got {self.w}")
        if not 0 < self.sigma < 1:
            raise ParameterError(f"mask threshold sigma must lie in (0, 1), got {self.sigma}")
        if self.mode not in MODES:
            raise ParameterError(f"mask mode must be one of {MODES}, got {self.mode!r}")


def soft_mask(p: torch.Tensor, cfg: SoftMaskConfig) -> torch.Tensor:
    return torch.sigmoid(cfg.w * (p - cfg.sigma))


def mask_volume(x: torch.Tensor, p: torch.Tensor, cfg: SoftMaskConfig) -> torch.Tensor:
    """Erase the predicted organ from ``x``.

    ``x`` is (B, C, S, S, S) or (S, S, S); ``p`` matches its spatial shape and
    batch. ``literal`` mode computes ``P - M(P) * X`` as written in the method
    description; ``complement`` computes ``X * (1 - M(P))``.
    """
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x.data)
    if x.dim() == 5:
        pb = p[:, None] if p.dim() == 4 else p
    else:
        pb = p
    if x.shape[-3:] != p.shape[-3:] or (x.dim() == 5 and pb.shape[0] != x.shape[0]):
        raise ParameterError(f"volume {tuple(x.shape)} and probability {tuple(p.shape)} are not aligned")
    m = soft_mask(pb, cfg)
    if cfg.mode == "complement":
        return x * (1 - m)
    return pb - m * x


def apv_classify(xv: torch.Tensor, net: FineNet) -> torch.Tensor:
    """Class probabilities of a masked volume from the shared encoder + classifier head.

    Normalization running statistics are left untouched so masked inputs do
    not shift the statistics used at inference.
    """
    with frozen_norm_stats(net):
        bottleneck, _ = net.encode(xv)
    return torch.softmax(net.classify(bottleneck), dim=1)


def pv_loss(class_probs_of_masked: torch.Tensor, n) -> torch.Tensor:
    """Target-class probability of the masked volume (batch mean); minimised in training."""
    probs = class_probs_of_masked
    if probs.dim() == 1:
        probs = probs[None]
    idx = torch.as_tensor(n, device=probs.device).long().reshape(-1)
    if idx.numel() == 1 and probs.shape[0] > 1:
        idx = idx.expand(probs.shape[0])
    num_classes = probs.shape[1]
    if torch.any(idx < 1) or torch.any(idx > num_classes):
        raise ParameterError(f"class id out of range 1..{num_classes}: {idx.tolist()}")
    return probs.gather(1, (idx - 1)[:, None])[:, 0].mean()
