"""3D fine segmentation with a classification branch and prior-feature fusion."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError

CLASS_PROB_FLOOR = 1e-12


class _Block3d(nn.Sequential):
    # BatchNorm keeps per-sample intensity levels that the classifier relies on;
    # per-sample norms (group/instance) erase them before the global pool.
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            nn.BatchNorm3d(cout),
            nn.ReLU(inplace=True),
            nn.Conv3d(cout, cout, 3, padding=1),
            nn.BatchNorm3d(cout),
            nn.ReLU(inplace=True),
        )


@contextmanager
def frozen_norm_stats(net: nn.Module):
    """Keep BatchNorm running statistics fixed; batch statistics and gradients are untouched."""
    norms = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield net
    finally:
        for m, (momentum, tracked) in zip(norms, saved):
            m.momentum = momentum
            m.num_batches_tracked.copy_(tracked)


@dataclass
class FineOutput:
    prob: torch.Tensor  # (B, S, S, S) organ probability
    class_scores: torch.Tensor  # (B, N) logits
    class_probs: torch.Tensor  # (B, N) softmax


class FineNet(nn.Module):
    """3D U-Net (3 levels) emitting one organ-probability channel plus N class scores.

    The classifier reads the encoder bottleneck before the prior feature is
    fused, so the same weights can classify masked volumes without a prior.
    """

    depth = 3

    def __init__(
        self,
        num_classes: int,
        base_width: int = 8,
        in_channels: int = 1,
        prior_dim: int = 32,
        dropout: float = 0.5,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.prior_dim = prior_dim
        w = [base_width * 2**i for i in range(self.depth + 1)]
        bott = w[-1]
        self.enc = nn.ModuleList([_Block3d(in_channels, w[0])] + [_Block3d(w[i], w[i + 1]) for i in range(self.depth)])
        self.prior_proj = nn.Linear(prior_dim, bott)
        self.fuse = _Block3d(2 * bott, bott)
        self.up = nn.ModuleList([nn.ConvTranspose3d(w[i + 1], w[i], 2, stride=2) for i in reversed(range(self.depth))])
        self.dec = nn.ModuleList([_Block3d(2 * w[i], w[i]) for i in reversed(range(self.depth))])
        self.seg_head = nn.Conv3d(w[0], 1, 1)
        self.dropout = nn.Dropout(dropout)
        self.cls_head = nn.Linear(bott, num_classes)

    def encode(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < self.depth:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        return x, skips

    def classify(self, bottleneck: torch.Tensor) -> torch.Tensor:
        pooled = bottleneck.mean(dim=(2, 3, 4))
        return self.cls_head(self.dropout(pooled))

    def decode(self, bottleneck: torch.Tensor, skips: List[torch.Tensor], prior: torch.Tensor) -> torch.Tensor:
        g = self.prior_proj(prior)[:, :, None, None, None].expand(-1, -1, *bottleneck.shape[2:])
        x = self.fuse(torch.cat([bottleneck, g], dim=1))
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.seg_head(x))[:, 0]

    def forward(self, x: torch.Tensor, prior: torch.Tensor) -> FineOutput:
        bottleneck, skips = self.encode(x)
        scores = self.classify(bottleneck)
        prob = self.decode(bottleneck, skips, prior)
        return FineOutput(prob=prob, class_scores=scores, class_probs=torch.softmax(scores, dim=1))


def _check_input(x: torch.Tensor, net: FineNet) -> torch.Tensor:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(getattr(x, "data", x))
    if x.dim() == 3:
        x = x[None, None]
    elif x.dim() == 4:
        x = x[None]
    if x.dim() != 5 or x.shape[1] != net.in_channels:
        raise ParameterError(f"fine input must be (B, {net.in_channels}, S, S, S), got {tuple(x.shape)}")
    m = 2**net.depth
    if any(d % m for d in x.shape[2:]):
        raise ParameterError(f"fine input spatial dims {tuple(x.shape[2:])} must be multiples of {m}")
    return x


def fine_forward(x, s: torch.Tensor, net: FineNet) -> FineOutput:
    x = _check_input(x, net)
    s = torch.as_tensor(s)
    if s.dim() == 1:
        s = s[None].expand(x.shape[0], -1)
    if s.shape != (x.shape[0], net.prior_dim):
        raise ParameterError(f"prior feature shape {tuple(s.shape)} does not match ({x.shape[0]}, {net.prior_dim})")
    return net(x, s)


@dataclass
class ThresholdTable:
    h: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def uniform(cls, num_classes: int, value: float = 0.5) -> "ThresholdTable":
        return cls({n: value for n in range(1, num_classes + 1)})

    def __post_init__(self):
        for n, v in self.h.items():
            if not 0 < v < 1:
                raise ParameterError(f"threshold for class {n} must lie in (0, 1), got {v}")


def threshold_mask(p, n: int, table: ThresholdTable):
    if n not in table.h:
        raise ParameterError(f"class {n} has no threshold")
    h = table.h[n]
    if isinstance(p, torch.Tensor):
        return (p > h).to(torch.uint8)
    return (np.asarray(p) > h).astype(np.uint8)


def classification_loss(class_probs: torch.Tensor, n) -> torch.Tensor:
    """Cross entropy ``-log p[n]`` for 1-based class ids; batch mean for (B, N) input."""
    if class_probs.dim() == 1:
        return -torch.log(class_probs[int(n) - 1].clamp_min(CLASS_PROB_FLOOR))
    idx = torch.as_tensor(n, device=class_probs.device).long().reshape(-1, 1) - 1
    picked = class_probs.gather(1, idx)[:, 0]
    return -torch.log(picked.clamp_min(CLASS_PROB_FLOOR)).mean()
