"""2D coarse segmentation over axial slices with recurrent saliency re-weighting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError

SOFT_DICE_EPS = 1e-5


def _groups(ch: int) -> int:
    return 4 if ch % 4 == 0 else 1


class _Block2d(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
        )


class CoarseNet(nn.Module):
    """Small 2D encoder-decoder (3 down / 3 up) with a softmax over N+1 classes."""

    depth = 3

    def __init__(self, num_classes: int, base_width: int = 16, in_channels: int = 1):
        super().__init__()
        self.num_classes = num_classes
        self.base_width = base_width
        w = [base_width * 2**i for i in range(self.depth + 1)]
        self.enc = nn.ModuleList([_Block2d(in_channels, w[0])] + [_Block2d(w[i], w[i + 1]) for i in range(self.depth)])
        self.up = nn.ModuleList([nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in reversed(range(self.depth))])
        self.dec = nn.ModuleList([_Block2d(2 * w[i], w[i]) for i in reversed(range(self.depth))])
        self.head = nn.Conv2d(w[0], num_classes + 1, 1)
        # background-dominant start; avoids the early all-organ phase under Dice loss
        with torch.no_grad():
            self.head.bias.zero_()
            self.head.bias[0] = 3.0

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        W, H = x.shape[-2:]
        m = 2**self.depth
        pw, ph = (-W) % m, (-H) % m
        if pw or ph:
            x = F.pad(x, (0, ph, 0, pw), mode="replicate")
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < self.depth:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)[..., :W, :H]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class SaliencyNet(nn.Module):
    """Three convolutions ending in a sigmoid: probability map -> spatial weights."""

    def __init__(self, num_classes: int, width: int = 8, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.body = nn.Sequential(
            nn.Conv2d(num_classes + 1, width, kernel_size, padding=pad),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, kernel_size, padding=pad),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, kernel_size, padding=pad),
        )
        # start close to "keep everything" so early recurrence does not wipe the input
        nn.init.constant_(self.body[-1].bias, 2.0)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(p))

    def saturate(self) -> None:
        """Force g == 1 everywhere (used to test fixed-point behaviour)."""
        with torch.no_grad():
            self.body[-1].weight.zero_()
            self.body[-1].bias.fill_(1e4)


def _as_batch(s) -> torch.Tensor:
    # tensors pass through untouched: Tensor.data would detach them
    t = s if isinstance(s, torch.Tensor) else torch.as_tensor(getattr(s, "data", s))
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    return t


def coarse_forward(s, net: CoarseNet) -> torch.Tensor:
    """Class probabilities for a slice (W, H) or slice batch (B, 1, W, H)."""
    x = _as_batch(s)
    p = next(net.parameters())
    return net(x.to(dtype=p.dtype))


def saliency_transform(p: torch.Tensor, net: SaliencyNet) -> torch.Tensor:
    return net(p)


def recurrent_refine(s, coarse: CoarseNet, saliency: SaliencyNet, iters: int = 3, return_all: bool = False):
    """Iterate ``P <- f(X * g(P))`` starting from ``P = f(X)``."""
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    x = _as_batch(s).to(dtype=next(coarse.parameters()).dtype)
    p = coarse(x)
    maps = [p]
    for _ in range(iters - 1):
        p = coarse(x * saliency(p))
        maps.append(p)
    return maps if return_all else p


@dataclass
class AttendedVolume:
    image: torch.Tensor  # (1, W, H, L): X * g(P), slice-wise
    prob: torch.Tensor  # (N+1, W, H, L)

    def source(self, kind: str) -> torch.Tensor:
        if kind == "attended":
            return self.image
        if kind == "probability":
            return self.prob[1:]
        if kind == "both-concatenated":
            return torch.cat([self.image, self.prob[1:]], dim=0)
        raise ParameterError(f"unknown crop source {kind!r}")


def build_attended_volume(originals: torch.Tensor, maps: torch.Tensor, saliency: SaliencyNet) -> AttendedVolume:
    """Stack per-slice attended images and probability maps along z.

    ``originals`` is (L, 1, W, H) and ``maps`` (L, N+1, W, H), in slice order.
    """
    originals = _as_batch(originals)
    if originals.shape[0] != maps.shape[0]:
        raise ParameterError(f"{originals.shape[0]} slices but {maps.shape[0]} probability maps")
    attended = originals.to(maps.dtype) * saliency(maps)
    return AttendedVolume(image=attended.permute(1, 2, 3, 0), prob=maps.permute(1, 2, 3, 0))


def coarse_volume(
    volume: torch.Tensor,
    coarse: CoarseNet,
    saliency: SaliencyNet,
    iters: int = 3,
    chunk: Optional[int] = None,
) -> AttendedVolume:
    """Run the recurrent coarse stage over every axial slice of a (W, H, L) volume."""
    slices = volume.permute(2, 0, 1)[:, None]
    chunk = chunk or slices.shape[0]
    maps: List[torch.Tensor] = []
    for start in range(0, slices.shape[0], chunk):
        maps.append(recurrent_refine(slices[start : start + chunk], coarse, saliency, iters))
    return build_attended_volume(slices, torch.cat(maps, dim=0), saliency)


def soft_dsc_loss(p: torch.Tensor, y: torch.Tensor, eps: float = SOFT_DICE_EPS, dims=None) -> torch.Tensor:
    """``1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)``.

    With ``dims`` given the ratio is taken per remaining index and averaged.
    """
    y = y.to(p.dtype)
    if dims is None:
        inter, total = (p * y).sum(), p.sum() + y.sum()
    else:
        inter, total = (p * y).sum(dim=dims), p.sum(dim=dims) + y.sum(dim=dims)
    return (1 - (2 * inter + eps) / (total + eps)).mean()


def multiclass_dice_loss(prob: torch.Tensor, labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Mean soft Dice loss over organ channels 1..N of a (B, N+1, ...) map."""
    losses = [soft_dsc_loss(prob[:, n], labels == n) for n in range(1, num_classes + 1)]
    return torch.stack(losses).mean()
