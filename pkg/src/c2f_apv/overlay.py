"""Per-slice PNG overlays of predicted (and optionally true) organ contours."""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_COLORS = plt.get_cmap("tab10").colors


def labelled_slices(*label_maps: np.ndarray) -> List[int]:
    """Axial indices where any of the label maps has foreground."""
    hit = np.zeros(label_maps[0].shape[2], dtype=bool)
    for lab in label_maps:
        if lab is not None:
            hit |= np.asarray(lab).reshape(-1, lab.shape[2]).any(axis=0)
    return np.flatnonzero(hit).tolist()


def render_overlays(
    image: np.ndarray,
    prediction: np.ndarray,
    out_dir,
    truth: Optional[np.ndarray] = None,
    slices: Optional[Sequence[int]] = None,
    num_classes: Optional[int] = None,
) -> List[Path]:
    """Write one PNG per axial slice: grey image, solid predicted contours, dashed truth.

    ``image`` is a (W, H, L) intensity grid already scaled for display; by
    default only slices containing a predicted or true organ are drawn.
    """
    image = np.asarray(image, dtype=float)
    prediction = np.asarray(prediction)
    if prediction.shape != image.shape or (truth is not None and np.shape(truth) != image.shape):
        raise ValueError("image, prediction and truth must share one grid")
    if num_classes is None:
        num_classes = int(max(prediction.max(), 0 if truth is None else np.max(truth)))
    if slices is None:
        slices = labelled_slices(prediction, truth)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = float(image.min()), float(image.max())
    paths = []
    for z in slices:
        fig, ax = plt.subplots(figsize=(4, 4), dpi=80)
        # transpose so x runs left-right and y top-bottom
        ax.imshow(image[:, :, z].T, cmap="gray", vmin=lo, vmax=hi, interpolation="nearest")
        for n in range(1, num_classes + 1):
            color = _COLORS[(n - 1) % len(_COLORS)]
            for lab, style in ((prediction, "solid"), (truth, "dashed")):
                if lab is None:
                    continue
                mask = (lab[:, :, z] == n).T.astype(float)
                if mask.any() and not mask.all():
                    ax.contour(mask, levels=[0.5], colors=[color], linestyles=style, linewidths=1.0)
        ax.set_title(f"z={z}", fontsize=8)
        ax.set_axis_off()
        path = out_dir / f"slice_{z:03d}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
