"""Dice metric and per-stage evaluation reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Union

import numpy as np

from .errors import ParameterError
from .pipeline import STAGE_COLUMNS, STAGES, Models, check_grid, predict
from .prior_box import PriorBoxSet


def dsc_metric(y, z) -> float:
    """``2|Y & Z| / (|Y| + |Z|)``; two empty sets score 1."""
    y = np.asarray(y).astype(bool)
    z = np.asarray(z).astype(bool)
    if y.shape != z.shape:
        raise ParameterError(f"shape mismatch {y.shape} vs {z.shape}")
    total = int(y.sum()) + int(z.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(y, z).sum()) / total


@dataclass
class EvalReport:
    """Per-stage, per-class Dice values for every evaluated sample.

    ``scores[stage][class_id]`` lists one value per entry of ``sample_ids``.
    Standard deviations are population (ddof=0).
    """

    sample_ids: List[str]
    num_classes: int
    scores: Dict[str, Dict[int, List[float]]] = field(default_factory=dict)

    @property
    def stages(self) -> List[str]:
        return [s for s in STAGES if s in self.scores]

    def stats(self, stage: str, n: int) -> Dict[str, float]:
        vals = np.asarray(self.scores[stage][n], dtype=float)
        return {
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "min": float(vals.min()),
            "max": float(vals.max()),
        }

    def mean(self, stage: str, n: int) -> float:
        return self.stats(stage, n)["mean"]

    def to_json(self) -> dict:
        out = {"samples": self.sample_ids, "num_classes": self.num_classes, "stages": {}}
        for stage in self.stages:
            out["stages"][STAGE_COLUMNS[stage]] = {
                str(n): {**self.stats(stage, n), "per_sample": list(self.scores[stage][n])}
                for n in range(1, self.num_classes + 1)
            }
        return out

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        names = {v: k for k, v in STAGE_COLUMNS.items()}
        scores = {
            names[col]: {int(n): list(v["per_sample"]) for n, v in per_class.items()}
            for col, per_class in data["stages"].items()
        }
        return cls(list(data["samples"]), int(data["num_classes"]), scores)

    def to_table(self) -> str:
        cols = [STAGE_COLUMNS[s] for s in self.stages]
        header = f"{'class':>6}  " + "  ".join(f"{c:>17}" for c in cols)
        lines = [header, "-" * len(header)]
        for n in range(1, self.num_classes + 1):
            cells = []
            for stage in self.stages:
                st = self.stats(stage, n)
                cells.append(f"{100 * st['mean']:8.2f} +/- {100 * st['std']:5.2f}")
            lines.append(f"{n:>6}  " + "  ".join(f"{c:>17}" for c in cells))
        return "\n".join(lines) + "\n"

    def save(self, json_path, table_path=None) -> None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")
        if table_path is not None:
            Path(table_path).write_text(self.to_table())


Predictor = Callable[[object], np.ndarray]


def build_report(truths: Sequence[np.ndarray], predictions: Mapping[str, Sequence[np.ndarray]], ids, num_classes) -> EvalReport:
    scores: Dict[str, Dict[int, List[float]]] = {}
    for stage, preds in predictions.items():
        if len(preds) != len(truths):
            raise ParameterError(f"stage {stage}: {len(preds)} predictions for {len(truths)} samples")
        scores[stage] = {
            n: [dsc_metric(t == n, p == n) for t, p in zip(truths, preds)] for n in range(1, num_classes + 1)
        }
    return EvalReport(list(ids), num_classes, scores)


def evaluate(
    stages: Mapping[str, Union[Models, Predictor]],
    samples: Sequence,
    priors: PriorBoxSet,
    cfg,
) -> EvalReport:
    """Score each stage on ``samples`` (objects with ``volume`` and ``labels``).

    A stage maps to trained ``Models`` (run through the full pipeline) or to
    any callable returning a label map for a sample.
    """
    if not samples:
        raise ParameterError("no samples to evaluate")
    for s in samples:
        check_grid(s.volume.shape, priors)
    predictions = {}
    for stage in STAGES:
        if stage not in stages:
            continue
        runner = stages[stage]
        if isinstance(runner, Models):
            mode = "coarse" if stage == "coarse" else "apv"
            predictions[stage] = [predict(runner, s.volume, priors, cfg, mode) for s in samples]
        else:
            predictions[stage] = [np.asarray(runner(s)) for s in samples]
    return build_report(
        [s.labels.data for s in samples], predictions, [s.id for s in samples], priors.num_classes
    )
