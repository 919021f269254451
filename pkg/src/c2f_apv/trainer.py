"""Loss aggregation, learning-rate schedule and three-phase training.

Phases run in order: ``coarse`` trains the 2D network and the saliency
transform on axial slices; ``fine`` trains the 3D network and prior encoder
on cached coarse outputs; ``joint`` fine-tunes everything with the
performance-validation term switched on.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .apv import SoftMaskConfig, apv_classify, mask_volume, pv_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .coarse import AttendedVolume, build_attended_volume, multiclass_dice_loss, recurrent_refine, soft_dsc_loss
from .config import PHASES, LossWeights, RunConfig
from .errors import ConfigurationError, DivergenceError, FormatError, MissingPrerequisiteError, ParameterError
from .evaluation import EvalReport, dsc_metric, evaluate
from .fine import FineOutput, ThresholdTable, classification_loss
from .pipeline import (
    FineBatch,
    Models,
    check_grid,
    coarse_labels,
    fine_batch,
    fine_probabilities,
    merge_fine,
    run_coarse,
)
from .prior_box import PriorBoxSet, load_priors
from .dataset import Sample, load_dataset
from .volume import CTVolume, augment, fit_to_grid, normalize_intensity

log = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "TrainState",
    "schedule_step",
    "total_loss",
    "Sample",
    "load_dataset",
    "Trainer",
    "fit",
    "load_models",
]


# ------------------------------------------------------------------ primitives


@dataclass(frozen=True)
class TrainState:
    epoch: int = 0
    lr: float = 0.001
    momentum: float = 0.9
    best_metric: float = -math.inf
    patience: int = 0
    seed: int = 0
    phase: str = "coarse"

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be > 0, got {self.lr}")
        if self.phase not in PHASES:
            raise ParameterError(f"unknown phase {self.phase!r}")


def schedule_step(state: TrainState, metric: float, patience_limit: int = 10, decay: float = 0.5) -> TrainState:
    """One epoch of plateau tracking: halve the rate after ``patience_limit`` stagnant epochs."""
    if not math.isfinite(metric):
        raise ParameterError(f"metric must be finite, got {metric}")
    lr, best, patience = state.lr, state.best_metric, state.patience
    if metric > best:
        best, patience = metric, 0
    else:
        patience += 1
        if patience >= patience_limit:
            lr, patience = lr * decay, 0
    return dataclasses.replace(state, epoch=state.epoch + 1, lr=lr, best_metric=best, patience=patience)


def total_loss(l_seg, l_cl, l_pv, w: LossWeights):
    return w.alpha * l_seg + w.beta * l_cl + w.gamma * l_pv


def fine_losses(models: Models, x: torch.Tensor, target: torch.Tensor, class_ids, box_values, apv: Optional[SoftMaskConfig] = None):
    """Fine-stage forward and its loss terms; the PV term only when ``apv`` is given."""
    out: FineOutput = models.fine(x, models.encoder(box_values))
    seg = soft_dsc_loss(out.prob, target, dims=(1, 2, 3))
    cl = classification_loss(out.class_probs, class_ids)
    pv = None
    if apv is not None:
        xv = mask_volume(x, out.prob, apv)
        pv = pv_loss(apv_classify(xv, models.fine), class_ids)
    return out, seg, cl, pv


def fine_phase_loss(models: Models, batch: FineBatch, w: LossWeights) -> torch.Tensor:
    _, seg, cl, _ = fine_losses(models, batch.x, batch.target, batch.class_ids, batch.box_values)
    return total_loss(seg, cl, 0.0, w)


def joint_phase_loss(models: Models, batch: FineBatch, w: LossWeights, apv: SoftMaskConfig, coarse_seg=0.0):
    _, seg, cl, pv = fine_losses(models, batch.x, batch.target, batch.class_ids, batch.box_values, apv)
    return total_loss(coarse_seg + seg, cl, pv, w), pv, cl


# --------------------------------------------------------------------- dataset


def _split_validation(train: List[Sample], fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    n_val = int(round(fraction * len(train)))
    if fraction <= 0 or n_val < 1 or n_val >= len(train):
        return train, train
    order = np.random.default_rng([seed, 7]).permutation(len(train))
    val_idx = set(order[:n_val].tolist())
    fit_set = [s for i, s in enumerate(train) if i not in val_idx]
    val_set = [s for i, s in enumerate(train) if i in val_idx]
    return fit_set, val_set


# ----------------------------------------------------------------- checkpoints


def _manifest(cfg: RunConfig, phase: str, priors: PriorBoxSet, iterations: int, epochs: int) -> dict:
    return {
        "phase": phase,
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "iterations": iterations,
        "epochs": epochs,
        "num_classes": priors.num_classes,
        "grid": list(priors.grid),
        "model": dataclasses.asdict(cfg.model),
        "crop": dataclasses.asdict(cfg.crop),
    }


def load_models(path, cfg: RunConfig, num_classes: int) -> Models:
    states, manifest = load_checkpoint(path)
    if manifest.get("model") != dataclasses.asdict(cfg.model) or manifest.get("crop", {}).get("source") != cfg.crop.source:
        raise ConfigurationError(f"checkpoint {path} was built with a different model configuration")
    if manifest.get("num_classes") != num_classes:
        raise ConfigurationError(f"checkpoint {path} has {manifest.get('num_classes')} classes, priors have {num_classes}")
    models = Models.build(cfg, num_classes)
    models.load_state(states)
    return models.eval()


# --------------------------------------------------------------------- trainer


class Trainer:
    """Owns all parameter state for one run.

    ``history`` collects per-epoch records for every phase and, for the joint
    phase, the PV loss of every optimisation step.
    """

    def __init__(self, cfg: RunConfig, samples: Sequence[Sample], priors: Optional[PriorBoxSet] = None):
        self.cfg = cfg
        if priors is None:
            path = cfg.resolved_priors_path
            if not Path(path).exists():
                raise ConfigurationError(f"priors file {path} not found; run the priors command first")
            priors = load_priors(path)
        self.priors = priors
        self.padded = priors.padded(cfg.crop.pad_fraction)
        self.num_classes = priors.num_classes
        for s in samples:
            check_grid(s.volume.shape, priors)
        train = [s for s in samples if s.split == "train"]
        if not train:
            raise ConfigurationError("dataset has no training samples")
        self.fit_samples, self.val_samples = _split_validation(train, cfg.dataset.val_fraction, cfg.seed)
        self.test_samples = [s for s in samples if s.split == cfg.eval_split]
        self.apv_cfg = SoftMaskConfig(cfg.apv.w, cfg.apv.sigma, cfg.apv.mode)
        self.thresholds = ThresholdTable.uniform(self.num_classes, cfg.threshold)
        self.history: Dict[str, dict] = {}
        self._train_items: Optional[List[Tuple[torch.Tensor, torch.Tensor]]] = None
        self._val_items: Optional[List[Tuple[torch.Tensor, np.ndarray]]] = None
        self._joint_val_atts = None
        torch.set_num_threads(max(1, cfg.threads))

    # data -----------------------------------------------------------------

    def _normalized(self, v: CTVolume) -> CTVolume:
        return normalize_intensity(v, self.cfg.window.lo, self.cfg.window.hi)

    def train_items(self) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        """Normalized (volume, labels) tensors for training, augmented when enabled."""
        if self._train_items is None:
            items = []
            for i, s in enumerate(self.fit_samples):
                v = self._normalized(s.volume)
                pairs = [(v, s.labels)]
                if self.cfg.augment.enabled:
                    seed = int(np.random.SeedSequence([self.cfg.seed, i]).generate_state(1)[0])
                    pairs = augment(v, s.labels, self.cfg.augment.spec(), seed)
                for av, ay in pairs:
                    data = fit_to_grid(av.data, self.priors.grid, mode="edge")
                    lab = fit_to_grid(ay.data, self.priors.grid)
                    items.append((torch.from_numpy(data.copy()), torch.from_numpy(lab.astype(np.int64))))
            self._train_items = items
        return self._train_items

    def val_items(self) -> List[Tuple[torch.Tensor, np.ndarray]]:
        if self._val_items is None:
            self._val_items = [
                (torch.from_numpy(self._normalized(s.volume).data.copy()), s.labels.data) for s in self.val_samples
            ]
        return self._val_items

    # validation -------------------------------------------------------------

    def _mean_dsc(self, preds: List[np.ndarray], truths: List[np.ndarray]) -> float:
        vals = [dsc_metric(t == n, p == n) for p, t in zip(preds, truths) for n in range(1, self.num_classes + 1)]
        return float(np.mean(vals))

    def validate(self, models: Models, stage: str, atts=None) -> float:
        models.eval()
        items = self.val_items()
        if atts is None:
            atts = [run_coarse(models, v, self.cfg) for v, _ in items]
        if stage == "coarse":
            preds = [coarse_labels(a) for a in atts]
        else:
            ids = sorted(self.padded.boxes)
            preds = [merge_fine(fine_probabilities(models, a, self.padded, self.cfg), ids, self.thresholds) for a in atts]
        return self._mean_dsc(preds, [y for _, y in items])

    # phases -----------------------------------------------------------------

    def _optimizer(self, params, lr: float) -> torch.optim.SGD:
        return torch.optim.SGD(params, lr=lr, momentum=self.cfg.optim.momentum)

    def _step(self, opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
        opt.zero_grad()
        loss.backward()
        if self.cfg.optim.clip_norm is not None:
            params = [p for group in opt.param_groups for p in group["params"]]
            torch.nn.utils.clip_grad_norm_(params, self.cfg.optim.clip_norm)
        opt.step()

    def _check(self, loss: torch.Tensor, phase: str, epoch: int) -> None:
        if not torch.isfinite(loss):
            raise DivergenceError(phase, epoch, float(loss))

    def _run_epochs(self, phase: str, models: Models, params, epoch_fn, val_fn):
        """Shared epoch loop: validation-driven lr schedule and divergence checks.

        Training always runs the full epoch budget; the final parameters are kept.
        """
        pc = self.cfg.phase(phase)
        opt = self._optimizer(params, self.cfg.phase_lr(phase))
        state = TrainState(lr=self.cfg.phase_lr(phase), momentum=self.cfg.optim.momentum, seed=self.cfg.seed, phase=phase)
        gen = torch.Generator().manual_seed(self.cfg.seed * 1000 + PHASES.index(phase))
        record = {"epochs": [], "iterations": 0}
        baseline = val_fn()
        state = dataclasses.replace(state, best_metric=baseline)
        record["baseline_metric"] = baseline
        for epoch in range(pc.epochs):
            t0 = time.time()
            models.train()
            losses = epoch_fn(epoch, opt, gen, record)
            metric = val_fn()
            state = schedule_step(state, metric, self.cfg.schedule.patience, self.cfg.schedule.decay)
            for group in opt.param_groups:
                group["lr"] = state.lr
            record["epochs"].append(
                {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None, "val_metric": metric, "lr": state.lr}
            )
            log.info("%s epoch %d loss %.4f val %.4f lr %.2e (%.1fs)", phase, epoch, np.mean(losses), metric, state.lr, time.time() - t0)
        record["best_metric"] = state.best_metric
        self.history[phase] = record
        return models.eval()

    def train_coarse(self, models: Models) -> Models:
        cfg, pc = self.cfg, self.cfg.phase("coarse")
        items = self.train_items()
        xs = torch.cat([v.permute(2, 0, 1)[:, None] for v, _ in items])
        ys = torch.cat([y.permute(2, 0, 1) for _, y in items])
        params = list(models.coarse.parameters()) + list(models.saliency.parameters())

        def epoch_fn(epoch, opt, gen, record):
            order = torch.randperm(xs.shape[0], generator=gen)
            if pc.slices_per_epoch:
                order = order[: pc.slices_per_epoch]
            losses = []
            for start in range(0, len(order), pc.batch_size):
                idx = order[start : start + pc.batch_size]
                maps = recurrent_refine(xs[idx], models.coarse, models.saliency, cfg.model.recurrent_iters, return_all=True)
                seg = torch.stack([multiclass_dice_loss(m, ys[idx], self.num_classes) for m in maps]).mean()
                loss = total_loss(seg, 0.0, 0.0, cfg.loss)
                self._check(loss, "coarse", epoch)
                self._step(opt, loss)
                record["iterations"] += 1
                losses.append(loss.item())
            return losses

        return self._run_epochs("coarse", models, params, epoch_fn, lambda: self.validate(models, "coarse"))

    def _fine_batches(self, models: Models) -> FineBatch:
        models.eval()
        batches = [fine_batch(run_coarse(models, v, self.cfg), self.padded, self.cfg, y) for v, y in self.train_items()]
        return FineBatch(
            x=torch.cat([b.x for b in batches]),
            class_ids=torch.cat([b.class_ids for b in batches]),
            box_values=torch.cat([b.box_values for b in batches]),
            subs=[s for b in batches for s in b.subs],
            target=torch.cat([b.target for b in batches]),
        )

    def train_fine(self, models: Models) -> Models:
        cfg, pc = self.cfg, self.cfg.phase("fine")
        data = self._fine_batches(models)
        val_atts = [run_coarse(models, v, cfg) for v, _ in self.val_items()]
        params = list(models.fine.parameters()) + list(models.encoder.parameters())

        def epoch_fn(epoch, opt, gen, record):
            order = torch.randperm(data.x.shape[0], generator=gen)
            losses = []
            for start in range(0, len(order), pc.batch_size):
                idx = order[start : start + pc.batch_size]
                batch = FineBatch(data.x[idx], data.class_ids[idx], data.box_values[idx], [], data.target[idx])
                loss = fine_phase_loss(models, batch, cfg.loss)
                self._check(loss, "fine", epoch)
                self._step(opt, loss)
                record["iterations"] += 1
                losses.append(loss.item())
            return losses

        return self._run_epochs("fine", models, params, epoch_fn, lambda: self.validate(models, "fine", val_atts))

    def _slab(self) -> Tuple[int, int]:
        los, his = [], []
        for b in self.padded.boxes.values():
            lo, hi = b.voxel_bounds(self.priors.grid)
            los.append(lo[2])
            his.append(hi[2])
        return min(los), max(his)

    def _attended_with_grad(self, models: Models, vol: torch.Tensor, labels: torch.Tensor):
        """Coarse stage with gradients over the z-slab the boxes touch; returns (att, coarse loss)."""
        z0, z1 = self._slab()
        cfg = self.cfg
        slab = vol[:, :, z0 : z1 + 1]
        slices = slab.permute(2, 0, 1)[:, None]
        maps = recurrent_refine(slices, models.coarse, models.saliency, cfg.model.recurrent_iters, return_all=True)
        ys = labels[:, :, z0 : z1 + 1].permute(2, 0, 1)
        seg = torch.stack([multiclass_dice_loss(m, ys, self.num_classes) for m in maps]).mean()
        att = build_attended_volume(slices, maps[-1], models.saliency)
        pad = (z0, vol.shape[2] - 1 - z1)
        return AttendedVolume(image=F.pad(att.image, pad), prob=F.pad(att.prob, pad)), seg

    def train_joint(self, models: Models) -> Models:
        cfg, pc = self.cfg, self.cfg.phase("joint")
        items = self.train_items()
        if pc.train_coarse:
            params = [p for m in models.modules().values() for p in m.parameters()]
            cached = None
        else:
            params = list(models.fine.parameters()) + list(models.encoder.parameters())
            models.eval()
            cached = [run_coarse(models, v, cfg) for v, _ in items]
        pv_trace: List[float] = []
        cl_trace: List[float] = []

        def val_fn():
            return self.validate(models, "apv", None if pc.train_coarse else self._val_atts_cached(models))

        def epoch_fn(epoch, opt, gen, record):
            order = torch.randperm(len(items), generator=gen).tolist()
            losses = []
            for start in range(0, len(order), pc.batch_size):
                batches, coarse_terms = [], []
                for i in order[start : start + pc.batch_size]:
                    vol, lab = items[i]
                    if cached is None:
                        att, cseg = self._attended_with_grad(models, vol, lab)
                        coarse_terms.append(cseg)
                    else:
                        att = cached[i]
                    batches.append(fine_batch(att, self.padded, cfg, lab))
                batch = FineBatch(
                    x=torch.cat([b.x for b in batches]),
                    class_ids=torch.cat([b.class_ids for b in batches]),
                    box_values=torch.cat([b.box_values for b in batches]),
                    subs=[],
                    target=torch.cat([b.target for b in batches]),
                )
                cseg = torch.stack(coarse_terms).mean() if coarse_terms else 0.0
                loss, pv, cl = joint_phase_loss(models, batch, cfg.loss, self.apv_cfg, cseg)
                self._check(loss, "joint", epoch)
                self._step(opt, loss)
                record["iterations"] += 1
                losses.append(loss.item())
                pv_trace.append(pv.item())
                cl_trace.append(cl.item())
            return losses

        models = self._run_epochs("joint", models, params, epoch_fn, val_fn)
        self.history["joint"]["pv_loss"] = pv_trace
        self.history["joint"]["cl_loss"] = cl_trace
        return models

    def _val_atts_cached(self, models: Models):
        if self._joint_val_atts is None:
            self._joint_val_atts = [run_coarse(models, v, self.cfg) for v, _ in self.val_items()]
        return self._joint_val_atts

    # orchestration ----------------------------------------------------------

    def save_phase(self, phase: str, models: Models) -> Path:
        rec = self.history.get(phase, {})
        path = self.cfg.checkpoint_path(phase)
        manifest = _manifest(self.cfg, phase, self.priors, rec.get("iterations", 0), len(rec.get("epochs", [])))
        save_checkpoint(path, models.modules(), manifest)
        return path

    def prerequisite(self, phase: str) -> Models:
        """Models to start ``phase`` from: fresh for coarse, else the previous phase's checkpoint."""
        if phase == "coarse":
            torch.manual_seed(self.cfg.seed)
            return Models.build(self.cfg, self.num_classes)
        prev = PHASES[PHASES.index(phase) - 1]
        path = self.cfg.checkpoint_path(prev)
        if not path.exists():
            raise MissingPrerequisiteError(phase, f"{prev} checkpoint {path} not found")
        try:
            return load_models(path, self.cfg, self.num_classes)
        except FormatError as exc:
            raise MissingPrerequisiteError(phase, str(exc)) from exc

    def train_phase(self, phase: str, models: Optional[Models] = None) -> Tuple[Models, Path]:
        if phase not in PHASES:
            raise ConfigurationError(f"unknown phase {phase!r}")
        if models is None:
            models = self.prerequisite(phase)
        torch.manual_seed(self.cfg.seed * 31 + PHASES.index(phase))
        models = getattr(self, f"train_{phase}")(models)
        return models, self.save_phase(phase, models)

    def evaluate(self, stages: Dict[str, Models], samples: Optional[Sequence[Sample]] = None) -> EvalReport:
        return evaluate(stages, list(samples if samples is not None else self.test_samples), self.priors, self.cfg)

    def fit(self) -> Tuple[Dict[str, Path], EvalReport]:
        checkpoints: Dict[str, Path] = {}
        trained: Dict[str, Models] = {}
        models = None
        for phase in PHASES:
            models, checkpoints[phase] = self.train_phase(phase, models.clone() if models is not None else None)
            trained[phase] = models
        stage_of = {"coarse": "coarse", "fine": "fine", "joint": "apv"}
        report = self.evaluate({stage_of[p]: m for p, m in trained.items()})
        return checkpoints, report


def fit(cfg: RunConfig, samples: Sequence[Sample], priors: Optional[PriorBoxSet] = None):
    """Train all three phases and evaluate on the configured split."""
    return Trainer(cfg, samples, priors).fit()
