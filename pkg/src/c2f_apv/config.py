"""Run configuration: nested dataclasses backed by a JSON file."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ConfigurationError
from .volume import AugSpec, PhantomSpec

FORMAT_VERSION = 1
PHASES = ("coarse", "fine", "joint")


@dataclass
class DatasetConfig:
    data_dir: str = "data"
    manifest: Optional[str] = None  # defaults to <data_dir>/manifest.json
    num_samples: int = 32
    test_fraction: float = 0.25
    val_fraction: float = 0.15


@dataclass
class WindowConfig:
    lo: float = -100.0
    hi: float = 300.0


@dataclass
class AugmentConfig:
    enabled: bool = True
    noise_sigmas: List[float] = field(default_factory=lambda: [0.5, 1.0, 1.5])
    rescale_factors: List[float] = field(default_factory=lambda: [0.9, 1.1])
    include_original: bool = True

    def spec(self) -> AugSpec:
        return AugSpec(list(self.noise_sigmas), list(self.rescale_factors), self.include_original)


@dataclass
class LossWeights:
    alpha: float = 2.0
    beta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError(f"loss weights must be >= 0, got {self}")


@dataclass
class OptimConfig:
    lr: float = 0.001
    momentum: float = 0.9
    clip_norm: Optional[float] = None  # global gradient-norm clip per step


@dataclass
class ScheduleConfig:
    patience: int = 10
    decay: float = 0.5


@dataclass
class APVConfig:
    w: float = 10.0
    sigma: float = 0.5
    mode: str = "complement"


@dataclass
class ModelConfig:
    coarse_width: int = 16
    saliency_width: int = 8
    recurrent_iters: int = 3
    fine_width: int = 8
    prior_dim: int = 32
    prior_hidden: int = 32
    dropout: float = 0.5


@dataclass
class CropConfig:
    pad_fraction: float = 0.15
    cube_size: int = 32
    source: str = "attended"


@dataclass
class PhaseConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: Optional[float] = None  # falls back to optim.lr
    slices_per_epoch: Optional[int] = None  # coarse: subsample slices each epoch
    train_coarse: bool = True  # joint: back-propagate into the coarse stage


def _default_phases() -> Dict[str, PhaseConfig]:
    return {
        "coarse": PhaseConfig(epochs=10, batch_size=32),
        "fine": PhaseConfig(epochs=20, batch_size=6),
        "joint": PhaseConfig(epochs=10, batch_size=1),
    }


@dataclass
class RunConfig:
    format_version: int = FORMAT_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    priors_path: Optional[str] = None  # defaults to <output_dir>/priors.json
    threads: int = 1
    threshold: float = 0.5
    eval_split: str = "test"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    window: WindowConfig = field(default_factory=WindowConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    apv: APVConfig = field(default_factory=APVConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    phases: Dict[str, PhaseConfig] = field(default_factory=_default_phases)

    @property
    def manifest_path(self) -> Path:
        return Path(self.dataset.manifest or Path(self.dataset.data_dir) / "manifest.json")

    @property
    def resolved_priors_path(self) -> Path:
        return Path(self.priors_path or Path(self.output_dir) / "priors.json")

    def checkpoint_path(self, phase: str) -> Path:
        return Path(self.output_dir) / "checkpoints" / f"{phase}.ckpt"

    def phase(self, name: str) -> PhaseConfig:
        return self.phases[name]

    def phase_lr(self, name: str) -> float:
        lr = self.phases[name].lr
        return self.optim.lr if lr is None else lr

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


_NESTED = {
    "dataset": DatasetConfig,
    "phantom": PhantomSpec,
    "window": WindowConfig,
    "augment": AugmentConfig,
    "loss": LossWeights,
    "optim": OptimConfig,
    "schedule": ScheduleConfig,
    "apv": APVConfig,
    "model": ModelConfig,
    "crop": CropConfig,
}


def _build(cls, values: Dict[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    raw = dict(raw)
    version = raw.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported config format_version {version}")
    kwargs: Dict[str, Any] = {}
    for key, value in raw.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, key)
        elif key == "phases":
            phases = _default_phases()
            for name, vals in value.items():
                if name not in PHASES:
                    raise ConfigurationError(f"unknown phase {name!r}")
                merged = dataclasses.asdict(phases[name])
                merged.update(vals)
                phases[name] = _build(PhaseConfig, merged, f"phases.{name}")
            kwargs[key] = phases
        else:
            kwargs[key] = value
    cfg = _build(RunConfig, kwargs, "config")
    # JSON has no tuples; restore them so loaded configs compare equal to built ones
    for f in dataclasses.fields(cfg.phantom):
        value = getattr(cfg.phantom, f.name)
        if isinstance(value, list):
            setattr(cfg.phantom, f.name, tuple(tuple(v) if isinstance(v, list) else v for v in value))
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return config_from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


def apply_overrides(cfg: RunConfig, overrides: List[str]) -> RunConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigurationError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(raw)
