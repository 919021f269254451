"""``c2f-apv`` command line: synth, priors, train, infer, eval.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 missing
prerequisite checkpoint, 4 divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import PHASES, RunConfig, apply_overrides, config_from_dict, load_config, save_config
from .dataset import load_dataset, synth_dataset, write_dataset
from .errors import C2FError, ConfigurationError, MissingPrerequisiteError
from .evaluation import EvalReport, evaluate
from .pipeline import predict, volume_tensor
from .prior_box import compute_prior_boxes, load_priors, save_priors
from .trainer import Trainer, load_models
from .volume import LabelMap, save_labels

log = logging.getLogger("c2f_apv")

STAGE_PHASE = {"coarse": "coarse", "fine": "fine", "apv": "joint"}
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _load_samples(cfg: RunConfig):
    path = cfg.manifest_path
    if not path.exists():
        raise ConfigurationError(f"manifest {path} not found; run the synth command first")
    return load_dataset(path)


def _load_priors(cfg: RunConfig):
    path = cfg.resolved_priors_path
    if not path.exists():
        raise ConfigurationError(f"priors file {path} not found; run the priors command first")
    return load_priors(path)


def _stage_models(cfg: RunConfig, stage: str, num_classes: int):
    phase = STAGE_PHASE[stage]
    path = cfg.checkpoint_path(phase)
    if not path.exists():
        raise MissingPrerequisiteError(phase, f"checkpoint {path} not found")
    return load_models(path, cfg, num_classes)


# ------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, args) -> int:
    cfg.phantom.validate()
    ds = cfg.dataset
    samples = synth_dataset(cfg.phantom, ds.num_samples, ds.test_fraction, cfg.seed)
    manifest = write_dataset(samples, ds.data_dir)
    n_test = sum(s.split == "test" for s in samples)
    print(f"wrote {len(samples)} samples ({n_test} test) to {manifest}")
    return 0


def cmd_priors(cfg: RunConfig, args) -> int:
    samples = [s for s in _load_samples(cfg) if s.split == "train"]
    if not samples:
        raise ConfigurationError("manifest lists no training samples")
    num_classes = max(s.labels.num_classes for s in samples)
    priors = compute_prior_boxes([s.labels for s in samples], num_classes)
    out = Path(args.out) if args.out else cfg.resolved_priors_path
    save_priors(priors, out)
    print(f"wrote {num_classes} prior boxes to {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    trainer = Trainer(cfg, _load_samples(cfg), _load_priors(cfg))
    out = Path(cfg.output_dir)
    save_config(cfg, out / "config.json")
    phases = [args.phase] if args.phase else list(PHASES)
    models = None
    for phase in phases:
        models, path = trainer.train_phase(phase, models.clone() if models is not None else None)
        with open(out / f"history_{phase}.json", "w") as fh:
            json.dump(trainer.history.get(phase, {}), fh, indent=2)
        print(f"{phase}: checkpoint {path}")
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    priors = _load_priors(cfg)
    samples = {s.id: s for s in _load_samples(cfg)}
    if args.sample not in samples:
        raise ConfigurationError(f"sample {args.sample!r} not in manifest {cfg.manifest_path}")
    sample = samples[args.sample]
    models = _stage_models(cfg, args.stage, priors.num_classes)
    pred = predict(models, sample.volume, priors, cfg, args.stage)
    stem = Path(args.out) if args.out else Path(cfg.output_dir) / "predictions" / f"{sample.id}.{args.stage}"
    save_labels(LabelMap(pred, priors.num_classes, sample.id), stem)
    print(f"wrote {stem}.raw")
    if args.overlay:
        _overlays(cfg, sample, pred, Path(cfg.output_dir) / "overlays" / args.stage / sample.id)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    priors = _load_priors(cfg)
    samples = [s for s in _load_samples(cfg) if s.split == cfg.eval_split]
    if not samples:
        raise ConfigurationError(f"manifest has no samples in split {cfg.eval_split!r}")
    stages = {stage: _stage_models(cfg, stage, priors.num_classes) for stage in STAGE_PHASE}
    report: EvalReport = evaluate(stages, samples, priors, cfg)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "report.json"
    report.save(out, out.with_suffix(".txt"))
    print(report.to_table(), end="")
    if args.overlay:
        for s in samples:
            pred = predict(stages["apv"], s.volume, priors, cfg, "apv")
            _overlays(cfg, s, pred, Path(cfg.output_dir) / "overlays" / "apv" / s.id)
    return 0


def _overlays(cfg: RunConfig, sample, pred, out_dir: Path) -> None:
    from .overlay import render_overlays

    paths = render_overlays(volume_tensor(sample.volume, cfg).numpy(), pred, out_dir, truth=sample.labels.data)
    print(f"wrote {len(paths)} overlay images to {out_dir}")


COMMANDS = {"synth": cmd_synth, "priors": cmd_priors, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="c2f-apv", description="Coarse-to-fine multi-organ segmentation with an adversarial performance validator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic phantom dataset and manifest")
    p = sub.add_parser("priors", parents=[common], help="compute per-class prior boxes from the training split")
    p.add_argument("--out", help="priors file (default: <output_dir>/priors.json)")
    p = sub.add_parser("train", parents=[common], help="train one phase, or all phases in order")
    p.add_argument("--phase", choices=PHASES)
    p = sub.add_parser("infer", parents=[common], help="predict a label map for one sample")
    p.add_argument("--sample", required=True, help="sample id from the manifest")
    p.add_argument("--stage", choices=tuple(STAGE_PHASE), default="apv")
    p.add_argument("--out", help="output stem for the .raw/.json label pair")
    p.add_argument("--overlay", action="store_true", help="also write per-slice contour images")
    p = sub.add_parser("eval", parents=[common], help="evaluate all three stages on the evaluation split")
    p.add_argument("--out", help="JSON report path (a .txt table is written next to it)")
    p.add_argument("--overlay", action="store_true", help="also write per-slice contour images")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except C2FError as exc:
        print(f"c2f-apv: error: {exc}", file=sys.stderr)
        # bad values reaching the library are data/config problems here, not usage
        return EXIT_DATA if exc.exit_code == EXIT_USAGE else exc.exit_code
    except OSError as exc:
        print(f"c2f-apv: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
