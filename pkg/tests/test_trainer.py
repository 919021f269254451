import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from c2f_apv.apv import SoftMaskConfig
from c2f_apv.checkpoint import load_checkpoint
from c2f_apv.config import LossWeights
from c2f_apv.dataset import synth_dataset
from c2f_apv.errors import ConfigurationError, DivergenceError, MissingPrerequisiteError, ParameterError
from c2f_apv.evaluation import EvalReport, dsc_metric, evaluate
from c2f_apv.pipeline import Models, fine_batch, run_coarse, volume_tensor
from c2f_apv.prior_box import compute_prior_boxes
from c2f_apv.trainer import TrainState, Trainer, fine_phase_loss, joint_phase_loss, schedule_step, total_loss

from conftest import tiny_config


def dataset(cfg):
    return synth_dataset(cfg.phantom, cfg.dataset.num_samples, cfg.dataset.test_fraction, cfg.seed)


def priors_for(samples):
    return compute_prior_boxes([s.labels for s in samples if s.split == "train"], 3)


# ------------------------------------------------------------------- metric


def test_dsc_examples():
    y = np.zeros((4, 4, 4), bool)
    y[0, :2, :2] = True
    assert dsc_metric(y, y) == 1.0
    z = np.zeros_like(y)
    z[3, :2, :2] = True
    assert dsc_metric(y, z) == 0.0
    z = np.zeros_like(y)
    z[0, 0, :2] = True
    z[1, 0, :2] = True
    assert dsc_metric(y, z) == 0.5
    assert dsc_metric(np.zeros(3), np.zeros(3)) == 1.0
    assert dsc_metric(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(ParameterError):
        dsc_metric(np.zeros(3), np.zeros(4))


def test_dsc_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.random((2, 5, 5, 5)) < rng.random(2)[:, None, None, None]
        d = dsc_metric(a, b)
        assert d == dsc_metric(b, a) and 0.0 <= d <= 1.0


# --------------------------------------------------------------- total loss


def test_total_loss():
    w = LossWeights()
    assert total_loss(1.0, 1.0, 1.0, w) == 3.5
    assert total_loss(0.0, 0.0, 0.0, w) == 0.0
    off = LossWeights(gamma=0.0)
    assert total_loss(0.3, 0.7, 123.0, off) == 2 * 0.3 + 0.7
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = rng.random(3)
        assert total_loss(a, b, c, w) == pytest.approx(2 * a + b + 0.5 * c, abs=1e-15)
    with pytest.raises(ConfigurationError):
        LossWeights(alpha=-1)


# ----------------------------------------------------------------- schedule


def run_schedule(metrics, lr=0.001):
    state = TrainState(lr=lr)
    lrs = []
    for m in metrics:
        state = schedule_step(state, m)
        lrs.append(state.lr)
    return state, lrs


def simulate(metrics, lr=0.001, limit=10):
    best, patience, out = -math.inf, 0, []
    for m in metrics:
        if m > best:
            best, patience = m, 0
        else:
            patience += 1
            if patience == limit:
                lr, patience = lr / 2, 0
        out.append(lr)
    return out


def test_schedule_halves_on_tenth_stagnant_epoch():
    state, lrs = run_schedule([0.1, 0.2, 0.3] + [0.3] * 10)
    assert lrs[:12] == [0.001] * 12 and lrs[12] == 0.0005
    assert state.patience == 0 and state.epoch == 13


def test_schedule_reset_by_improvement():
    _, lrs = run_schedule([0.5] + [0.4] * 9 + [0.6])
    assert set(lrs) == {0.001}
    _, lrs = run_schedule(list(np.linspace(0, 1, 40)))
    assert set(lrs) == {0.001}


def test_schedule_matches_simulation():
    rng = np.random.default_rng(2)
    for _ in range(20):
        metrics = list(np.round(rng.random(60) ** 0.2, 2))
        assert run_schedule(metrics)[1] == simulate(metrics)


def test_schedule_rejects_bad_input():
    with pytest.raises(ParameterError):
        schedule_step(TrainState(), float("nan"))
    with pytest.raises(ParameterError):
        TrainState(lr=0)
    with pytest.raises(ParameterError):
        TrainState(phase="warmup")


# ------------------------------------------------------------ gamma = 0 path


def test_gamma_zero_matches_fine_phase_gradients(tiny_cfg):
    samples = dataset(tiny_cfg)
    priors = priors_for(samples).padded(tiny_cfg.crop.pad_fraction)
    torch.manual_seed(0)
    models = Models.build(tiny_cfg, 3).to(torch.float64)
    s = samples[0]
    att = run_coarse(models, volume_tensor(s.volume, tiny_cfg).double(), tiny_cfg)
    batch = fine_batch(att, priors, tiny_cfg, torch.from_numpy(s.labels.data.astype(np.int64)))
    w = LossWeights(gamma=0.0)

    def grads(loss_fn):
        models.train()
        for m in models.modules().values():
            m.zero_grad()
        torch.manual_seed(3)
        loss_fn().backward()
        return [p.grad.clone() for p in list(models.fine.parameters()) + list(models.encoder.parameters())]

    state = {k: v.clone() for k, v in models.fine.state_dict().items()}
    g_fine = grads(lambda: fine_phase_loss(models, batch, w))
    models.fine.load_state_dict(state)
    g_joint = grads(lambda: joint_phase_loss(models, batch, w, SoftMaskConfig())[0])
    diff = max((a - b).abs().max().item() for a, b in zip(g_fine, g_joint))
    assert diff <= 1e-9


# ---------------------------------------------------------------- evaluation


def test_evaluate_with_oracle_predictors(tiny_cfg):
    samples = [s for s in dataset(tiny_cfg) if s.split == "test"]
    priors = priors_for(dataset(tiny_cfg))
    report = evaluate(
        {"coarse": lambda s: s.labels.data, "fine": lambda s: np.zeros_like(s.labels.data)}, samples, priors, tiny_cfg
    )
    assert report.stages == ["coarse", "fine"]
    for n in (1, 2, 3):
        assert report.scores["coarse"][n] == [1.0] * len(samples)
        assert report.scores["fine"][n] == [0.0] * len(samples)


def test_report_statistics_and_json(tmp_path):
    rng = np.random.default_rng(4)
    scores = {st: {n: list(rng.random(7)) for n in (1, 2)} for st in ("coarse", "fine", "apv")}
    report = EvalReport([f"s{i}" for i in range(7)], 2, scores)
    for st in scores:
        for n in (1, 2):
            vals = np.asarray(scores[st][n])
            stats = report.stats(st, n)
            assert abs(stats["mean"] - vals.sum() / 7) <= 1e-9
            assert abs(stats["std"] - math.sqrt(((vals - vals.mean()) ** 2).sum() / 7)) <= 1e-9
            assert stats["min"] == vals.min() and stats["max"] == vals.max()
    report.save(tmp_path / "r.json", tmp_path / "r.txt")
    back = EvalReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back.scores == report.scores and back.sample_ids == report.sample_ids
    table = (tmp_path / "r.txt").read_text()
    assert "Our-C" in table and "Our-F" in table and "Our-A" in table


def test_evaluate_rejects_grid_mismatch(tiny_cfg):
    samples = dataset(tiny_cfg)
    priors = priors_for(samples)
    bad = dataclasses.replace(priors, grid=(32, 32, 32))
    with pytest.raises(ConfigurationError):
        evaluate({"coarse": lambda s: s.labels.data}, samples, bad, tiny_cfg)


# ------------------------------------------------------------------ training


def test_zero_epoch_fit_runs_end_to_end(tmp_path):
    cfg = tiny_config(tmp_path, phases={k: {"epochs": 0} for k in ("coarse", "fine", "joint")})
    samples = dataset(cfg)
    checkpoints, report = Trainer(cfg, samples, priors_for(samples)).fit()
    assert set(checkpoints) == {"coarse", "fine", "joint"} and all(p.exists() for p in checkpoints.values())
    assert report.stages == ["coarse", "fine", "apv"]
    assert all(0.0 <= v <= 1.0 for st in report.scores.values() for vals in st.values() for v in vals)


def test_fit_is_deterministic(tmp_path):
    reports, joints = [], []
    for run in ("a", "b"):
        cfg = tiny_config(tmp_path / run)
        samples = dataset(cfg)
        trainer = Trainer(cfg, samples, priors_for(samples))
        checkpoints, report = trainer.fit()
        reports.append(report.scores)
        joints.append(load_checkpoint(checkpoints["joint"])[0])
        assert len(trainer.history["joint"]["pv_loss"]) == trainer.history["joint"]["iterations"]
    assert reports[0] == reports[1]
    # output directories differ, so compare tensors rather than archive bytes
    for mod in joints[0]:
        assert all(torch.equal(joints[0][mod][k], joints[1][mod][k]) for k in joints[0][mod])


def test_checkpoint_manifest(tmp_path):
    cfg = tiny_config(tmp_path, phases={"coarse": {"epochs": 0}})
    samples = dataset(cfg)
    trainer = Trainer(cfg, samples, priors_for(samples))
    _, path = trainer.train_phase("coarse")
    states, manifest = load_checkpoint(path)
    assert manifest["seed"] == cfg.seed and manifest["config_hash"] == cfg.digest()
    assert manifest["phase"] == "coarse" and set(states) == {"coarse", "saliency", "fine", "encoder"}


def test_missing_prerequisite(tiny_cfg):
    samples = dataset(tiny_cfg)
    trainer = Trainer(tiny_cfg, samples, priors_for(samples))
    with pytest.raises(MissingPrerequisiteError, match="coarse") as err:
        trainer.train_phase("fine")
    assert err.value.exit_code == 3


def test_missing_priors_is_configuration_error(tiny_cfg):
    with pytest.raises(ConfigurationError):
        Trainer(tiny_cfg, dataset(tiny_cfg))


def test_non_finite_loss_is_divergence(tiny_cfg):
    samples = dataset(tiny_cfg)
    trainer = Trainer(tiny_cfg, samples, priors_for(samples))
    with pytest.raises(DivergenceError, match="epoch 4") as err:
        trainer._check(torch.tensor(float("nan")), "fine", 4)
    assert err.value.exit_code == 4


def test_validation_split_is_carved_from_training(tiny_cfg):
    samples = dataset(tiny_cfg)
    trainer = Trainer(tiny_cfg, samples, priors_for(samples))
    train_ids = {s.id for s in samples if s.split == "train"}
    fit_ids = {s.id for s in trainer.fit_samples}
    val_ids = {s.id for s in trainer.val_samples}
    assert fit_ids | val_ids == train_ids and not fit_ids & val_ids and val_ids
