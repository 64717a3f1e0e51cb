from dataclasses import replace

import numpy as np
import pytest
import torch
from torch.utils.data import Subset

from backbone import SwinRNN
from checkpoint_helper import CheckpointHelper
from constants import TRAIN_LOG_NAME
from errors import ConfigurationError, NumericalDivergenceError, PreconditionError, TrainingDivergedError
from grids import WindowDataset
from perturbation import SwinVRNN
from training_manager import (
    TrainConfig,
    TrainingManager,
    elbo_loss,
    reconstruction_loss,
    regime_check_inputs,
    regime_posterior_kl,
    regime_targets,
    teacher_forcing_schedule,
)
from utils import read_records


@pytest.fixture
def dataset(advection_store, advection_stats, tiny_cfg):
    return WindowDataset(advection_store, advection_stats, tiny_cfg.t_hist, tiny_cfg.t_pred)


def _fast(**overrides):
    values = dict(epochs=2, batch_size=4, max_steps=3, lr_backbone=1e-3, phase2_lr_backbone=1e-4, lr_perturbation=1e-3)
    values.update(overrides)
    return TrainConfig(**values)


def test_teacher_forcing_schedule_values():
    assert teacher_forcing_schedule(0, 100) == 1.0
    assert teacher_forcing_schedule(80, 100) == 0.0
    assert teacher_forcing_schedule(99, 100) == 0.0
    assert teacher_forcing_schedule(40, 100) == pytest.approx((0.1 - 0.01) / 0.99)
    ratios = [teacher_forcing_schedule(e, 100) for e in range(100)]
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
    assert teacher_forcing_schedule(0, 2) == 1.0
    assert teacher_forcing_schedule(1, 2) == 0.0
    # 1エポックだけなら最終エポック = 下限
    assert teacher_forcing_schedule(0, 1) == 0.0
    with pytest.raises(ValueError):
        teacher_forcing_schedule(-1, 10)


def test_reconstruction_loss_checks_shapes():
    pred = torch.ones(1, 2, 3, 4, 4)
    assert float(reconstruction_loss(pred, torch.zeros_like(pred))) == 1.0
    with pytest.raises(ValueError):
        reconstruction_loss(pred, torch.zeros(1, 2, 2, 4, 4))


def test_elbo_adds_weighted_mean_kl():
    recon = torch.tensor(2.0)
    assert float(elbo_loss(recon, [], 1e-4)) == 2.0
    assert float(elbo_loss(recon, [torch.tensor(1.0), torch.tensor(3.0)], 0.5)) == pytest.approx(3.0)


def test_elbo_is_linear_in_beta():
    recon = torch.tensor(1.25)
    kls = [torch.tensor(0.5), torch.tensor(2.0)]
    for beta in (0.0, 0.1, 0.2, 0.4, 1.0):
        assert float(elbo_loss(recon, kls, beta)) == pytest.approx(1.25 + beta * 1.25)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(phase=3)
    with pytest.raises(ConfigurationError):
        TrainConfig(phase2_lr_backbone=1e-3, lr_perturbation=1e-4)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ConfigurationError):
        TrainConfig(max_steps=0)
    assert TrainConfig(phase=2).backbone_lr() == 2e-5


def test_phase1_writes_checkpoint_and_log(tmp_path, tiny_cfg, dataset):
    torch.manual_seed(0)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    ckpt = manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast())
    assert ckpt == tmp_path / "phase1"

    manifest = CheckpointHelper(ckpt).load_manifest()
    assert manifest["kind"] == "swinrnn"
    assert manifest["total_steps"] == 3
    assert manifest["step"] == 3

    records = read_records(tmp_path / TRAIN_LOG_NAME)
    assert [r["step"] for r in records] == [0, 1, 2]
    assert all(np.isfinite(r["loss"]) for r in records)
    # max_steps=3 で1エポックに収まるので教師強制率は下限 (0)
    assert records[0]["tf_ratio"] == 0.0


def test_phase1_rejects_wrong_model_or_phase(tmp_path, tiny_cfg, tiny_pert_cfg, dataset):
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    with pytest.raises(ConfigurationError):
        manager.train_phase1(SwinVRNN(tiny_cfg, tiny_pert_cfg), dataset, _fast())
    with pytest.raises(ConfigurationError):
        manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast(phase=2))


def test_training_is_reproducible_for_a_seed(tmp_path, tiny_cfg, dataset):
    params = []
    for run in ("a", "b"):
        torch.manual_seed(0)
        manager = TrainingManager(tmp_path / run, device="cpu", log_callback=lambda m: None)
        ckpt = manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast())
        params.append(CheckpointHelper(ckpt).load_state_dict())
    for name, value in params[0].items():
        torch.testing.assert_close(value, params[1][name], rtol=0, atol=0)


def test_checkpoint_restores_identical_forecasts(tmp_path, tiny_cfg, dataset, tiny_history):
    torch.manual_seed(0)
    model = SwinRNN(tiny_cfg)
    ckpt = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None).train_phase1(model, dataset, _fast())
    restored = CheckpointHelper(ckpt).load_model()
    model.eval()
    restored.eval()
    with torch.no_grad():
        torch.testing.assert_close(restored.rollout(tiny_history, 4), model.rollout(tiny_history, 4))


def test_phase2_needs_a_phase1_checkpoint(tmp_path, tiny_cfg, tiny_pert_cfg, dataset):
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    with pytest.raises(PreconditionError):
        manager.train_phase2(SwinVRNN(tiny_cfg, tiny_pert_cfg), dataset, _fast(phase=2), tmp_path / "phase1")


def test_phase2_loads_backbone_and_trains_jointly(tmp_path, tiny_cfg, tiny_pert_cfg, dataset):
    torch.manual_seed(0)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    phase1 = manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast())

    model = SwinVRNN(tiny_cfg, replace(tiny_pert_cfg, ramp_fraction=0.5))
    phase2 = manager.train_phase2(model, dataset, _fast(phase=2, max_steps=4), phase1)
    manifest = CheckpointHelper(phase2).load_manifest()
    assert manifest["kind"] == "swinvrnn"
    assert manifest["phase1_checkpoint"] == str(phase1)
    assert manifest["perturbation_config"]["latent_channels"] == 2

    phase2_records = read_records(tmp_path / TRAIN_LOG_NAME)[-4:]
    assert [r["ramp"] for r in phase2_records] == [0.0, 0.5, 1.0, 1.0]
    assert all(r["kl"] >= 0.0 for r in phase2_records)

    restored = CheckpointHelper(phase2).load_model()
    assert isinstance(restored, SwinVRNN)


def test_phase2_rejects_mismatched_backbone(tmp_path, tiny_cfg, tiny_pert_cfg, dataset):
    torch.manual_seed(0)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    phase1 = manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast(max_steps=1))
    other = SwinVRNN(replace(tiny_cfg, decoder_depth=2), tiny_pert_cfg)
    with pytest.raises(ConfigurationError):
        manager.train_phase2(other, dataset, _fast(phase=2), phase1)


def test_resume_continues_from_saved_step(tmp_path, tiny_cfg, dataset):
    torch.manual_seed(0)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    cfg = _fast(epochs=1, batch_size=18, max_steps=None)
    manager.train_phase1(SwinRNN(tiny_cfg), dataset, cfg)

    resumed = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    ckpt = resumed.train_phase1(SwinRNN(tiny_cfg), dataset, _fast(epochs=2, batch_size=18, max_steps=None), resume=True)
    manifest = CheckpointHelper(ckpt).load_manifest()
    assert manifest["step"] == 4
    assert [h["epoch"] for h in manifest["history"]] == [0, 1]


def test_divergence_reports_last_checkpoint(tmp_path, tiny_cfg, dataset, monkeypatch):
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)

    def diverge(*args, **kwargs):
        raise NumericalDivergenceError(-1, "training loss became non-finite")

    monkeypatch.setattr(manager, "train_step", diverge)
    with pytest.raises(TrainingDivergedError) as info:
        manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast())
    assert info.value.step == 0
    assert info.value.checkpoint is None


def test_empty_dataset_is_a_precondition_error(tmp_path, tiny_cfg, advection_store, advection_stats):
    empty = WindowDataset(advection_store, advection_stats, 2, 3, time_range=("2015-01-01", "2015-01-01 06:00"))
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    with pytest.raises(PreconditionError):
        manager.train_phase1(SwinRNN(tiny_cfg), empty, _fast())


def test_regime_targets_drift_in_opposite_directions(rng):
    history = rng.normal(size=(3, 2, 8, 16)).astype(np.float32)
    east, west = regime_targets(history, [0, 1], 3, [1, -1])
    assert east.shape == (2, 3, 8, 16)
    np.testing.assert_allclose(east[:, 0], np.roll(history[[0, 1], -1], 1, axis=-1), atol=1e-5)
    np.testing.assert_allclose(west[:, 2], np.roll(history[[0, 1], -1], -3, axis=-1), atol=1e-5)


def test_regime_posterior_kl_is_non_negative(tiny_cfg, tiny_pert_cfg, tiny_history):
    model = SwinVRNN(tiny_cfg, tiny_pert_cfg)
    a = torch.randn(2, 2, 3, 8, 16)
    assert regime_posterior_kl(model, tiny_history, a, a) == pytest.approx(0.0, abs=1e-5)
    assert regime_posterior_kl(model, tiny_history, a, -a) >= 0.0


def test_phase2_records_regime_posterior_kl_per_epoch(tmp_path, tiny_cfg, tiny_pert_cfg, dataset):
    torch.manual_seed(0)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    phase1 = manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast())
    check = regime_check_inputs(dataset.sample(0), tiny_cfg.prognostic_channels, [1.0, -1.0])
    assert check[0].shape == (3, 2, 8, 16)
    assert [t.shape for t in check[1]] == [(2, 3, 8, 16), (2, 3, 8, 16)]

    cfg = _fast(phase=2, epochs=2, batch_size=18, max_steps=None)
    phase2 = manager.train_phase2(SwinVRNN(tiny_cfg, tiny_pert_cfg), dataset, cfg, phase1, regime_check=check)
    regimes = [r for r in read_records(tmp_path / TRAIN_LOG_NAME) if r.get("kind") == "regime"]
    assert [r["epoch"] for r in regimes] == [0, 1]
    assert all(np.isfinite(r["regime_kl"]) and r["regime_kl"] >= 0.0 for r in regimes)
    history = CheckpointHelper(phase2).load_manifest()["history"]
    assert [h["regime_kl"] for h in history] == [r["regime_kl"] for r in regimes]


def test_phase2_first_step_reproduces_the_phase1_backbone(tmp_path, tiny_cfg, tiny_pert_cfg, dataset, monkeypatch):
    torch.manual_seed(0)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    phase1 = manager.train_phase1(SwinRNN(tiny_cfg), dataset, _fast())
    backbone = CheckpointHelper(phase1).load_model().eval()

    seen = []
    original = manager.train_step

    def first_step(model, history, target, *args):
        if not seen:
            with torch.no_grad():
                seen.append((model.ramp, history.clone(), model.rollout(history, target.shape[2], target=target)))
        return original(model, history, target, *args)

    monkeypatch.setattr(manager, "train_step", first_step)
    model = SwinVRNN(tiny_cfg, replace(tiny_pert_cfg, ramp_fraction=0.5))
    manager.train_phase2(model, dataset, _fast(phase=2, max_steps=2), phase1)

    ramp, history, pred = seen[0]
    assert ramp == 0.0
    with torch.no_grad():
        expected = backbone.rollout(history, pred.shape[2])
    assert torch.equal(pred, expected)


@pytest.mark.slow
def test_tiny_backbone_memorizes_four_sequences(tmp_path, tiny_cfg, dataset):
    torch.manual_seed(0)
    four = Subset(dataset, range(4))
    cfg = _fast(epochs=2000, batch_size=4, max_steps=2000, checkpoint_every=1000)
    manager = TrainingManager(tmp_path, device="cpu", log_callback=lambda m: None)
    manager.train_phase1(SwinRNN(replace(tiny_cfg, stage_dims=(16, 32, 32, 32))), four, cfg)
    losses = [r["loss"] for r in read_records(tmp_path / TRAIN_LOG_NAME)]
    assert len(losses) == 2000
    assert min(losses) < 1e-3
