"""Training management: losses, scheduled sampling and the two-phase procedure"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import CosineAnnealingLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from backbone import SwinRNN
from checkpoint_helper import CheckpointHelper
from constants import TRAIN_LOG_NAME
from errors import ConfigurationError, NumericalDivergenceError, PreconditionError, TrainingDivergedError
from grids import shift_longitude
from perturbation import SwinVRNN, kl_divergence, ramp_multiplier
from platform_helpers import DeviceHelper
from utils import append_record, log_message


@dataclass
class TrainConfig:
    """学習設定 (lr_backbone は第1段階、phase2_lr_backbone は第2段階のバックボーン学習率)"""

    phase: int = 1
    epochs: int = 100
    batch_size: int = 4
    lr_backbone: float = 2e-4
    phase2_lr_backbone: float = 2e-5
    lr_perturbation: float = 2e-4
    lr_schedule: str = "cosine"
    beta: float = 1e-4
    seed: int = 0
    teacher_floor: float = 0.01
    teacher_end_fraction: float = 0.8
    weight_decay: float = 0.01
    adam_betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    max_steps: Optional[int] = None
    stride: int = 1
    num_workers: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.phase not in (1, 2):
            raise ConfigurationError("training.phase must be 1 or 2")
        if self.epochs < 1:
            raise ConfigurationError("training.epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("training.batch_size must be at least 1")
        if self.lr_schedule != "cosine":
            raise ConfigurationError("training.lr_schedule supports only 'cosine'")
        for key in ("lr_backbone", "phase2_lr_backbone", "lr_perturbation"):
            if getattr(self, key) <= 0:
                raise ConfigurationError(f"training.{key} must be positive")
        if self.phase2_lr_backbone >= self.lr_perturbation:
            raise ConfigurationError(
                "training.phase2_lr_backbone must be smaller than training.lr_perturbation"
            )
        if not 0.0 < self.teacher_floor < 1.0:
            raise ConfigurationError("training.teacher_floor must lie in (0, 1)")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError("training.max_steps must be at least 1")

    def backbone_lr(self) -> float:
        return self.lr_backbone if self.phase == 1 else self.phase2_lr_backbone

    def to_dict(self) -> dict:
        data = asdict(self)
        data["adam_betas"] = list(self.adam_betas)
        return data


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """正規化単位での平均二乗誤差"""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {list(pred.shape)} and target {list(target.shape)} differ in shape")
    return F.mse_loss(pred, target)


def elbo_loss(recon, kl_per_step: Sequence, beta: float) -> torch.Tensor:
    """recon + beta * mean(KL)"""
    recon = torch.as_tensor(recon)
    if len(kl_per_step) == 0:
        return recon
    kl = torch.stack([torch.as_tensor(k, dtype=recon.dtype, device=recon.device) for k in kl_per_step])
    return recon + beta * kl.mean()


def teacher_forcing_schedule(epoch: int, total_epochs: int, floor: float = 0.01, end_fraction: float = 0.8) -> float:
    """指数減衰する教師強制率

    ratio(e) = max(0, (k^e - floor) / (1 - floor)), k = floor^(1/e_end)。
    e_end = min(end_fraction * E, E - 1) 以降は0。
    """
    if total_epochs < 1 or epoch < 0:
        raise ValueError("epoch must be >= 0 and total_epochs >= 1")
    e_end = min(end_fraction * total_epochs, total_epochs - 1)
    if epoch >= e_end:
        return 0.0
    if epoch == 0:
        return 1.0
    k = floor ** (1.0 / e_end)
    return max(0.0, (k ** epoch - floor) / (1.0 - floor))


@torch.no_grad()
def regime_posterior_kl(model: SwinVRNN, history: torch.Tensor, target_a: torch.Tensor, target_b: torch.Tensor) -> float:
    """同じ履歴で異なる領域の目標を与えたときの事後分布間KL"""
    _, pyramid = model.backbone.initial_state(history)
    h = pyramid[model.latent_scale]
    q_a = model.perturbation.posterior_infer(target_a[:, :, 0], h)
    q_b = model.perturbation.posterior_infer(target_b[:, :, 0], h)
    return float(kl_divergence(q_a, q_b, reduction="sum"))


def regime_targets(history: np.ndarray, prognostic, t_pred: int, velocities) -> list[np.ndarray]:
    """最終履歴フレームを各ドリフト速度で移流させた目標列 [n_out, t_pred, H, W]"""
    last = np.asarray(history)[list(prognostic), -1]
    return [
        np.stack([shift_longitude(last, v * (t + 1)) for t in range(t_pred)], axis=1).astype(np.float32)
        for v in velocities
    ]


def regime_check_inputs(sample, prognostic, velocities):
    """1サンプルから領域KL用の (履歴, [目標A, 目標B]) を作る"""
    targets = regime_targets(sample.history, prognostic, sample.target.shape[1], list(velocities)[:2])
    history = torch.from_numpy(np.ascontiguousarray(sample.history, dtype=np.float32))
    return history, [torch.from_numpy(t) for t in targets]


class TrainingManager:
    """2段階学習を管理するクラス"""

    def __init__(self, run_dir, device=None, log_callback=None):
        self.run_dir = Path(run_dir)
        self.device = torch.device(device) if device is not None else DeviceHelper.get_device()
        self.log_callback = log_callback or log_message
        self.train_log_file = self.run_dir / TRAIN_LOG_NAME
        self.history = []

    def _log_message(self, message):
        self.log_callback(message)

    def make_loader(self, dataset, cfg: TrainConfig) -> DataLoader:
        self.loader_generator = torch.Generator()
        return DataLoader(
            dataset,
            batch_size=cfg.batch_size,
            shuffle=True,
            generator=self.loader_generator,
            num_workers=cfg.num_workers,
        )

    def build_optimizer(self, model, cfg: TrainConfig) -> AdamW:
        if isinstance(model, SwinVRNN):
            groups = [
                {"params": list(model.backbone.parameters()), "lr": cfg.backbone_lr(), "name": "backbone"},
                {"params": list(model.perturbation.parameters()), "lr": cfg.lr_perturbation, "name": "perturbation"},
            ]
        else:
            groups = [{"params": list(model.parameters()), "lr": cfg.backbone_lr(), "name": "backbone"}]
        return AdamW(groups, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)

    def train_step(self, model, history, target, optimizer, scheduler, cfg: TrainConfig, tf_ratio, generator):
        """1ステップの順伝播・逆伝播・更新を行い記録を返す"""
        model.train()
        history = history.to(self.device)
        target = target.to(self.device)
        t_pred = target.shape[2]
        if isinstance(model, SwinVRNN):
            pred = model.rollout(history, t_pred, target=target, generator=generator)
            kls = model.kl_steps
        else:
            pred = model.rollout(history, t_pred, teacher=target, teacher_ratio=tf_ratio, generator=generator)
            kls = []
        recon = reconstruction_loss(pred, target)
        loss = elbo_loss(recon, kls, cfg.beta)
        if not torch.isfinite(loss):
            raise NumericalDivergenceError(-1, "training loss became non-finite")

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        lr = optimizer.param_groups[0]["lr"]
        optimizer.step()
        scheduler.step()
        return {
            "loss": float(loss.detach()),
            "recon": float(recon.detach()),
            "kl": float(torch.stack(kls).mean().detach()) if kls else 0.0,
            "lr": lr,
            "tf_ratio": tf_ratio,
        }

    def train_phase1(self, model: SwinRNN, dataset, cfg: TrainConfig, manifest_extra=None, resume=False):
        """摂動モジュールなしでバックボーンを学習"""
        if cfg.phase != 1:
            raise ConfigurationError("train_phase1 needs training.phase = 1")
        if isinstance(model, SwinVRNN):
            raise ConfigurationError("phase 1 trains the deterministic backbone only")
        return self._run(model, dataset, cfg, self.run_dir / "phase1", manifest_extra, resume)

    def train_phase2(
        self, model: SwinVRNN, dataset, cfg: TrainConfig, phase1_ckpt, manifest_extra=None, resume=False, regime_check=None
    ):
        """第1段階のバックボーンを読み込み、全体を同時学習

        regime_checkを渡すとエポックごとに領域別事後分布間のKLを記録する。
        """
        if cfg.phase != 2:
            raise ConfigurationError("train_phase2 needs training.phase = 2")
        if not isinstance(model, SwinVRNN):
            raise ConfigurationError("phase 2 needs a SwinVRNN model")
        helper = CheckpointHelper(phase1_ckpt)
        if not helper.exists():
            raise PreconditionError(f"phase 2 needs a phase-1 checkpoint; none found at {phase1_ckpt}")
        helper.load_backbone_into(model)
        model.set_ramp(0.0)
        extra = dict(manifest_extra or {})
        extra["phase1_checkpoint"] = str(phase1_ckpt)
        return self._run(model, dataset, cfg, self.run_dir / "phase2", extra, resume, regime_check)

    def _run(self, model, dataset, cfg: TrainConfig, checkpoint_dir, manifest_extra, resume, regime_check=None):
        DeviceHelper.configure_determinism(cfg.seed)
        if len(dataset) == 0:
            raise PreconditionError("the training range contains no complete windows")
        model.to(self.device)
        loader = self.make_loader(dataset, cfg)
        steps_per_epoch = len(loader)
        total_steps = steps_per_epoch * cfg.epochs
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)
        n_epochs = math.ceil(total_steps / steps_per_epoch)

        optimizer = self.build_optimizer(model, cfg)
        scheduler = CosineAnnealingLR(optimizer, T_max=total_steps)
        generator = torch.Generator(device=self.device)
        generator.manual_seed(cfg.seed)
        ramp_steps = 0
        if isinstance(model, SwinVRNN):
            ramp_steps = int(round(model.pert_cfg.ramp_fraction * total_steps))

        helper = CheckpointHelper(checkpoint_dir)
        step, start_epoch = 0, 0
        self.history = []
        if resume and helper.exists():
            model.load_state_dict(helper.load_state_dict())
            state = helper.load_trainer_state(optimizer, scheduler)
            generator.set_state(state["generator"])
            step, start_epoch = state["step"], state["epoch"] + 1
            self.history = helper.load_manifest().get("history", [])
            self._log_message(f"チェックポイントから再開します: epoch {start_epoch}, step {step}")

        manifest = {
            "phase": cfg.phase,
            "model_config": (model.model_cfg if isinstance(model, SwinVRNN) else model.cfg).to_dict(),
            "train_config": cfg.to_dict(),
            "total_steps": total_steps,
        }
        if isinstance(model, SwinVRNN):
            manifest["perturbation_config"] = model.pert_cfg.to_dict()
        manifest.update(manifest_extra or {})

        self._log_message(
            f"第{cfg.phase}段階の学習を開始します: {n_epochs} epochs x {steps_per_epoch} steps "
            f"(total {total_steps}, device {self.device})"
        )
        for epoch in range(start_epoch, n_epochs):
            tf_ratio = 0.0
            if cfg.phase == 1:
                tf_ratio = teacher_forcing_schedule(epoch, n_epochs, cfg.teacher_floor, cfg.teacher_end_fraction)
            self.loader_generator.manual_seed(cfg.seed + epoch)
            losses = []
            for history, target in tqdm(loader, desc=f"epoch {epoch}", leave=False, disable=None):
                if step >= total_steps:
                    break
                ramp = 1.0
                if isinstance(model, SwinVRNN):
                    ramp = ramp_multiplier(step, ramp_steps)
                    model.set_ramp(ramp)
                try:
                    record = self.train_step(model, history, target, optimizer, scheduler, cfg, tf_ratio, generator)
                except NumericalDivergenceError:
                    self._handle_divergence(model, helper, step)
                record.update(step=step, epoch=epoch, ramp=ramp)
                append_record(self.train_log_file, record)
                losses.append(record["loss"])
                step += 1

            summary = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)) if losses else None, "tf_ratio": tf_ratio}
            self.history.append(summary)
            if regime_check is not None and isinstance(model, SwinVRNN):
                summary["regime_kl"] = self.regime_kl(model, regime_check)
                append_record(
                    self.train_log_file,
                    {"kind": "regime", "epoch": epoch, "step": step, "regime_kl": summary["regime_kl"]},
                )
                self._log_message(f"epoch {epoch}: 領域別事後分布間のKL {summary['regime_kl']:.6g}")
            loss_text = f"{summary['loss']:.6g}" if losses else "n/a"
            self._log_message(f"epoch {epoch}: loss {loss_text}, tf_ratio {tf_ratio:.3f}")
            last_epoch = epoch == n_epochs - 1 or step >= total_steps
            if last_epoch or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                manifest.update(epoch=epoch, step=step, history=self.history)
                helper.save(
                    model, manifest, optimizer, scheduler,
                    extra_state={"generator": generator.get_state(), "step": step, "epoch": epoch},
                )
            if step >= total_steps:
                break

        self._log_message(f"第{cfg.phase}段階の学習が完了しました: {helper.checkpoint_dir}")
        return helper.checkpoint_dir

    def regime_kl(self, model: SwinVRNN, regime_check) -> float:
        history, (target_a, target_b) = regime_check
        model.eval()
        return regime_posterior_kl(
            model,
            history[None].to(self.device),
            target_a[None].to(self.device),
            target_b[None].to(self.device),
        )

    def _handle_divergence(self, model, helper: CheckpointHelper, step: int):
        """最後の正常なチェックポイントに戻して中断"""
        if helper.exists():
            model.load_state_dict(helper.load_state_dict())
            self._log_message(f"損失が発散しました (step {step})。最後のチェックポイントに戻します: {helper.checkpoint_dir}")
            raise TrainingDivergedError(step, str(helper.checkpoint_dir))
        self._log_message(f"損失が発散しました (step {step})。保存済みのチェックポイントはありません")
        raise TrainingDivergedError(step, None)
