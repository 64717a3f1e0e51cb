"""Ensemble generation: control, fixed-distribution, MC-dropout, learned-distribution and multi-model"""

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from backbone import McDropout, SwinRNN
from constants import ENSEMBLE_METHODS, MANIFEST_NAME
from errors import ConfigurationError, PreconditionError
from perturbation import SwinVRNN
from utils import load_json, log_message, noise_generator, read_blob, save_json, write_blob


@dataclass
class EnsembleConfig:
    method: str = "learned"
    n_members: int = 100
    sigma: float = 0.02
    dropout_rate: float = 0.1
    checkpoints: tuple = ()
    seed: int = 0
    member_batch_size: int = 1
    noise_scale: float = 1.0
    perturb_every_step: bool = True
    n_steps: Optional[int] = None

    def __post_init__(self):
        self.checkpoints = tuple(str(c) for c in self.checkpoints)
        if self.method not in ENSEMBLE_METHODS:
            raise ConfigurationError(f"ensemble.method must be one of {', '.join(ENSEMBLE_METHODS)}")
        if self.n_members < 1:
            raise ConfigurationError("ensemble.n_members must be at least 1")
        if self.sigma < 0:
            raise ConfigurationError("ensemble.sigma must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("ensemble.dropout_rate must lie in [0, 1)")
        if self.member_batch_size < 1:
            raise ConfigurationError("ensemble.member_batch_size must be at least 1")
        if self.noise_scale < 0:
            raise ConfigurationError("ensemble.noise_scale must be >= 0")

    def check_checkpoints(self):
        """アンサンブルを作る直前に呼ぶ (保存済み予測の評価では不要)"""
        if self.method == "multi-model" and len(self.checkpoints) < 2:
            raise ConfigurationError("ensemble.checkpoints: multi-model needs at least 2 checkpoints")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["checkpoints"] = list(self.checkpoints)
        return data


@dataclass
class EnsembleForecast:
    """メンバー [M, B, n_out, T, H, W] (正規化単位) と由来情報"""

    members: torch.Tensor
    provenance: list = field(default_factory=list)
    method: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def mean(self) -> torch.Tensor:
        return ensemble_mean(self)


def ensemble_mean(forecast) -> torch.Tensor:
    """メンバー平均 [B, n_out, T, H, W]"""
    members = forecast.members if isinstance(forecast, EnsembleForecast) else forecast
    if members.shape[0] < 1:
        raise PreconditionError("ensemble has no members")
    return members.mean(dim=0)


def _backbone_of(model) -> SwinRNN:
    return model.backbone if isinstance(model, SwinVRNN) else model


def _member_noise(seed: int, members, step: int, like: torch.Tensor) -> torch.Tensor:
    """メンバーごとの (seed, member, step) 乱数列から標準正規ノイズを作る"""
    per_member = (like.shape[0] // len(members),) + tuple(like.shape[1:])
    draws = [
        torch.randn(per_member, generator=noise_generator(seed, m, step, like.device), device=like.device, dtype=like.dtype)
        for m in members
    ]
    return torch.cat(draws, dim=0)


class EnsembleManager:
    """アンサンブル予測を管理するクラス"""

    def __init__(self, device=None, log_callback=None):
        self.device = torch.device(device) if device is not None else torch.device("cpu")
        self.log_callback = log_callback or log_message
        self.last_runtime = None

    def _log_message(self, message):
        self.log_callback(message)

    def _chunks(self, cfg: EnsembleConfig):
        for start in range(0, cfg.n_members, cfg.member_batch_size):
            yield list(range(start, min(cfg.n_members, start + cfg.member_batch_size)))

    def _finish(self, chunks, provenance, method, started, metadata=None):
        members = torch.cat(chunks, dim=0)
        self.last_runtime = time.perf_counter() - started
        self._log_message(
            f"アンサンブル予測 ({method}, {members.shape[0]} members): {self.last_runtime:.2f} s"
        )
        meta = {"runtime_seconds": self.last_runtime}
        meta.update(metadata or {})
        return EnsembleForecast(members, provenance, method, meta)

    def _steps(self, model, cfg):
        return cfg.n_steps or _backbone_of(model).cfg.t_pred

    @torch.no_grad()
    def forecast_control(self, model, history: torch.Tensor, cfg: Optional[EnsembleConfig] = None) -> EnsembleForecast:
        """摂動なしの決定論的予測 (1メンバー)"""
        cfg = cfg or EnsembleConfig(method="control", n_members=1)
        started = time.perf_counter()
        backbone = _backbone_of(model).to(self.device).eval()
        pred = backbone.rollout(history.to(self.device), self._steps(model, cfg))
        return self._finish([pred.unsqueeze(0)], [{"member": 0, "model_id": 0, "seed": None}], "control", started)

    @torch.no_grad()
    def forecast_fixed(self, model, history: torch.Tensor, cfg: EnsembleConfig) -> EnsembleForecast:
        """各ステップの入力 x_t に sigma * xi を加える固定分布摂動"""
        started = time.perf_counter()
        backbone = _backbone_of(model).to(self.device).eval()
        history = history.to(self.device)
        chunks, provenance = [], []
        for members in self._chunks(cfg):

            def perturb(step, x_t, members=members):
                if cfg.sigma == 0.0 or (step > 0 and not cfg.perturb_every_step):
                    return x_t
                return x_t + cfg.sigma * _member_noise(cfg.seed, members, step, x_t)

            batch = history.repeat(len(members), 1, 1, 1, 1)
            pred = backbone.rollout(batch, self._steps(model, cfg), input_perturbation=perturb)
            chunks.append(pred.view(len(members), history.shape[0], *pred.shape[1:]))
            provenance.extend({"member": m, "model_id": 0, "seed": cfg.seed} for m in members)
        return self._finish(chunks, provenance, "fixed", started, {"sigma": cfg.sigma})

    @torch.no_grad()
    def forecast_mc_dropout(self, model, history: torch.Tensor, cfg: EnsembleConfig) -> EnsembleForecast:
        """推論時にドロップアウトマスクをメンバー・ステップごとに再抽選"""
        backbone = _backbone_of(model).to(self.device).eval()
        dropouts = [m for m in backbone.modules() if isinstance(m, McDropout)]
        if backbone.cfg.dropout_rate == 0.0 or not dropouts:
            raise ConfigurationError("mc-dropout needs a model trained with model.dropout_rate > 0")

        started = time.perf_counter()
        history = history.to(self.device)
        trained_rate = dropouts[0].p
        devices = [self.device.index or 0] if self.device.type == "cuda" else []
        chunks, provenance = [], []
        try:
            for module in dropouts:
                module.p = cfg.dropout_rate
            backbone.set_mc_dropout(True)
            # マスクはグローバル乱数を使うのでメンバーごとに乱数状態を分離
            for member in range(cfg.n_members):
                with torch.random.fork_rng(devices=devices):
                    torch.manual_seed(noise_generator(cfg.seed, member, 0).initial_seed())
                    pred = backbone.rollout(history, self._steps(model, cfg))
                chunks.append(pred.unsqueeze(0))
                provenance.append({"member": member, "model_id": 0, "seed": cfg.seed})
        finally:
            backbone.set_mc_dropout(False)
            for module in dropouts:
                module.p = trained_rate
        return self._finish(chunks, provenance, "mc-dropout", started, {"dropout_rate": cfg.dropout_rate})

    @torch.no_grad()
    def forecast_learned(self, model, history: torch.Tensor, cfg: EnsembleConfig, model_id: int = 0) -> EnsembleForecast:
        """事前分布から潜在変数を引いて注入する学習分布摂動"""
        if not isinstance(model, SwinVRNN):
            raise ConfigurationError("learned-distribution ensembles need a phase-2 SwinVRNN checkpoint")
        started = time.perf_counter()
        model = model.to(self.device).eval()
        history = history.to(self.device)
        previous = (model.ramp, model.noise_scale)
        chunks, provenance = [], []
        try:
            model.set_ramp(1.0)
            model.noise_scale = cfg.noise_scale
            for members in self._chunks(cfg):

                def latent_noise(step, like, members=members):
                    return _member_noise(cfg.seed, members, step, like)

                batch = history.repeat(len(members), 1, 1, 1, 1)
                pred = model.rollout(batch, self._steps(model, cfg), latent_mode="prior", latent_noise=latent_noise)
                chunks.append(pred.view(len(members), history.shape[0], *pred.shape[1:]))
                provenance.extend({"member": m, "model_id": model_id, "seed": cfg.seed} for m in members)
        finally:
            model.ramp, model.noise_scale = previous
        return self._finish(chunks, provenance, "learned", started)

    def forecast_multi_model(self, models, history: torch.Tensor, cfg: EnsembleConfig) -> EnsembleForecast:
        """複数のSwinVRNNの学習分布メンバーを統合 (モデルjはseed+jを使う)"""
        if not models:
            raise ConfigurationError("multi-model needs at least one model")
        reference = _backbone_of(models[0]).cfg
        for j, model in enumerate(models[1:], start=1):
            other = _backbone_of(model).cfg
            if (other.grid_shape, other.n_in, other.n_out, other.prognostic_channels) != (
                reference.grid_shape, reference.n_in, reference.n_out, reference.prognostic_channels
            ):
                raise ConfigurationError(f"model {j} has a grid or catalog incompatible with model 0")

        started = time.perf_counter()
        chunks, provenance = [], []
        for j, model in enumerate(models):
            part = self.forecast_learned(model, history, replace(cfg, method="learned", seed=cfg.seed + j), model_id=j)
            chunks.append(part.members)
            provenance.extend(part.provenance)
        return self._finish(chunks, provenance, "multi-model", started, {"n_models": len(models)})

    def run(self, models, history: torch.Tensor, cfg: EnsembleConfig) -> EnsembleForecast:
        """設定された手法でアンサンブルを作る"""
        if cfg.method == "multi-model":
            return self.forecast_multi_model(models, history, cfg)
        model = models[0]
        if cfg.method == "control":
            return self.forecast_control(model, history, cfg)
        if cfg.method == "fixed":
            return self.forecast_fixed(model, history, cfg)
        if cfg.method == "mc-dropout":
            return self.forecast_mc_dropout(model, history, cfg)
        return self.forecast_learned(model, history, cfg)


def save_forecast(forecast: EnsembleForecast, out_dir, extra: Optional[dict] = None) -> Path:
    """マニフェスト + メンバーごとのfloat32バイナリ + 平均のバイナリ"""
    out_dir = Path(out_dir)
    members = forecast.members.detach().cpu().numpy()
    for i in range(members.shape[0]):
        write_blob(out_dir / "members" / f"member_{i:04d}.f32", members[i])
    write_blob(out_dir / "mean.f32", members.mean(axis=0))
    manifest = {
        "method": forecast.method,
        "n_members": int(members.shape[0]),
        "member_shape": list(members.shape[1:]),
        "provenance": forecast.provenance,
        "metadata": forecast.metadata,
    }
    manifest.update(extra or {})
    save_json(out_dir / MANIFEST_NAME, manifest)
    return out_dir


def load_forecast(out_dir) -> tuple[EnsembleForecast, dict]:
    out_dir = Path(out_dir)
    manifest = load_json(out_dir / MANIFEST_NAME)
    if not manifest:
        raise PreconditionError(f"no forecast manifest found in {out_dir}")
    if manifest["n_members"] < 1:
        raise PreconditionError(f"forecast in {out_dir} has no members")
    shape = manifest["member_shape"]
    members = np.stack(
        [read_blob(out_dir / "members" / f"member_{i:04d}.f32", shape) for i in range(manifest["n_members"])]
    )
    forecast = EnsembleForecast(torch.from_numpy(members), manifest["provenance"], manifest["method"], manifest["metadata"])
    return forecast, manifest
