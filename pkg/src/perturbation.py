"""
Variational perturbation module.

Posterior and prior networks emit, per latent channel, a Gaussian over the
latent-scale grid sites with a full lower-triangular Cholesky factor. Samples
are projected into every scale of the hidden-state pyramid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from backbone import HiddenStatePyramid, ModelConfig, SwinRNN
from errors import ConfigurationError, InvalidDistributionError, PreconditionError
from swin_core import SwinSequence

DIAGONAL_FLOOR = 1e-5
LATENT_MODES = ("posterior", "prior")


@dataclass
class PerturbationConfig:
    beta: float = 1e-4
    latent_scale: int = 3
    latent_channels: int = 16
    ramp_fraction: float = 0.1
    full_covariance: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigurationError("perturbation.beta must be >= 0")
        if not 0 <= self.latent_scale <= 3:
            raise ConfigurationError("perturbation.latent_scale must lie in [0, 3]")
        if self.latent_channels < 1:
            raise ConfigurationError("perturbation.latent_channels must be at least 1")
        if not 0.0 <= self.ramp_fraction <= 1.0:
            raise ConfigurationError("perturbation.ramp_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def ramp_multiplier(step: int, ramp_steps: int) -> float:
    """0から1まで線形に増える注入係数"""
    if ramp_steps <= 0:
        return 1.0
    return min(1.0, max(0.0, step / ramp_steps))


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class LatentDistribution:
    """チャネルごとの多変量正規分布 mean [B, C_z, k], chol [B, C_z, k, k]"""

    mean: torch.Tensor
    chol: torch.Tensor

    @property
    def k(self) -> int:
        return self.mean.shape[-1]

    def diagonal(self) -> torch.Tensor:
        return torch.diagonal(self.chol, dim1=-2, dim2=-1)

    def validate(self):
        if self.chol.shape[:-1] != self.mean.shape or self.chol.shape[-1] != self.k:
            raise ValueError(f"chol {list(self.chol.shape)} does not match mean {list(self.mean.shape)}")
        if not bool((self.diagonal() > 0).all()):
            raise InvalidDistributionError("Cholesky factor has a non-positive diagonal entry")
        return self

    def covariance(self) -> torch.Tensor:
        return self.chol @ self.chol.transpose(-1, -2)


def build_cholesky(raw: torch.Tensor, diag_bias, full_covariance: bool = True) -> torch.Tensor:
    """生出力 [.., k, k] を正の対角を持つ下三角因子に写す"""
    diag = F.softplus(torch.diagonal(raw, dim1=-2, dim2=-1) + diag_bias) + DIAGONAL_FLOOR
    lower = torch.tril(raw, diagonal=-1) if full_covariance else torch.zeros_like(raw)
    return lower + torch.diag_embed(diag)


def sample_latent(
    dist: LatentDistribution,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    noise_scale: float = 1.0,
) -> torch.Tensor:
    """z = mean + chol @ eps (再パラメータ化)"""
    if noise is None:
        draw_device = generator.device if generator is not None else dist.mean.device
        noise = torch.randn(
            dist.mean.shape, generator=generator, device=draw_device, dtype=dist.mean.dtype
        ).to(dist.mean.device) * noise_scale
    return dist.mean + (dist.chol @ noise.unsqueeze(-1)).squeeze(-1)


def kl_divergence(q: LatentDistribution, p: LatentDistribution, reduction: str = "sum") -> torch.Tensor:
    """KL(q || p) を三角行列の求解と対角の対数和で計算

    reduction: "none" -> [B, C_z], "channel_sum" -> [B],
    "sum" -> チャネル和のバッチ平均, "mean" -> チャネル・バッチ平均
    """
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"distribution shapes differ: {list(q.mean.shape)} vs {list(p.mean.shape)}")
    q.validate()
    p.validate()
    k = q.k

    m = torch.linalg.solve_triangular(p.chol, q.chol, upper=False)
    trace = m.square().sum(dim=(-2, -1))
    diff = (p.mean - q.mean).unsqueeze(-1)
    quad = torch.linalg.solve_triangular(p.chol, diff, upper=False).square().sum(dim=(-2, -1))
    logdet_p = 2.0 * torch.log(p.diagonal()).sum(-1)
    logdet_q = 2.0 * torch.log(q.diagonal()).sum(-1)
    kl = 0.5 * (trace + quad - k + logdet_p - logdet_q)

    if reduction == "none":
        return kl
    if reduction == "channel_sum":
        return kl.sum(-1)
    if reduction == "sum":
        return kl.sum(-1).mean()
    if reduction == "mean":
        return kl.mean()
    raise ValueError(f"unknown reduction '{reduction}'")


class LatentNetwork(nn.Module):
    """事後・事前ネットワーク共通の構造

    x を潜在スケールへ埋め込み、h と結合・融合して Swin ブロックを通し、
    トークンごとに平均と Cholesky 因子の1行を出力する。
    """

    def __init__(self, model_cfg: ModelConfig, cfg: PerturbationConfig, scale: int, diag_target: Optional[float]):
        super().__init__()
        dim = model_cfg.stage_dims[scale]
        factor = 2 ** scale
        H, W = model_cfg.scale_shapes()[scale]
        self.k = H * W
        self.latent_channels = cfg.latent_channels
        self.full_covariance = cfg.full_covariance

        self.embed = nn.Conv2d(model_cfg.n_out, dim, kernel_size=factor, stride=factor)
        self.fuse = nn.Conv2d(2 * dim, dim, kernel_size=1)
        self.blocks = SwinSequence(dim, 1, (H, W), model_cfg.window, model_cfg.mlp_ratio, model_cfg.longitude_cyclic)
        self.mean_head = nn.Linear(dim, cfg.latent_channels)
        self.row_head = nn.Linear(dim, cfg.latent_channels * self.k)
        for head in (self.mean_head, self.row_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        # 事前分布はsoftplus(bias)=1でN(0, I)から始める
        bias = inverse_softplus(diag_target) if diag_target is not None else 0.0
        self.diag_bias = nn.Parameter(torch.tensor(bias))

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> LatentDistribution:
        feat = self.blocks(self.fuse(torch.cat([self.embed(x), h], dim=1)))
        tokens = feat.flatten(2).transpose(1, 2)  # [B, k, dim]
        B = tokens.shape[0]
        mean = self.mean_head(tokens).transpose(1, 2)  # [B, C_z, k]
        rows = self.row_head(tokens).view(B, self.k, self.latent_channels, self.k).permute(0, 2, 1, 3)
        chol = build_cholesky(rows, self.diag_bias, self.full_covariance)
        if not (torch.isfinite(mean).all() and torch.isfinite(chol).all()):
            raise InvalidDistributionError("latent network produced non-finite outputs")
        return LatentDistribution(mean, chol)


class LatentInjector(nn.Module):
    """潜在変数を各スケールへ最近傍補間し、バイアスなし1x1射影で加える"""

    def __init__(self, model_cfg: ModelConfig, cfg: PerturbationConfig, latent_shape: tuple[int, int]):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        dims = model_cfg.stage_dims[: model_cfg.n_levels]
        self.projections = nn.ModuleList(
            nn.Conv2d(cfg.latent_channels, dim, kernel_size=1, bias=False) for dim in dims
        )

    def forward(self, pyramid: HiddenStatePyramid, z: torch.Tensor, ramp: float) -> HiddenStatePyramid:
        return inject_latent(pyramid, z, ramp, self)


def inject_latent(pyramid: HiddenStatePyramid, z: torch.Tensor, ramp: float, injector: LatentInjector):
    """ramp倍した潜在摂動を全スケールの隠れ状態に加える"""
    if not 0.0 <= ramp <= 1.0:
        raise ConfigurationError(f"ramp {ramp} outside [0, 1]")
    if ramp == 0.0:
        return pyramid
    z_map = z.reshape(z.shape[0], z.shape[1], *injector.latent_shape)

    def perturb(s, h):
        resized = F.interpolate(z_map, size=h.shape[-2:], mode="nearest")
        return h + ramp * injector.projections[s](resized)

    return pyramid.map(perturb)


class PerturbationModule(nn.Module):
    def __init__(self, model_cfg: ModelConfig, cfg: PerturbationConfig, scale: int):
        super().__init__()
        self.cfg = cfg
        self.scale = scale
        self.posterior = LatentNetwork(model_cfg, cfg, scale, diag_target=None)
        self.prior = LatentNetwork(model_cfg, cfg, scale, diag_target=1.0)
        self.injector = LatentInjector(model_cfg, cfg, model_cfg.scale_shapes()[scale])

    def posterior_infer(self, x_next: torch.Tensor, h: torch.Tensor) -> LatentDistribution:
        return self.posterior(x_next, h)

    def prior_infer(self, x_t: torch.Tensor, h: torch.Tensor) -> LatentDistribution:
        return self.prior(x_t, h)


class SwinVRNN(nn.Module):
    """SwinRNNバックボーン + 変分摂動モジュール

    学習モードでは事後分布、推論モードでは事前分布から潜在変数を引く。
    latent_mode で明示的に切り替えることもできる。
    """

    def __init__(self, model_cfg: ModelConfig, cfg: PerturbationConfig, backbone: Optional[SwinRNN] = None):
        super().__init__()
        self.model_cfg = model_cfg
        self.pert_cfg = cfg
        self.backbone = backbone if backbone is not None else SwinRNN(model_cfg)
        self.latent_scale = min(cfg.latent_scale, model_cfg.n_levels - 1)
        self.perturbation = PerturbationModule(model_cfg, cfg, self.latent_scale)
        self.ramp = 0.0
        self.noise_scale = 1.0
        self.latent_mode: Optional[str] = None
        self.last_sources: list[str] = []
        self.kl_steps: list[torch.Tensor] = []

    @property
    def cfg(self) -> ModelConfig:
        return self.model_cfg

    def set_ramp(self, ramp: float):
        if not 0.0 <= ramp <= 1.0:
            raise ConfigurationError(f"ramp {ramp} outside [0, 1]")
        self.ramp = float(ramp)

    def set_mc_dropout(self, active: bool):
        self.backbone.set_mc_dropout(active)

    @torch.no_grad()
    def initial_prior(self, history: torch.Tensor) -> LatentDistribution:
        """初期時刻の事前分布 (共分散ヒートマップ用)"""
        x_t, pyramid = self.backbone.initial_state(history)
        return self.perturbation.prior_infer(x_t, pyramid[self.latent_scale])

    def rollout(
        self,
        history: torch.Tensor,
        n_steps: int,
        target: Optional[torch.Tensor] = None,
        teacher_ratio: float = 0.0,
        generator: Optional[torch.Generator] = None,
        latent_noise: Optional[Callable[[int, torch.Tensor], torch.Tensor]] = None,
        latent_mode: Optional[str] = None,
        step_hook: Optional[Callable] = None,
        input_perturbation: Optional[Callable] = None,
    ) -> torch.Tensor:
        mode = latent_mode or self.latent_mode or ("posterior" if self.training else "prior")
        if mode not in LATENT_MODES:
            raise ConfigurationError(f"latent mode must be one of {LATENT_MODES}")
        if mode == "posterior" and (target is None or target.shape[2] < n_steps):
            raise PreconditionError("posterior sampling needs target frames for every step")
        self.last_sources = []
        self.kl_steps = []

        def latent_source(step, x_t, pyramid):
            h = pyramid[self.latent_scale]
            prior = self.perturbation.prior_infer(x_t, h)
            dist = prior
            if mode == "posterior":
                dist = self.perturbation.posterior_infer(target[:, :, step], h)
                self.kl_steps.append(kl_divergence(dist, prior, reduction="mean"))
            noise = None
            if latent_noise is not None:
                noise = latent_noise(step, dist.mean) * self.noise_scale
            z = sample_latent(dist, noise=noise, generator=generator, noise_scale=self.noise_scale)
            self.last_sources.append(mode)
            return inject_latent(pyramid, z, self.ramp, self.perturbation.injector)

        return self.backbone.rollout(
            history,
            n_steps,
            latent_source=latent_source,
            teacher=target if teacher_ratio > 0 else None,
            teacher_ratio=teacher_ratio,
            generator=generator,
            step_hook=step_hook,
            input_perturbation=input_perturbation,
        )

    def forward(self, history: torch.Tensor, n_steps: Optional[int] = None, **kwargs) -> torch.Tensor:
        return self.rollout(history, n_steps or self.model_cfg.t_pred, **kwargs)
