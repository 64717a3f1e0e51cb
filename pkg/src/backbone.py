"""
Deterministic recurrent predictor (SwinRNN).

history [B, n_in, T_hist, H, W]
  -> cube embedding -> four-stage Swin encoder -> hidden-state pyramid
  -> per step: per-scale decoder update, residual predictor, x_{t+1} = x_t + delta
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError, GeometryError, NumericalDivergenceError
from swin_core import PatchMerging, SwinSequence

MEMORY_UPDATES = ("attention", "gated")

MODEL_PRESETS = {
    "toy": {"stage_dims": (32, 64, 128, 256), "encoder_depth": 2, "decoder_depth": 2},
    "paper": {"stage_dims": (96, 192, 384, 768), "encoder_depth": 2, "decoder_depth": 6},
}


@dataclass
class ModelConfig:
    """バックボーンの構成"""

    n_in: int = 71
    n_out: int = 69
    t_hist: int = 6
    t_pred: int = 20
    grid_shape: tuple = (32, 64)
    stage_dims: tuple = (96, 192, 384, 768)
    encoder_depth: int = 2
    decoder_depth: int = 6
    window: int = 8
    mlp_ratio: float = 4.0
    multi_scale: bool = True
    residual: bool = True
    memory_update: str = "attention"
    dropout_rate: float = 0.0
    longitude_cyclic: bool = True
    prognostic_channels: Optional[tuple] = None

    def __post_init__(self):
        self.grid_shape = tuple(self.grid_shape)
        self.stage_dims = tuple(self.stage_dims)
        if len(self.stage_dims) != 4:
            raise ConfigurationError("model.stage_dims must list four widths")
        if self.decoder_depth < 1 or self.encoder_depth < 1:
            raise ConfigurationError("model.decoder_depth and model.encoder_depth must be at least 1")
        if self.memory_update not in MEMORY_UPDATES:
            raise ConfigurationError(f"model.memory_update must be one of {MEMORY_UPDATES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("model.dropout_rate must lie in [0, 1)")
        if self.prognostic_channels is None:
            self.prognostic_channels = tuple(range(self.n_out))
        self.prognostic_channels = tuple(int(c) for c in self.prognostic_channels)
        if len(self.prognostic_channels) != self.n_out:
            raise ConfigurationError("model.prognostic_channels must list n_out channels")

    @property
    def base_dim(self) -> int:
        return self.stage_dims[0]

    @property
    def n_levels(self) -> int:
        return 4 if self.multi_scale else 1

    def scale_shapes(self) -> list[tuple[int, int]]:
        H, W = self.grid_shape
        return [(H >> s, W >> s) for s in range(self.n_levels)]

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ConfigurationError(f"unknown model preset '{name}'")
        values = dict(MODEL_PRESETS[name])
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["grid_shape"] = list(self.grid_shape)
        data["stage_dims"] = list(self.stage_dims)
        data["prognostic_channels"] = list(self.prognostic_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class HiddenStatePyramid:
    """スケールごとの隠れ状態 (1, 1/2, 1/4, 1/8 解像度)"""

    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, index) -> torch.Tensor:
        return self.levels[index]

    @property
    def h1(self) -> torch.Tensor:
        return self.levels[0]

    def shapes(self) -> list[tuple]:
        return [tuple(h.shape) for h in self.levels]

    def map(self, fn: Callable) -> "HiddenStatePyramid":
        return HiddenStatePyramid([fn(i, h) for i, h in enumerate(self.levels)])


class McDropout(nn.Dropout):
    """推論時にも有効化できるドロップアウト (MCドロップアウト用)"""

    def __init__(self, p: float = 0.0):
        super().__init__(p)
        self.mc_active = False

    def forward(self, x):
        if self.p == 0.0:
            return x
        return F.dropout(x, self.p, self.training or self.mc_active)


class CubeEmbed(nn.Module):
    """カーネル・ストライドともT x 1 x 1 の3次元畳み込みで時間軸を潰す"""

    def __init__(self, n_in: int, dim: int, t_hist: int):
        super().__init__()
        self.t_hist = t_hist
        self.proj = nn.Conv3d(n_in, dim, kernel_size=(t_hist, 1, 1), stride=(t_hist, 1, 1))

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        if history.dim() != 5 or history.shape[2] != self.t_hist:
            raise GeometryError(f"history must be [B, C, {self.t_hist}, H, W], got {list(history.shape)}")
        return self.proj(history).squeeze(2)


class AttentionDecoder(nn.Module):
    """x_tをスケールに埋め込み、hと結合・融合してSwinブロック列で更新"""

    def __init__(self, cfg: ModelConfig, scale: int):
        super().__init__()
        dim = cfg.stage_dims[scale]
        factor = 2 ** scale
        self.embed = nn.Conv2d(cfg.n_out, dim, kernel_size=factor, stride=factor)
        self.fuse = nn.Conv2d(2 * dim, dim, kernel_size=1)
        self.dropout = McDropout(cfg.dropout_rate)
        self.blocks = SwinSequence(
            dim, cfg.decoder_depth, cfg.scale_shapes()[scale], cfg.window, cfg.mlp_ratio, cfg.longitude_cyclic
        )

    def forward(self, x_t: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        fused = self.dropout(self.fuse(torch.cat([self.embed(x_t), h], dim=1)))
        return self.blocks(fused)


class GatedDecoder(nn.Module):
    """畳み込みGRUによる隠れ状態更新 (注意機構のアブレーション用)"""

    def __init__(self, cfg: ModelConfig, scale: int):
        super().__init__()
        dim = cfg.stage_dims[scale]
        factor = 2 ** scale
        self.embed = nn.Conv2d(cfg.n_out, dim, kernel_size=factor, stride=factor)
        self.dropout = McDropout(cfg.dropout_rate)
        self.gates = nn.Conv2d(2 * dim, 2 * dim, kernel_size=3, padding=1)
        self.candidate = nn.Conv2d(2 * dim, dim, kernel_size=3, padding=1)

    def forward(self, x_t: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        e = self.dropout(self.embed(x_t))
        update, reset = torch.sigmoid(self.gates(torch.cat([e, h], dim=1))).chunk(2, dim=1)
        c = torch.tanh(self.candidate(torch.cat([e, reset * h], dim=1)))
        return (1 - update) * h + update * c


class ResidualPredictor(nn.Module):
    """粗いスケールを最近傍補間してh1と結合し、1x1射影でn_outの変化量を出す"""

    def __init__(self, dims, n_out: int):
        super().__init__()
        self.proj = nn.Conv2d(sum(dims), n_out, kernel_size=1)

    def zero_init(self):
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, pyramid: HiddenStatePyramid) -> torch.Tensor:
        size = pyramid.h1.shape[-2:]
        feats = [pyramid.h1] + [F.interpolate(h, size=size, mode="nearest") for h in pyramid.levels[1:]]
        return self.proj(torch.cat(feats, dim=1))


class SwinRNN(nn.Module):
    """決定論的なSwinRNN予測器"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.stage_dims[: cfg.n_levels]
        shapes = cfg.scale_shapes()

        self.cube_embed = CubeEmbed(cfg.n_in, cfg.base_dim, cfg.t_hist)
        self.encoder_stages = nn.ModuleList(
            SwinSequence(dims[s], cfg.encoder_depth, shapes[s], cfg.window, cfg.mlp_ratio, cfg.longitude_cyclic)
            for s in range(cfg.n_levels)
        )
        self.downsamples = nn.ModuleList(PatchMerging(dims[s], dims[s + 1]) for s in range(cfg.n_levels - 1))
        decoder_cls = AttentionDecoder if cfg.memory_update == "attention" else GatedDecoder
        self.decoders = nn.ModuleList(decoder_cls(cfg, s) for s in range(cfg.n_levels))
        self.predictor = ResidualPredictor(dims, cfg.n_out)
        self.register_buffer(
            "prognostic_index", torch.tensor(cfg.prognostic_channels, dtype=torch.long), persistent=False
        )

    def zero_init_predictor(self):
        self.predictor.zero_init()

    def set_mc_dropout(self, active: bool):
        for module in self.modules():
            if isinstance(module, McDropout):
                module.mc_active = active

    def encode(self, tokens: torch.Tensor) -> HiddenStatePyramid:
        """4段のSwinエンコーダで各スケールの初期隠れ状態を作る"""
        H, W = tokens.shape[-2:]
        if self.cfg.multi_scale and (H % 8 or W % 8):
            raise GeometryError(f"{H}x{W} tokens are not divisible by 8")
        if (H, W) != self.cfg.grid_shape:
            raise GeometryError(f"tokens are {H}x{W}, model was built for {self.cfg.grid_shape}")
        levels = []
        x = tokens
        for s, stage in enumerate(self.encoder_stages):
            x = stage(x)
            levels.append(x)
            if s < len(self.downsamples):
                x = self.downsamples[s](x)
        return HiddenStatePyramid(levels)

    def decoder_step(self, x_t: torch.Tensor, pyramid: HiddenStatePyramid) -> HiddenStatePyramid:
        return pyramid.map(lambda s, h: self.decoders[s](x_t, h))

    def predict_residual(self, pyramid: HiddenStatePyramid) -> torch.Tensor:
        return self.predictor(pyramid)

    def initial_state(self, history: torch.Tensor) -> tuple[torch.Tensor, HiddenStatePyramid]:
        pyramid = self.encode(self.cube_embed(history))
        return history[:, self.prognostic_index, -1], pyramid

    def rollout(
        self,
        history: torch.Tensor,
        n_steps: int,
        latent_source: Optional[Callable] = None,
        teacher: Optional[torch.Tensor] = None,
        teacher_ratio: float = 0.0,
        generator: Optional[torch.Generator] = None,
        step_hook: Optional[Callable] = None,
        input_perturbation: Optional[Callable] = None,
    ) -> torch.Tensor:
        """自己回帰ロールアウト -> [B, n_out, n_steps, H, W]

        latent_source(step, x_t, pyramid) は摂動済みのピラミッドを返す。
        teacherを渡すとステップ・系列ごとに確率teacher_ratioで真値を次の入力にする。
        """
        if n_steps < 1:
            raise ConfigurationError("n_steps must be at least 1")
        x_t, pyramid = self.initial_state(history)
        B = x_t.shape[0]

        outputs = []
        for step in range(n_steps):
            if input_perturbation is not None:
                x_t = input_perturbation(step, x_t)
            if step_hook is not None:
                step_hook(step, x_t)
            if latent_source is not None:
                pyramid = latent_source(step, x_t, pyramid)
            pyramid = self.decoder_step(x_t, pyramid)
            delta = self.predict_residual(pyramid)
            x_next = x_t + delta if self.cfg.residual else delta
            if not torch.isfinite(x_next).all():
                raise NumericalDivergenceError(step)
            outputs.append(x_next)

            if teacher is not None and teacher_ratio > 0.0 and step + 1 < n_steps:
                # 乱数はジェネレータ側のデバイスで引いてからモデル側へ移す
                draw_device = generator.device if generator is not None else x_next.device
                forced = torch.rand(B, generator=generator, device=draw_device).to(x_next.device) < teacher_ratio
                x_next = torch.where(forced.view(B, 1, 1, 1), teacher[:, :, step].to(x_next.dtype), x_next)
            x_t = x_next
        return torch.stack(outputs, dim=2)

    def forward(self, history: torch.Tensor, n_steps: Optional[int] = None, **kwargs) -> torch.Tensor:
        return self.rollout(history, n_steps or self.cfg.t_pred, **kwargs)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
