"""
Shifted-window self-attention primitives.

Feature maps travel between modules as [B, C, H, W]; the attention code works
on channel-last windows internally. Longitude wraps around cyclically,
latitude does not, so shifted windows are masked only across the latitude
seam (and across padding).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from timm.layers import Mlp, trunc_normal_

from errors import ConfigurationError, GeometryError

MASK_VALUE = -1e4


def heads_for(dim: int) -> int:
    """dim/32ヘッド (最低1、dimを割り切れる数に丸める)"""
    heads = max(1, dim // 32)
    while dim % heads:
        heads -= 1
    return heads


@dataclass(frozen=True)
class SwinBlockConfig:
    dim: int
    n_heads: int = 0
    window: int = 8
    shift: int = 0
    mlp_ratio: float = 4.0
    longitude_cyclic: bool = True

    def __post_init__(self):
        if self.n_heads == 0:
            object.__setattr__(self, "n_heads", heads_for(self.dim))
        if self.dim % self.n_heads:
            raise ConfigurationError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if self.window < 1:
            raise ConfigurationError("window must be at least 1")
        if not 0 <= self.shift < self.window:
            raise ConfigurationError(f"shift {self.shift} must lie in [0, {self.window})")


def _region_ids(length: int, padded: int, shift: int, masked: bool) -> torch.Tensor:
    """巡回シフト後の各行(列)の領域番号: 0=通常, 1=折り返し, 2=パディング"""
    ids = torch.zeros(padded, dtype=torch.long)
    if masked and shift:
        ids[length - shift:length] = 1
    ids[length:] = 2
    return ids


def shifted_window_mask(
    height: int,
    width: int,
    window: int,
    shift: int,
    longitude_cyclic: bool = True,
    padded_hw: Optional[tuple[int, int]] = None,
) -> Optional[torch.Tensor]:
    """シフト窓の注意マスク [n_windows, window², window²] (不要ならNone)"""
    hp, wp = padded_hw or (height, width)
    if shift == 0 and (hp, wp) == (height, width):
        return None
    lat_ids = _region_ids(height, hp, shift, True)
    lon_ids = _region_ids(width, wp, shift, not longitude_cyclic)
    region = (lat_ids[:, None] * 3 + lon_ids[None, :]).to(torch.float32)
    region = region.view(hp // window, window, wp // window, window).permute(0, 2, 1, 3)
    region = region.reshape(-1, window * window)
    diff = region.unsqueeze(1) - region.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, MASK_VALUE)


def window_partition(
    x: torch.Tensor,
    window: int,
    shift: int = 0,
    longitude_cyclic: bool = True,
) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """[B, H, W, C] を巡回シフトして窓に分割

    Returns:
        windows: [B * n_windows, window², C]
        mask: [n_windows, window², window²] or None
    """
    B, H, W, C = x.shape
    if window > min(H, W):
        raise GeometryError(f"window {window} exceeds the {H}x{W} feature map")
    if H % window or W % window:
        raise GeometryError(f"{H}x{W} feature map is not a multiple of window {window}; pad it first")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    windows = x.view(B, H // window, window, W // window, window, C)
    windows = windows.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)
    return windows, shifted_window_mask(H, W, window, shift, longitude_cyclic)


def window_reverse(windows: torch.Tensor, window: int, shift: int, height: int, width: int) -> torch.Tensor:
    """window_partitionの逆変換 -> [B, H, W, C]"""
    C = windows.shape[-1]
    x = windows.view(-1, height // window, width // window, window, window, C)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, height, width, C)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
    return rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]


class WindowAttention(nn.Module):
    """相対位置バイアス付きの窓内マルチヘッド自己注意"""

    def __init__(self, dim: int, n_heads: int, window: int, qkv_bias: bool = True):
        super().__init__()
        self.dim = dim
        self.n_heads = n_heads
        self.window = window
        self.scale = (dim // n_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, n_heads))
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        trunc_normal_(self.relative_position_bias_table, std=0.02)

    def position_bias(self) -> torch.Tensor:
        n = self.window * self.window
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)].view(n, n, -1)
        return bias.permute(2, 0, 1).unsqueeze(0)

    def forward(self, windows: torch.Tensor, mask: Optional[torch.Tensor] = None, return_weights: bool = False):
        B_, N, C = windows.shape
        qkv = self.qkv(windows).reshape(B_, N, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias()
        if mask is not None:
            n_win = mask.shape[0]
            attn = attn.view(-1, n_win, self.n_heads, N, N) + mask.to(attn.dtype).unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.n_heads, N, N)
        attn = attn.softmax(dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class SwinBlock(nn.Module):
    """プレノルムのSwinブロック (注意 + MLP、それぞれ残差加算)"""

    def __init__(self, cfg: SwinBlockConfig, input_resolution: tuple[int, int]):
        super().__init__()
        self.cfg = cfg
        self.input_resolution = tuple(input_resolution)
        H, W = self.input_resolution
        if min(H, W) < 1:
            raise GeometryError(f"feature map {H}x{W} is empty")

        # 窓より小さいマップでは窓を縮めシフトを無効化
        if cfg.window > min(H, W):
            self.window, self.shift = min(H, W), 0
        else:
            self.window, self.shift = cfg.window, cfg.shift
        self.pad_h = (-H) % self.window
        self.pad_w = (-W) % self.window
        if self.pad_w and cfg.longitude_cyclic:
            raise GeometryError(f"width {W} must be a multiple of window {self.window} for cyclic longitude")

        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = WindowAttention(cfg.dim, cfg.n_heads, self.window)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.mlp = Mlp(in_features=cfg.dim, hidden_features=int(cfg.dim * cfg.mlp_ratio), act_layer=nn.GELU)
        self.register_buffer(
            "attn_mask",
            shifted_window_mask(H, W, self.window, self.shift, cfg.longitude_cyclic, (H + self.pad_h, W + self.pad_w)),
            persistent=False,
        )

    def zero_init_outputs(self):
        """出力射影をゼロにしてブロックを恒等写像にする"""
        for layer in (self.attn.proj, self.mlp.fc2):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        if self.pad_h or self.pad_w:
            x = F.pad(x, (0, 0, 0, self.pad_w, 0, self.pad_h))
        hp, wp = H + self.pad_h, W + self.pad_w

        windows, _ = window_partition(x, self.window, 0)
        windows = self.attn(windows, self.attn_mask)
        x = window_reverse(windows, self.window, 0, hp, wp)[:, :H, :W, :]
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.input_resolution or x.shape[1] != self.cfg.dim:
            raise GeometryError(
                f"block expects [B, {self.cfg.dim}, {self.input_resolution[0]}, {self.input_resolution[1]}], "
                f"got {list(x.shape)}"
            )
        x = x.permute(0, 2, 3, 1)
        x = x + self._attend(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 3, 1, 2).contiguous()


class SwinSequence(nn.Sequential):
    """シフト0と窓/2を交互に繰り返すブロック列"""

    def __init__(self, dim, depth, input_resolution, window=8, mlp_ratio=4.0, longitude_cyclic=True):
        blocks = [
            SwinBlock(
                SwinBlockConfig(dim, 0, window, 0 if i % 2 == 0 else window // 2, mlp_ratio, longitude_cyclic),
                input_resolution,
            )
            for i in range(depth)
        ]
        super().__init__(*blocks)


class PatchMerging(nn.Module):
    """2x2パッチ結合 + 線形射影による1/2ダウンサンプル"""

    def __init__(self, dim: int, out_dim: Optional[int] = None):
        super().__init__()
        self.dim = dim
        self.out_dim = out_dim or 2 * dim
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, self.out_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise GeometryError(f"cannot downsample an odd {H}x{W} feature map")
        x = x.permute(0, 2, 3, 1).reshape(B, H // 2, 2, W // 2, 2, C)
        x = x.permute(0, 1, 3, 4, 2, 5).flatten(3)
        x = self.reduction(self.norm(x))
        return x.permute(0, 3, 1, 2).contiguous()
