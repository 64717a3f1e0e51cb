"""
Gridded data model for the forecast toolkit.

Covers the lat-lon geometry, the channel catalog, read-only field stores
(NetCDF archives, the consolidated binary cache and synthetic toy archives),
normalization statistics, sequence windowing, latitude weights and the
weekly climatology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import xarray as xr
from torch.utils.data import Dataset

from constants import (
    DEFAULT_CATALOG_TABLE,
    MANIFEST_NAME,
    PRESSURE_LEVELS,
    STEP_HOURS,
    TOY_KINDS,
    VERIFIED_FIELDS,
)
from errors import (
    CatalogMismatchError,
    ConfigurationError,
    DegenerateStatisticsError,
    GeometryError,
    IngestionError,
)
from utils import load_json, log_message, read_blob, save_json

VARIABLE_KINDS = ("3D", "2D", "constant")
_TIME_CHUNK = 256


# ---------------------------------------------------------------------------
# 格子とカタログ
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridSpec:
    """緯度経度格子の幾何情報"""

    lat_deg: np.ndarray
    lon_deg: np.ndarray
    resolution_deg: Optional[float] = None

    def __post_init__(self):
        lat = np.asarray(self.lat_deg, dtype=np.float64).reshape(-1)
        lon = np.asarray(self.lon_deg, dtype=np.float64).reshape(-1)
        if lat.size == 0 or lon.size == 0:
            raise GeometryError("grid needs at least one latitude and one longitude")
        if np.any(np.abs(lat) > 90.0):
            raise GeometryError("latitudes must lie in [-90, 90]")
        if lat.size > 1:
            d = np.diff(lat)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise GeometryError("latitudes must be strictly monotone")
        if np.any(lon < 0.0) or np.any(lon >= 360.0):
            raise GeometryError("longitudes must lie in [0, 360)")
        if lon.size > 1:
            d = np.diff(lon)
            if np.any(d <= 0) or not np.allclose(d, d[0], rtol=0.0, atol=1e-6):
                raise GeometryError("longitudes must be strictly increasing with uniform spacing")
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)
        if self.resolution_deg is None:
            res = float(lon[1] - lon[0]) if lon.size > 1 else 360.0
            object.__setattr__(self, "resolution_deg", res)

    @property
    def n_lat(self) -> int:
        return int(self.lat_deg.size)

    @property
    def n_lon(self) -> int:
        return int(self.lon_deg.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_lat, self.n_lon

    @classmethod
    def regular(cls, n_lat: int = 32, n_lon: int = 64) -> "GridSpec":
        """WeatherBench方式のセル中心格子 (既定: 5.625度の32x64)"""
        lat_res = 180.0 / n_lat
        lon_res = 360.0 / n_lon
        lat = -90.0 + lat_res * (np.arange(n_lat) + 0.5)
        lon = lon_res * np.arange(n_lon)
        return cls(lat, lon, lon_res)

    def validate_global(self):
        """全球格子であることを確認 (n_lat x 解像度 ≈ 180)"""
        if abs(self.n_lat * self.resolution_deg - 180.0) > self.resolution_deg:
            raise GeometryError(
                f"{self.n_lat} rows at {self.resolution_deg} deg do not cover 180 deg of latitude"
            )

    def same_as(self, other: "GridSpec") -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.lat_deg, other.lat_deg, atol=1e-6)
            and np.allclose(self.lon_deg, other.lon_deg, atol=1e-6)
        )

    def nearest_index(self, lat: float, lon: float) -> tuple[int, int]:
        """最寄りの格子点 (経度は周期的に扱う)"""
        j = int(np.argmin(np.abs(self.lat_deg - lat)))
        dlon = np.abs((self.lon_deg - lon % 360.0 + 180.0) % 360.0 - 180.0)
        return j, int(np.argmin(dlon))

    def to_dict(self) -> dict:
        return {
            "lat_deg": self.lat_deg.tolist(),
            "lon_deg": self.lon_deg.tolist(),
            "resolution_deg": self.resolution_deg,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(np.asarray(data["lat_deg"]), np.asarray(data["lon_deg"]), data.get("resolution_deg"))


@dataclass(frozen=True)
class CatalogEntry:
    """カタログの1変数"""

    name: str
    kind: str
    levels: tuple = ()
    short_name: str = ""
    units: str = ""
    score_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in VARIABLE_KINDS:
            raise ConfigurationError(f"unknown variable kind '{self.kind}' for {self.name}")
        if self.kind == "3D" and not self.levels:
            raise ConfigurationError(f"3D variable {self.name} needs pressure levels")

    @property
    def n_levels(self) -> int:
        return len(self.levels) if self.kind == "3D" else 1


class VariableCatalog:
    """入力71チャネル (定数2つを除く69チャネルを予測) のレイアウト"""

    def __init__(self, entries: Sequence[CatalogEntry]):
        self.entries = tuple(entries)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigurationError("catalog contains duplicate variable names")

        self.channel_offsets = {}
        offset = 0
        constant = []
        for entry in self.entries:
            self.channel_offsets[entry.name] = offset
            offset += entry.n_levels
            constant.extend([entry.kind == "constant"] * entry.n_levels)
        self.n_in = offset
        self._constant = np.asarray(constant, dtype=bool)
        # 予測対象は定数以外のチャネル (入力チャネル番号の配列)
        self.prognostic_channels = np.nonzero(~self._constant)[0]
        self.n_out = int(self.prognostic_channels.size)

    @classmethod
    def default(cls) -> "VariableCatalog":
        entries = []
        for name, kind, short_name, units, scale in DEFAULT_CATALOG_TABLE:
            levels = PRESSURE_LEVELS if kind == "3D" else ()
            entries.append(CatalogEntry(name, kind, levels, short_name, units, scale))
        return cls(entries)

    @classmethod
    def toy(cls, n_prognostic: int = 2, n_constants: int = 1) -> "VariableCatalog":
        entries = [CatalogEntry(f"tracer_{i}", "2D", (), f"q{i}", "1") for i in range(n_prognostic)]
        entries += [CatalogEntry(f"static_{i}", "constant", (), f"s{i}", "1") for i in range(n_constants)]
        return cls(entries)

    def channel_names(self) -> list[str]:
        names = []
        for entry in self.entries:
            if entry.kind == "3D":
                names.extend(f"{entry.name}_{level}" for level in entry.levels)
            else:
                names.append(entry.name)
        return names

    def entry(self, name: str) -> CatalogEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise CatalogMismatchError(f"variable '{name}' is not in the catalog")

    def channel_of(self, name: str, level: Optional[int] = None) -> int:
        entry = self.entry(name)
        offset = self.channel_offsets[name]
        if entry.kind != "3D":
            return offset
        if level not in entry.levels:
            raise CatalogMismatchError(f"level {level} hPa of '{name}' is not in the catalog")
        return offset + entry.levels.index(level)

    def entry_of_channel(self, channel: int) -> CatalogEntry:
        for entry in self.entries:
            offset = self.channel_offsets[entry.name]
            if offset <= channel < offset + entry.n_levels:
                return entry
        raise IndexError(f"channel {channel} outside [0, {self.n_in})")

    def is_constant(self, channel: int) -> bool:
        return bool(self._constant[channel])

    def output_index(self, channel: int) -> int:
        """入力チャネル番号 -> 予測出力内の位置"""
        hits = np.nonzero(self.prognostic_channels == channel)[0]
        if hits.size == 0:
            raise CatalogMismatchError(f"channel {channel} is a constant and is not predicted")
        return int(hits[0])

    def resolve_field(self, field_name: str) -> int:
        """'Z500' などの検証名またはチャネル名から入力チャネル番号を返す"""
        if field_name in VERIFIED_FIELDS:
            name, level = VERIFIED_FIELDS[field_name]
            if name in self.channel_offsets:
                return self.channel_of(name, level)
        names = self.channel_names()
        if field_name in names:
            return names.index(field_name)
        raise CatalogMismatchError(f"field '{field_name}' is not in the catalog")

    def same_layout(self, other: "VariableCatalog") -> bool:
        return self.channel_names() == other.channel_names() and self.n_out == other.n_out

    def to_dict(self) -> dict:
        return {
            "entries": [
                {
                    "name": e.name,
                    "kind": e.kind,
                    "levels": list(e.levels),
                    "short_name": e.short_name,
                    "units": e.units,
                    "score_scale": e.score_scale,
                }
                for e in self.entries
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VariableCatalog":
        return cls(
            [
                CatalogEntry(
                    e["name"], e["kind"], tuple(e.get("levels", ())), e.get("short_name", ""),
                    e.get("units", ""), float(e.get("score_scale", 1.0)),
                )
                for e in data["entries"]
            ]
        )


# ---------------------------------------------------------------------------
# フィールドストア
# ---------------------------------------------------------------------------

def resolve_time_range(time_range) -> tuple[pd.Timestamp, pd.Timestamp]:
    """(開始, 終了) を両端含むTimestampに変換 (整数は年として扱う)"""
    start, end = time_range
    if isinstance(start, (int, np.integer)):
        start = pd.Timestamp(f"{int(start)}-01-01")
    if isinstance(end, (int, np.integer)):
        end = pd.Timestamp(f"{int(end)}-12-31 23:59:59")
    start, end = pd.Timestamp(start), pd.Timestamp(end)
    if end < start:
        raise ConfigurationError(f"time range ends before it starts: {start} > {end}")
    return start, end


class FieldStore:
    """(channel, time) で [H, W] フィールドを返す読み取り専用ストア

    時間変化チャネルは [T, H, W]、定数チャネルは [H, W] の配列
    (numpy / memmap / xarray.DataArray) として保持する。
    """

    def __init__(self, channels, times, grid: GridSpec, catalog: VariableCatalog, metadata=None):
        if len(channels) != catalog.n_in:
            raise CatalogMismatchError(f"store has {len(channels)} channels, catalog expects {catalog.n_in}")
        self.channels = list(channels)
        self.times = pd.DatetimeIndex(times)
        self.grid = grid
        self.catalog = catalog
        self.metadata = dict(metadata or {})
        for c, arr in enumerate(self.channels):
            expected = grid.shape if catalog.is_constant(c) else (len(self.times),) + grid.shape
            if tuple(arr.shape) != expected:
                raise GeometryError(f"channel {c} has shape {tuple(arr.shape)}, expected {expected}")

    @classmethod
    def from_array(cls, data, times, grid, catalog, metadata=None) -> "FieldStore":
        """[C, T, H, W] 配列から作成 (定数チャネルは先頭時刻を使う)"""
        data = np.asarray(data, dtype=np.float32)
        channels = [data[c, 0].copy() if catalog.is_constant(c) else data[c] for c in range(catalog.n_in)]
        return cls(channels, times, grid, catalog, metadata)

    @property
    def n_times(self) -> int:
        return len(self.times)

    def field(self, channel: int, t: int) -> np.ndarray:
        arr = self.channels[channel]
        if self.catalog.is_constant(channel):
            return np.asarray(arr, dtype=np.float32)
        return np.asarray(arr[t], dtype=np.float32)

    def __getitem__(self, key):
        channel, t = key
        return self.field(channel, t)

    def channel_array(self, channel: int, index=slice(None)) -> np.ndarray:
        """チャネルの時間方向スライス [n, H, W]"""
        arr = self.channels[channel]
        if self.catalog.is_constant(channel):
            n = len(np.arange(self.n_times)[index])
            return np.broadcast_to(np.asarray(arr, dtype=np.float32), (n,) + self.grid.shape)
        return np.asarray(arr[index], dtype=np.float32)

    def window(self, start: int, stop: int, channels=None) -> np.ndarray:
        """[C, stop-start, H, W] の時間窓"""
        channels = range(self.catalog.n_in) if channels is None else channels
        return np.stack([self.channel_array(c, slice(start, stop)) for c in channels])

    def time_slice(self, time_range=None) -> slice:
        if time_range is None:
            return slice(0, self.n_times)
        start, end = resolve_time_range(time_range)
        values = self.times.values
        i0 = int(np.searchsorted(values, start.to_datetime64(), side="left"))
        i1 = int(np.searchsorted(values, end.to_datetime64(), side="right"))
        return slice(i0, max(i0, i1))

    def check_finite(self):
        """非有限値があればIngestionError"""
        names = self.catalog.channel_names()
        for c in range(self.catalog.n_in):
            if self.catalog.is_constant(c):
                if not np.isfinite(self.field(c, 0)).all():
                    raise IngestionError(f"non-finite values in constant field '{names[c]}'")
                continue
            for i0 in range(0, self.n_times, _TIME_CHUNK):
                block = self.channel_array(c, slice(i0, i0 + _TIME_CHUNK))
                if not np.isfinite(block).all():
                    bad = i0 + int(np.nonzero(~np.isfinite(block).reshape(block.shape[0], -1).all(axis=1))[0][0])
                    raise IngestionError(f"non-finite values in '{names[c]}' at {self.times[bad]}")


def _coord_name(da, candidates):
    for name in candidates:
        if name in da.dims:
            return name
    raise GeometryError(f"none of {candidates} found in dimensions {da.dims}")


def _open_variable(root: Path, entry: CatalogEntry) -> xr.Dataset:
    """変数ごとのNetCDFファイル群を開く (WeatherBenchのディレクトリ構成)"""
    files = sorted((root / entry.name).glob("*.nc"))
    if not files and entry.kind == "constant":
        files = sorted((root / "constants").glob("*.nc"))
    if not files:
        raise CatalogMismatchError(f"no NetCDF files found for '{entry.name}' under {root}")

    datasets = []
    for path in files:
        ds = xr.open_dataset(path)
        if entry.short_name in ds.data_vars or entry.name in ds.data_vars:
            datasets.append(ds)
    if not datasets:
        raise CatalogMismatchError(f"variable '{entry.name}' ({entry.short_name}) not found in {files[0].parent}")
    if len(datasets) == 1 or "time" not in datasets[0].dims:
        return datasets[0]
    return xr.concat(datasets, dim="time").sortby("time")


def load_archive(path, catalog: VariableCatalog, years) -> FieldStore:
    """NetCDFアーカイブを遅延インデックス可能なストアとして開く"""
    root = Path(path)
    start, end = resolve_time_range(years)
    grid = None
    times = None
    channels = []

    for entry in catalog.entries:
        ds = _open_variable(root, entry)
        var = entry.short_name if entry.short_name in ds.data_vars else entry.name
        da = ds[var]
        lat_name = _coord_name(da, ("lat", "latitude"))
        lon_name = _coord_name(da, ("lon", "longitude"))
        entry_grid = GridSpec(da[lat_name].values, da[lon_name].values)
        if grid is None:
            grid = entry_grid
        elif not grid.same_as(entry_grid):
            raise GeometryError(f"grid of '{entry.name}' differs from the first variable's grid")

        if entry.kind == "constant":
            if "time" in da.dims:
                da = da.isel(time=0)
            extra = [d for d in da.dims if d not in (lat_name, lon_name)]
            if extra:
                da = da.isel({d: 0 for d in extra})
            channels.append(np.asarray(da.transpose(lat_name, lon_name).values, dtype=np.float32))
            continue

        da = da.sel(time=slice(start, end))
        entry_times = pd.DatetimeIndex(da["time"].values)
        if times is None:
            times = entry_times
        elif not times.equals(entry_times):
            raise GeometryError(f"time axis of '{entry.name}' differs from the first variable's time axis")

        if entry.kind == "3D":
            level_name = _coord_name(da, ("level", "plev", "isobaricInhPa"))
            available = set(int(v) for v in da[level_name].values)
            for level in entry.levels:
                if level not in available:
                    raise CatalogMismatchError(f"'{entry.name}' is missing level {level} hPa")
                channels.append(da.sel({level_name: level}).transpose("time", lat_name, lon_name))
        else:
            channels.append(da.transpose("time", lat_name, lon_name))

    grid.validate_global()

    if times is None or len(times) == 0:
        raise IngestionError(f"no time steps between {start} and {end} in {root}")
    if isinstance(years[0], (int, np.integer)):
        missing = sorted(set(range(int(years[0]), int(years[1]) + 1)) - set(times.year))
        if missing:
            raise IngestionError(f"requested years missing from archive: {missing}")

    store = FieldStore(channels, times, grid, catalog, {"source": str(root)})
    store.check_finite()
    log_message(f"アーカイブを読み込みました: {root} ({catalog.n_in} channels, {len(times)} steps)")
    return store


# ---------------------------------------------------------------------------
# 正規化
# ---------------------------------------------------------------------------

@dataclass
class NormStats:
    """チャネルごとの平均・標準偏差 (物理単位)"""

    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple = field(default_factory=tuple)

    def _broadcast(self, values, x, channels, channel_axis):
        values = values if channels is None else values[np.asarray(channels)]
        shape = [1] * x.ndim
        shape[channel_axis] = -1
        if torch.is_tensor(x):
            return torch.as_tensor(values, dtype=x.dtype, device=x.device).reshape(shape)
        return values.reshape(shape)

    def normalize(self, x, channels=None, channel_axis: int = 0):
        m = self._broadcast(self.mean, x, channels, channel_axis)
        s = self._broadcast(self.std, x, channels, channel_axis)
        out = (x - m) / s
        return out if torch.is_tensor(x) else out.astype(np.asarray(x).dtype, copy=False)

    def denormalize(self, x, channels=None, channel_axis: int = 0):
        m = self._broadcast(self.mean, x, channels, channel_axis)
        s = self._broadcast(self.std, x, channels, channel_axis)
        out = x * s + m
        return out if torch.is_tensor(x) else out.astype(np.asarray(x).dtype, copy=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "channel_names": list(self.channel_names)}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(
            np.asarray(data["mean"], dtype=np.float64),
            np.asarray(data["std"], dtype=np.float64),
            tuple(data.get("channel_names", ())),
        )


def compute_norm_stats(store: FieldStore, train_range=None) -> NormStats:
    """学習期間の全格子点・全時刻でチャネルごとの平均と標準偏差を計算"""
    sl = store.time_slice(train_range)
    n = sl.stop - sl.start
    if n <= 0:
        raise ConfigurationError(f"training range {train_range} selects no time steps")

    names = store.catalog.channel_names()
    mean = np.zeros(store.catalog.n_in)
    std = np.ones(store.catalog.n_in)
    for c in range(store.catalog.n_in):
        if store.catalog.is_constant(c):
            # 定数チャネルはstd=1で素通し
            mean[c] = float(np.mean(store.field(c, 0), dtype=np.float64))
            continue

        total = 0.0
        count = 0
        for i0 in range(sl.start, sl.stop, _TIME_CHUNK):
            block = store.channel_array(c, slice(i0, min(i0 + _TIME_CHUNK, sl.stop)))
            total += float(np.sum(block, dtype=np.float64))
            count += block.size
        mu = total / count
        sq = 0.0
        for i0 in range(sl.start, sl.stop, _TIME_CHUNK):
            block = store.channel_array(c, slice(i0, min(i0 + _TIME_CHUNK, sl.stop)))
            sq += float(np.sum(np.square(block.astype(np.float64) - mu)))
        sigma = math.sqrt(sq / count)
        if not np.isfinite(sigma) or sigma <= 0.0:
            raise DegenerateStatisticsError(f"channel '{names[c]}' has zero variance over the training range")
        mean[c] = mu
        std[c] = sigma
    return NormStats(mean, std, tuple(names))


# ---------------------------------------------------------------------------
# シーケンス
# ---------------------------------------------------------------------------

@dataclass
class SequenceSample:
    """学習サンプル: 履歴 [n_in, T_hist, H, W] と目標 [n_out, T_pred, H, W]"""

    history: np.ndarray
    target: np.ndarray
    init_time: pd.Timestamp


def window_starts(n_times: int, t_hist: int, t_pred: int, stride: int = 1) -> np.ndarray:
    if t_hist < 1 or t_pred < 1:
        raise ConfigurationError("t_hist and t_pred must be at least 1")
    if stride < 1:
        raise ConfigurationError("stride must be at least 1")
    return np.arange(0, max(0, n_times - t_hist - t_pred + 1), stride)


def build_sample(store: FieldStore, stats: NormStats, start: int, t_hist: int, t_pred: int) -> SequenceSample:
    prognostic = store.catalog.prognostic_channels
    history = stats.normalize(store.window(start, start + t_hist))
    target = stats.normalize(
        store.window(start + t_hist, start + t_hist + t_pred, prognostic), channels=prognostic
    )
    if not (np.isfinite(history).all() and np.isfinite(target).all()):
        raise IngestionError(f"non-finite values in the window starting at {store.times[start]}")
    return SequenceSample(history, target, store.times[start + t_hist - 1])


def make_sequences(
    store: FieldStore,
    stats: NormStats,
    t_hist: int,
    t_pred: int,
    stride: int = 1,
    time_range=None,
    shard: Optional[tuple[int, int]] = None,
) -> Iterator[SequenceSample]:
    """時間範囲に完全に収まる全ての窓を順に返す

    shard=(index, count) を指定すると互いに素な窓の部分集合だけを返す。
    """
    sl = store.time_slice(time_range)
    starts = window_starts(sl.stop - sl.start, t_hist, t_pred, stride) + sl.start
    if shard is not None:
        index, count = shard
        starts = starts[index::count]
    for start in starts:
        yield build_sample(store, stats, int(start), t_hist, t_pred)


class WindowDataset(Dataset):
    """窓インデックスでランダムアクセスできるデータセット (DataLoaderのワーカー並列用)"""

    def __init__(self, store, stats, t_hist, t_pred, stride=1, time_range=None):
        self.store = store
        self.stats = stats
        self.t_hist = t_hist
        self.t_pred = t_pred
        sl = store.time_slice(time_range)
        self.starts = window_starts(sl.stop - sl.start, t_hist, t_pred, stride) + sl.start

    def __len__(self):
        return len(self.starts)

    def sample(self, index: int) -> SequenceSample:
        return build_sample(self.store, self.stats, int(self.starts[index]), self.t_hist, self.t_pred)

    def __getitem__(self, index):
        sample = self.sample(index)
        return torch.from_numpy(np.ascontiguousarray(sample.history)), torch.from_numpy(np.ascontiguousarray(sample.target))


# ---------------------------------------------------------------------------
# 緯度重みと気候値
# ---------------------------------------------------------------------------

def latitude_weights(grid: GridSpec) -> np.ndarray:
    """L(j) = cos(lat_j) / mean(cos(lat))"""
    w = np.cos(np.deg2rad(grid.lat_deg))
    return w / w.mean()


def calendar_weeks(times: pd.DatetimeIndex) -> np.ndarray:
    """ISO週番号 (0始まり、53週目は52週目に畳み込む)"""
    weeks = np.asarray(pd.DatetimeIndex(times).isocalendar().week, dtype=np.int64)
    return np.minimum(weeks, 52) - 1


def weekly_climatology(store: FieldStore, stats: Optional[NormStats], time_range, channels=None) -> np.ndarray:
    """52週それぞれの平均場 [52, C, H, W]

    statsを渡すと正規化単位、Noneなら物理単位で返す。
    """
    sl = store.time_slice(time_range)
    times = store.times[sl]
    if len(times) == 0 or times[-1] - times[0] < pd.Timedelta(days=364):
        raise ConfigurationError("climatology range must span at least one full year")
    weeks = calendar_weeks(times)
    if np.unique(weeks).size < 52:
        raise ConfigurationError("climatology range does not cover all 52 calendar weeks")

    channels = list(range(store.catalog.n_in)) if channels is None else list(channels)
    clim = np.zeros((52, len(channels)) + store.grid.shape, dtype=np.float64)
    for w in range(52):
        index = np.nonzero(weeks == w)[0] + sl.start
        for ci, c in enumerate(channels):
            clim[w, ci] = np.mean(store.channel_array(c, index), axis=0, dtype=np.float64)
    clim = clim.astype(np.float32)
    if stats is not None:
        clim = stats.normalize(clim, channels=channels, channel_axis=1)
    return clim


# ---------------------------------------------------------------------------
# 合成トイデータ
# ---------------------------------------------------------------------------

def smooth_field(rng: np.random.Generator, n_lat: int, n_lon: int, n_modes: int = 4) -> np.ndarray:
    """経度方向に周期的な滑らかなランダム場 (標準偏差1)"""
    y = np.linspace(0.0, np.pi, n_lat)[:, None]
    x = 2.0 * np.pi * np.arange(n_lon)[None, :] / n_lon
    f = np.zeros((n_lat, n_lon))
    for _ in range(n_modes):
        m = rng.integers(1, max(2, n_lon // 4) + 1)
        k = rng.integers(1, max(2, n_lat // 2) + 1)
        f += rng.normal() * np.cos(m * x + rng.uniform(0, 2 * np.pi)) * np.cos(k * y + rng.uniform(0, 2 * np.pi))
    std = f.std()
    return f / std if std > 0 else f


def shift_longitude(field_2d: np.ndarray, cells: float) -> np.ndarray:
    """経度方向の周期シフト (整数なら厳密なroll、それ以外はスペクトルシフト)"""
    if float(cells).is_integer():
        return np.roll(field_2d, int(cells), axis=-1)
    n = field_2d.shape[-1]
    spectrum = np.fft.rfft(field_2d, axis=-1)
    k = np.arange(spectrum.shape[-1])
    spectrum = spectrum * np.exp(-2j * np.pi * k * cells / n)
    return np.fft.irfft(spectrum, n=n, axis=-1)


def draw_regimes(n_sequences: int, seed) -> np.ndarray:
    """確率1/2で2つのドリフト領域のどちらかを選ぶ"""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.integers(0, 2, size=n_sequences)


def synth_toy(
    kind: str,
    grid: GridSpec,
    n_steps: int,
    seed: int,
    catalog: Optional[VariableCatalog] = None,
    start: str = "2015-01-01",
    velocity: float = 1.0,
    regime_velocities: tuple = (1.0, -1.0),
    pre_velocity: float = 0.0,
    segment_steps: int = 26,
    t_hist: int = 6,
    amplitude: float = 10.0,
    peak_day: float = 175.5,
    noise: float = 0.0,
) -> FieldStore:
    """卓上規模の検証用トイアーカイブを生成"""
    if kind not in TOY_KINDS:
        raise ConfigurationError(f"unknown toy kind '{kind}' (expected one of {', '.join(TOY_KINDS)})")
    if n_steps < 1:
        raise ConfigurationError("n_steps must be at least 1")

    catalog = catalog or VariableCatalog.toy()
    rng = np.random.default_rng(seed)
    times = pd.date_range(start, periods=n_steps, freq=f"{STEP_HOURS}h")
    n_lat, n_lon = grid.shape
    metadata = {"kind": kind, "seed": int(seed)}

    regimes = None
    if kind == "stochastic-advection":
        n_segments = math.ceil(n_steps / segment_steps)
        regimes = draw_regimes(n_segments, rng)
        metadata.update(
            segment_steps=segment_steps,
            regimes=regimes.tolist(),
            regime_velocities=list(regime_velocities),
            t_hist=t_hist,
        )

    doy = np.asarray(times.dayofyear - 1 + times.hour / 24.0, dtype=np.float64)
    channels = []
    for c in range(catalog.n_in):
        base = smooth_field(rng, n_lat, n_lon)
        if catalog.is_constant(c):
            channels.append(base.astype(np.float32))
            continue

        frames = np.empty((n_steps, n_lat, n_lon), dtype=np.float64)
        if kind == "advection":
            for t in range(n_steps):
                frames[t] = shift_longitude(base, velocity * t)
        elif kind == "stochastic-advection":
            for s, regime in enumerate(regimes):
                seg0 = s * segment_steps
                seg_len = min(segment_steps, n_steps - seg0)
                f0 = smooth_field(rng, n_lat, n_lon)
                drift = 0.0
                for i in range(seg_len):
                    frames[seg0 + i] = shift_longitude(f0, drift)
                    # 履歴区間は共通ドリフト、予測区間は領域ごとのドリフト
                    drift += pre_velocity if i + 1 < t_hist else regime_velocities[int(regime)]
        else:
            cycle = amplitude * np.cos(2.0 * np.pi * (doy - peak_day) / 365.25)
            frames[:] = base[None] + cycle[:, None, None]
        if noise > 0:
            frames += noise * rng.normal(size=frames.shape)
        channels.append(frames.astype(np.float32))

    return FieldStore(channels, times, grid, catalog, metadata)


# ---------------------------------------------------------------------------
# 統合キャッシュ
# ---------------------------------------------------------------------------

def write_cache(store: FieldStore, stats: NormStats, cache_dir, extra: Optional[dict] = None) -> Path:
    """チャネルごとのfloat32バイナリとマニフェストを書き出す"""
    cache_dir = Path(cache_dir)
    (cache_dir / "channels").mkdir(parents=True, exist_ok=True)
    if store.n_times > 1:
        steps = np.diff(store.times.values).astype("timedelta64[s]").astype(np.int64)
        if np.any(steps != steps[0]):
            raise IngestionError("time axis must be regularly spaced to build a cache")
        step_hours = float(steps[0]) / 3600.0
    else:
        step_hours = float(STEP_HOURS)

    names = store.catalog.channel_names()
    channel_records = []
    for c in range(store.catalog.n_in):
        file_name = f"{c:03d}_{names[c]}.f32"
        path = cache_dir / "channels" / file_name
        with open(path, "wb") as f:
            if store.catalog.is_constant(c):
                np.ascontiguousarray(store.field(c, 0), dtype="<f4").tofile(f)
                shape = list(store.grid.shape)
            else:
                for i0 in range(0, store.n_times, _TIME_CHUNK):
                    block = store.channel_array(c, slice(i0, i0 + _TIME_CHUNK))
                    np.ascontiguousarray(block, dtype="<f4").tofile(f)
                shape = [store.n_times, *store.grid.shape]
        channel_records.append({"index": c, "name": names[c], "file": file_name, "shape": shape})

    manifest = {
        "catalog": store.catalog.to_dict(),
        "grid": store.grid.to_dict(),
        "times": {"start": store.times[0].isoformat(), "n_times": store.n_times, "step_hours": step_hours},
        "norm_stats": stats.to_dict(),
        "channels": channel_records,
        "metadata": store.metadata,
    }
    manifest.update(extra or {})
    # マニフェストは最後に書く (存在すればキャッシュは完全)
    save_json(cache_dir / MANIFEST_NAME, manifest)
    log_message(f"キャッシュを書き出しました: {cache_dir}")
    return cache_dir


def open_cache(cache_dir) -> tuple[FieldStore, NormStats, dict]:
    """統合キャッシュをmemmapで開く"""
    cache_dir = Path(cache_dir)
    manifest = load_json(cache_dir / MANIFEST_NAME)
    if not manifest:
        raise IngestionError(f"no cache manifest found in {cache_dir}")
    catalog = VariableCatalog.from_dict(manifest["catalog"])
    grid = GridSpec.from_dict(manifest["grid"])
    t = manifest["times"]
    times = pd.date_range(t["start"], periods=t["n_times"], freq=pd.Timedelta(hours=t["step_hours"]))
    channels = [
        read_blob(cache_dir / "channels" / rec["file"], rec["shape"], mmap=True)
        for rec in sorted(manifest["channels"], key=lambda r: r["index"])
    ]
    store = FieldStore(channels, times, grid, catalog, manifest.get("metadata"))
    return store, NormStats.from_dict(manifest["norm_stats"]), manifest
