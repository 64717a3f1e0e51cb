"""
Application constants for the SwinVRNN forecast toolkit.
"""
import os
from pathlib import Path

# Application Information
APP_VERSION = "0.4.0"
APP_NAME = "SwinVRNN Forecast Toolkit"

# Determine base directory
# 環境変数でキャッシュルートを上書きできる
CACHE_ROOT_ENV = "SWINVRNN_CACHE_ROOT"
BASE_DIR = Path(os.environ.get(CACHE_ROOT_ENV, "."))

# Directory Configuration
CACHE_DIR = str(BASE_DIR / "cache")
RUNS_DIR = str(BASE_DIR / "runs")

MANIFEST_NAME = "manifest.json"
TRAIN_LOG_NAME = "train_log.jsonl"
PLOT_DATA_NAME = "plot_data.jsonl"
SCORES_NAME = "scores.csv"

# Time axis
STEP_HOURS = 6

# WeatherBench 13 pressure levels (hPa)
PRESSURE_LEVELS = (50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000)

# (name, kind, short_name, units, score_scale)
DEFAULT_CATALOG_TABLE = (
    ("geopotential", "3D", "z", "m2 s-2", 1.0),
    ("temperature", "3D", "t", "K", 1.0),
    ("relative_humidity", "3D", "r", "%", 1.0),
    ("u_component_of_wind", "3D", "u", "m s-1", 1.0),
    ("v_component_of_wind", "3D", "v", "m s-1", 1.0),
    ("2m_temperature", "2D", "t2m", "K", 1.0),
    ("10m_u_component_of_wind", "2D", "u10", "m s-1", 1.0),
    ("10m_v_component_of_wind", "2D", "v10", "m s-1", 1.0),
    # アーカイブはm単位、スコアはmmで報告
    ("total_precipitation", "2D", "tp", "mm", 1000.0),
    ("land_binary_mask", "constant", "lsm", "1", 1.0),
    ("orography", "constant", "orography", "m", 1.0),
)

# 検証対象の4変数 (name, level)
VERIFIED_FIELDS = {
    "Z500": ("geopotential", 500),
    "T850": ("temperature", 850),
    "T2M": ("2m_temperature", None),
    "TP": ("total_precipitation", None),
}

# スプレッド図の観測地点 (lat, lon)
STUDY_LOCATIONS = {
    "London": (51.5, 359.9),
    "Barbados": (13.1, 300.4),
    "Beijing": (39.9, 116.4),
    "Sydney": (-33.9, 151.2),
}

ENSEMBLE_METHODS = ("control", "fixed", "mc-dropout", "learned", "multi-model")
TOY_KINDS = ("advection", "stochastic-advection", "annual-cycle")

SCORE_HEADER = ("field", "lead_hours", "method", "n_members", "rmse", "mae", "acc", "crps", "spread")
