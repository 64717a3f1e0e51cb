"""Configuration management for the forecast toolkit"""

import copy
import json
import tomllib
from dataclasses import dataclass, field
from pathlib import Path

from backbone import MODEL_PRESETS, ModelConfig
from constants import RUNS_DIR, STUDY_LOCATIONS
from ensemble_manager import EnsembleConfig
from errors import ConfigurationError
from perturbation import PerturbationConfig
from training_manager import TrainConfig
from utils import fingerprint, load_json

SECTIONS = ("data", "model", "perturbation", "training", "ensemble", "verification", "run")

# キーが省略可能 (None) な項目
NULLABLE_KEYS = {"training.max_steps", "ensemble.n_steps"}

BASE_TREE = {
    "data": {
        "source": "toy",
        "catalog": "toy",
        "archive_path": "",
        "years": [2015, 2016],
        "cache_dir": "",
        "grid": [8, 16],
        "n_prognostic": 2,
        "n_constants": 1,
        "toy_kind": "stochastic-advection",
        "toy_steps": 1664,
        "toy_seed": 0,
        "toy_start": "2015-01-01",
        "toy_velocity": 1.0,
        "regime_velocities": [1.0, -1.0],
        "t_hist": 6,
        "t_pred": 20,
        "stride": 26,
        "train_range": ["2015-01-01", "2015-11-08 18:00"],
        "test_range": ["2015-11-09", "2016-02-20 18:00"],
        "climatology_range": ["2015-01-01", "2015-12-31 18:00"],
    },
    "model": {
        "stage_dims": list(MODEL_PRESETS["toy"]["stage_dims"]),
        "encoder_depth": 2,
        "decoder_depth": 2,
        "window": 8,
        "mlp_ratio": 4.0,
        "multi_scale": True,
        "residual": True,
        "memory_update": "attention",
        "dropout_rate": 0.1,
        "longitude_cyclic": True,
        "zero_init_predictor": False,
    },
    "perturbation": {
        "beta": 1e-4,
        "latent_scale": 3,
        "latent_channels": 16,
        "ramp_fraction": 0.1,
        "full_covariance": True,
    },
    "training": {
        "phase": 1,
        "epochs": 20,
        "batch_size": 4,
        "lr_backbone": 1e-3,
        "phase2_lr_backbone": 1e-4,
        "lr_perturbation": 1e-3,
        "lr_schedule": "cosine",
        "beta": 1e-4,
        "teacher_floor": 0.01,
        "teacher_end_fraction": 0.8,
        "weight_decay": 0.01,
        "adam_betas": [0.9, 0.999],
        "grad_clip": 1.0,
        "max_steps": None,
        "num_workers": 0,
        "checkpoint_every": 1,
    },
    "ensemble": {
        "method": "learned",
        "n_members": 20,
        "sigma": 0.02,
        "dropout_rate": 0.1,
        "checkpoints": [],
        "member_batch_size": 1,
        "noise_scale": 1.0,
        "perturb_every_step": True,
        "n_steps": None,
        "n_init": 8,
    },
    "verification": {
        "fields": ["tracer_0", "tracer_1"],
        "sweep_counts": [1, 2, 5, 10, 20],
        "sweep_draws": 10,
        "fair_crps": False,
        "locations": {"north": [45.0, 90.0], "south": [-45.0, 270.0]},
    },
    "run": {
        "seed": 0,
        "out_dir": str(Path(RUNS_DIR) / "toy"),
        "device": "auto",
        "log_file": "",
        "preset": "toy",
    },
}

PRESET_OVERRIDES = {
    "toy": {},
    "paper": {
        "data": {
            "source": "archive",
            "catalog": "default",
            "archive_path": "weatherbench/5.625deg",
            "years": [1979, 2018],
            "grid": [32, 64],
            "stride": 1,
            "train_range": [1979, 2016],
            "test_range": [2017, 2018],
            "climatology_range": [1979, 2016],
        },
        "model": {
            "stage_dims": list(MODEL_PRESETS["paper"]["stage_dims"]),
            "decoder_depth": 6,
        },
        "training": {
            "epochs": 100,
            "batch_size": 16,
            "lr_backbone": 2e-4,
            "phase2_lr_backbone": 2e-5,
            "lr_perturbation": 2e-4,
        },
        "ensemble": {"n_members": 100, "n_init": 64},
        "verification": {
            "fields": ["Z500", "T850", "T2M", "TP"],
            "sweep_counts": [1, 2, 5, 10, 20, 50, 100],
            "locations": {name: list(loc) for name, loc in STUDY_LOCATIONS.items()},
        },
        "run": {"out_dir": str(Path(RUNS_DIR) / "paper"), "preset": "paper"},
    },
}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def merge_tree(tree: dict, updates: dict, prefix: str = "") -> dict:
    """既知のキーだけを型チェックしながら上書き"""
    for key, value in updates.items():
        name = f"{prefix}{key}"
        if key not in tree:
            raise ConfigurationError(f"unknown configuration key '{name}'")
        default = tree[key]
        if isinstance(default, dict) and prefix == "":
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{name}' must be a section")
            merge_tree(default, value, f"{name}.")
            continue
        if value is None or default is None:
            if value is None and name not in NULLABLE_KEYS:
                raise ConfigurationError(f"'{name}' cannot be null")
            if value is not None and not isinstance(value, int):
                raise ConfigurationError(f"'{name}' must be an integer or null")
            tree[key] = value
            continue
        if not _type_ok(default, value):
            raise ConfigurationError(
                f"'{name}' expects {type(default).__name__}, got {type(value).__name__} ({value!r})"
            )
        tree[key] = float(value) if isinstance(default, float) else value
    return tree


def parse_override(text: str) -> dict:
    """'section.key=value' を {section: {key: value}} に変換 (値はJSONリテラル、失敗時は文字列)"""
    if "=" not in text:
        raise ConfigurationError(f"override '{text}' must look like section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigurationError(f"override key '{path}' must look like section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {parts[0]: {parts[1]: value}}


@dataclass
class RunConfig:
    """統合された設定ツリー"""

    tree: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.tree[name]

    @property
    def seed(self) -> int:
        return self.tree["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.tree["run"]["out_dir"])

    def model_config(self, n_in: int, n_out: int, prognostic_channels) -> ModelConfig:
        values = {k: v for k, v in self.tree["model"].items() if k != "zero_init_predictor"}
        return ModelConfig(
            n_in=n_in,
            n_out=n_out,
            t_hist=self.tree["data"]["t_hist"],
            t_pred=self.tree["data"]["t_pred"],
            grid_shape=tuple(self.tree["data"]["grid"]),
            prognostic_channels=tuple(int(c) for c in prognostic_channels),
            **values,
        )

    def perturbation_config(self) -> PerturbationConfig:
        return PerturbationConfig(**self.tree["perturbation"])

    def train_config(self, phase=None) -> TrainConfig:
        values = dict(self.tree["training"])
        if phase is not None:
            values["phase"] = phase
        return TrainConfig(seed=self.seed, stride=self.tree["data"]["stride"], **values)

    def ensemble_config(self) -> EnsembleConfig:
        values = {k: v for k, v in self.tree["ensemble"].items() if k != "n_init"}
        return EnsembleConfig(seed=self.seed, **values)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def fingerprint(self, *sections) -> str:
        return fingerprint({name: self.tree[name] for name in (sections or SECTIONS)})


class ConfigManager:
    """プリセット・設定ファイル・コマンドライン上書きを統合するクラス"""

    def __init__(self, preset: str = "toy"):
        self.preset = preset

    @staticmethod
    def preset_tree(preset: str) -> dict:
        if preset not in PRESET_OVERRIDES:
            raise ConfigurationError(f"unknown preset '{preset}' (expected one of {', '.join(PRESET_OVERRIDES)})")
        tree = copy.deepcopy(BASE_TREE)
        return merge_tree(tree, copy.deepcopy(PRESET_OVERRIDES[preset]))

    @staticmethod
    def load_file(path) -> dict:
        """TOMLまたはJSONの設定ファイルを読み込む (マニフェストならconfigを取り出す)"""
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"configuration file not found: {path}")
        if path.suffix == ".toml":
            try:
                with open(path, "rb") as f:
                    data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigurationError(f"cannot parse {path}: {e}") from e
        elif path.suffix == ".json":
            try:
                data = load_json(path)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"cannot parse {path}: {e}") from e
        else:
            raise ConfigurationError(f"configuration file must be .toml or .json: {path}")
        if "config" in data and isinstance(data["config"], dict):
            data = data["config"]
        return data

    def build(self, preset=None, config_path=None, overrides=(), seed=None, out=None) -> RunConfig:
        """優先順位: プリセット < 設定ファイル < --set < 専用フラグ"""
        file_data = self.load_file(config_path) if config_path else {}
        preset = preset or file_data.get("run", {}).get("preset") or self.preset
        tree = self.preset_tree(preset)
        merge_tree(tree, file_data)
        for text in overrides:
            merge_tree(tree, parse_override(text))
        if seed is not None:
            tree["run"]["seed"] = int(seed)
        if out is not None:
            tree["run"]["out_dir"] = str(out)
        config = RunConfig(tree)
        self.validate(config)
        return config

    @staticmethod
    def validate(config: RunConfig):
        """計算を始める前に全セクションの整合性を確認"""
        data = config.section("data")
        if data["source"] not in ("toy", "archive"):
            raise ConfigurationError("data.source must be 'toy' or 'archive'")
        if data["catalog"] not in ("toy", "default"):
            raise ConfigurationError("data.catalog must be 'toy' or 'default'")
        if data["source"] == "archive" and not data["archive_path"]:
            raise ConfigurationError("data.archive_path is required when data.source = 'archive'")
        if len(data["grid"]) != 2 or min(data["grid"]) < 1:
            raise ConfigurationError("data.grid must be [n_lat, n_lon]")
        for key in ("years", "train_range", "test_range", "climatology_range"):
            if len(data[key]) != 2:
                raise ConfigurationError(f"data.{key} must be [start, end]")
        if data["t_hist"] < 1 or data["t_pred"] < 1 or data["stride"] < 1:
            raise ConfigurationError("data.t_hist, data.t_pred and data.stride must be at least 1")

        config.model_config(1, 1, (0,))
        config.perturbation_config()
        config.train_config()
        config.ensemble_config()
        if config.section("ensemble")["n_init"] < 1:
            raise ConfigurationError("ensemble.n_init must be at least 1")
        if not config.section("verification")["fields"]:
            raise ConfigurationError("verification.fields must list at least one field")
