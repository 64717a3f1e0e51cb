"""
Command implementations for the forecast toolkit.

Each command reads the resolved RunConfig, works on the filesystem layout
below run.out_dir and writes a manifest next to its outputs:

  <cache>/                      prepare-data (data.cache_dir or CACHE_DIR/<preset>)
  <out>/phase1, <out>/phase2    train
  <out>/forecast/<method>       forecast, ensemble
  <out>/eval/<method>           evaluate
  <out>/plots/<method>          plot
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from backbone import SwinRNN
from checkpoint_helper import CheckpointHelper
from config_manager import RunConfig
from constants import APP_NAME, APP_VERSION, CACHE_DIR, MANIFEST_NAME, PLOT_DATA_NAME, SCORES_NAME, STEP_HOURS
from ensemble_manager import EnsembleManager, load_forecast, save_forecast
from errors import ConfigurationError, PreconditionError
from grids import (
    GridSpec,
    VariableCatalog,
    WindowDataset,
    build_sample,
    compute_norm_stats,
    latitude_weights,
    load_archive,
    open_cache,
    synth_toy,
    weekly_climatology,
    write_cache,
)
from perturbation import SwinVRNN
from platform_helpers import DeviceHelper
from plot_helpers import PlotBuilder
from training_manager import TrainingManager, regime_check_inputs
from utils import append_record, get_timestamp, load_json, log_message, save_json
from verification import (
    ScoreTable,
    climatology_forecast,
    lat_weighted_rmse,
    location_cells,
    member_count_sweep,
    rank_histogram,
    rank_histogram_chi2,
    spread_diagnostics,
)


class ForecastApp:
    """コマンドを実行するアプリケーションクラス"""

    def __init__(self, config: RunConfig, log_callback=None):
        self.config = config
        self.log_callback = log_callback or log_message
        self.device = DeviceHelper.get_device(config.section("run")["device"])

    def _log_message(self, message):
        self.log_callback(message)

    # ------------------------------------------------------------------
    # パス
    # ------------------------------------------------------------------

    @property
    def cache_dir(self) -> Path:
        data = self.config.section("data")
        if data["cache_dir"]:
            return Path(data["cache_dir"])
        return Path(CACHE_DIR) / self.config.section("run")["preset"]

    @property
    def out_dir(self) -> Path:
        return self.config.out_dir

    def forecast_dir(self, method: str) -> Path:
        return self.out_dir / "forecast" / method

    def eval_dir(self, method: str) -> Path:
        return self.out_dir / "eval" / method

    def _manifest(self, command: str, **extra) -> dict:
        manifest = {
            "app": APP_NAME,
            "version": APP_VERSION,
            "command": command,
            "created_at": get_timestamp(),
            "environment": DeviceHelper.describe(),
            "config": self.config.to_dict(),
        }
        manifest.update(extra)
        return manifest

    # ------------------------------------------------------------------
    # データ
    # ------------------------------------------------------------------

    def cmd_prepare_data(self) -> Path:
        """アーカイブまたはトイ生成器から統合キャッシュを作る (設定が同じなら何もしない)"""
        data = self.config.section("data")
        fp = self.config.fingerprint("data")
        existing = load_json(self.cache_dir / MANIFEST_NAME)
        if existing.get("config_fingerprint") == fp:
            self._log_message(f"キャッシュは最新です: {self.cache_dir}")
            return self.cache_dir

        if data["catalog"] == "toy":
            catalog = VariableCatalog.toy(data["n_prognostic"], data["n_constants"])
        else:
            catalog = VariableCatalog.default()

        if data["source"] == "toy":
            grid = GridSpec.regular(*data["grid"])
            self._log_message(f"トイデータを生成します: {data['toy_kind']} {grid.shape} x {data['toy_steps']} steps")
            store = synth_toy(
                data["toy_kind"],
                grid,
                data["toy_steps"],
                data["toy_seed"],
                catalog=catalog,
                start=data["toy_start"],
                velocity=data["toy_velocity"],
                regime_velocities=tuple(data["regime_velocities"]),
                segment_steps=data["t_hist"] + data["t_pred"],
                t_hist=data["t_hist"],
            )
        else:
            self._log_message(f"アーカイブを読み込みます: {data['archive_path']} ({data['years'][0]}-{data['years'][1]})")
            store = load_archive(data["archive_path"], catalog, tuple(data["years"]))

        stats = compute_norm_stats(store, data["train_range"])
        extra = self._manifest("prepare-data", config_fingerprint=fp)
        write_cache(store, stats, self.cache_dir, extra)
        self._log_message(f"{catalog.n_in} channels x {store.n_times} times -> {self.cache_dir}")
        return self.cache_dir

    def open_data(self):
        if not (self.cache_dir / MANIFEST_NAME).exists():
            raise PreconditionError(f"no data cache at {self.cache_dir}; run prepare-data first")
        return open_cache(self.cache_dir)

    def _model_config(self, store):
        catalog = store.catalog
        cfg = self.config.model_config(catalog.n_in, catalog.n_out, catalog.prognostic_channels)
        if tuple(cfg.grid_shape) != tuple(store.grid.shape):
            raise ConfigurationError(
                f"data.grid {list(cfg.grid_shape)} does not match the cached grid {list(store.grid.shape)}"
            )
        return cfg

    # ------------------------------------------------------------------
    # 学習
    # ------------------------------------------------------------------

    def cmd_train(self, phase=None, resume: bool = False) -> Path:
        """第1段階 (SwinRNN) または第2段階 (SwinVRNN) の学習"""
        store, stats, _ = self.open_data()
        data = self.config.section("data")
        train_cfg = self.config.train_config(phase)
        model_cfg = self._model_config(store)
        dataset = WindowDataset(store, stats, data["t_hist"], data["t_pred"], data["stride"], data["train_range"])
        extra = self._manifest("train", cache_dir=str(self.cache_dir))
        manager = TrainingManager(self.out_dir, self.device, self.log_callback)

        if train_cfg.phase == 1:
            model = SwinRNN(model_cfg)
            if self.config.section("model")["zero_init_predictor"]:
                model.zero_init_predictor()
            return manager.train_phase1(model, dataset, train_cfg, extra, resume)
        model = SwinVRNN(model_cfg, self.config.perturbation_config())
        regime_check = self._regime_check(store, dataset.sample(0)) if len(dataset) else None
        return manager.train_phase2(
            model, dataset, train_cfg, self.out_dir / "phase1", extra, resume, regime_check=regime_check
        )

    @staticmethod
    def _regime_check(store, sample):
        """確率的移流トイデータのときだけ領域KLの入力を作る"""
        if store.metadata.get("kind") != "stochastic-advection":
            return None
        return regime_check_inputs(sample, store.catalog.prognostic_channels, store.metadata["regime_velocities"])

    # ------------------------------------------------------------------
    # 予測
    # ------------------------------------------------------------------

    def test_windows(self, store, stats):
        """テスト期間から n_init 個の初期時刻を等間隔に選ぶ"""
        data = self.config.section("data")
        dataset = WindowDataset(store, stats, data["t_hist"], data["t_pred"], data["stride"], data["test_range"])
        if len(dataset) == 0:
            raise PreconditionError("data.test_range contains no complete windows")
        n_init = min(self.config.section("ensemble")["n_init"], len(dataset))
        picks = np.unique(np.linspace(0, len(dataset) - 1, n_init).round().astype(int))
        samples = [dataset.sample(int(i)) for i in picks]
        history = torch.from_numpy(np.stack([s.history for s in samples]))
        starts = [int(dataset.starts[i]) for i in picks]
        init_times = [s.init_time.isoformat() for s in samples]
        return history, starts, init_times

    def _default_checkpoint(self, method: str) -> Path:
        return self.out_dir / ("phase2" if method == "learned" else "phase1")

    def _load_models(self, method: str, checkpoints):
        paths = [Path(p) for p in checkpoints] or [self._default_checkpoint(method)]
        if method != "multi-model":
            paths = paths[:1]
        models = []
        for path in paths:
            self._log_message(f"チェックポイントを読み込みます: {path}")
            models.append(CheckpointHelper(path).load_model(self.device))
        return models, paths

    def _run_forecast(self, command: str, ens_cfg, checkpoints) -> Path:
        store, stats, _ = self.open_data()
        history, starts, init_times = self.test_windows(store, stats)
        models, paths = self._load_models(ens_cfg.method, checkpoints)
        for model in models:
            if tuple(model.cfg.grid_shape) != tuple(store.grid.shape) or model.cfg.n_in != store.catalog.n_in:
                raise ConfigurationError(f"checkpoint grid or catalog does not match the cache {self.cache_dir}")

        manager = EnsembleManager(self.device, self.log_callback)
        forecast = manager.run(models, history, ens_cfg)
        out_dir = self.forecast_dir(ens_cfg.method)
        extra = self._manifest(
            command,
            cache_dir=str(self.cache_dir),
            checkpoints=[str(p) for p in paths],
            ensemble_config=ens_cfg.to_dict(),
            window_starts=starts,
            init_times=init_times,
            n_steps=int(forecast.members.shape[3]),
        )
        save_forecast(forecast, out_dir, extra)
        self._log_message(f"予測を保存しました: {out_dir} ({forecast.n_members} members x {len(starts)} inits)")
        return out_dir

    def cmd_forecast(self, checkpoint=None) -> Path:
        """摂動なしのコントロール予測"""
        ens_cfg = replace(self.config.ensemble_config(), method="control", n_members=1)
        return self._run_forecast("forecast", ens_cfg, [checkpoint] if checkpoint else [])

    def cmd_ensemble(self) -> Path:
        """設定された摂動手法でアンサンブル予測"""
        ens_cfg = self.config.ensemble_config()
        ens_cfg.check_checkpoints()
        return self._run_forecast("ensemble", ens_cfg, list(ens_cfg.checkpoints))

    # ------------------------------------------------------------------
    # 検証
    # ------------------------------------------------------------------

    def _truth(self, store, starts, n_steps):
        """予測期間の真値 (物理単位) [N, n_out, T, H, W]"""
        t_hist = self.config.section("data")["t_hist"]
        prognostic = store.catalog.prognostic_channels
        truth = []
        for start in starts:
            stop = start + t_hist + n_steps
            if stop > store.n_times:
                raise PreconditionError(
                    f"truth for the window starting at {store.times[start]} runs past the end of the cache"
                )
            truth.append(store.window(start + t_hist, stop, prognostic))
        return np.stack(truth).astype(np.float64)

    def _climatology(self, store, channel, init_times, n_steps):
        try:
            clim = weekly_climatology(store, None, self.config.section("data")["climatology_range"], [channel])
        except ConfigurationError as e:
            self._log_message(f"気候値を計算できないためACCを省略します: {e}")
            return None
        return climatology_forecast(clim, init_times, n_steps, STEP_HOURS)[:, 0].astype(np.float64)

    def _learned_model(self, manifest, method):
        """学習分布の予測に使ったSwinVRNN (最初のチェックポイント)"""
        if method not in ("learned", "multi-model") or not manifest.get("checkpoints"):
            return None
        helper = CheckpointHelper(manifest["checkpoints"][0])
        if not helper.exists() or helper.load_manifest().get("kind") != "swinvrnn":
            return None
        return helper.load_model(self.device).eval()

    def _covariance_record(self, model, store, stats, manifest, method):
        """学習分布の事前共分散 (最初の初期時刻、全潜在チャネル平均)"""
        data = self.config.section("data")
        start = manifest["window_starts"][0]
        history = stats.normalize(store.window(start, start + data["t_hist"]))
        dist = model.initial_prior(torch.from_numpy(np.ascontiguousarray(history))[None].to(self.device))
        covariance = dist.covariance()[0].mean(dim=0).cpu().numpy()
        return {"kind": "covariance", "method": method, "init_time": manifest["init_times"][0], "covariance": covariance}

    def _regime_kl(self, model, store, stats, manifest):
        data = self.config.section("data")
        sample = build_sample(store, stats, manifest["window_starts"][0], data["t_hist"], data["t_pred"])
        regime_check = self._regime_check(store, sample)
        if regime_check is None:
            return None
        manager = TrainingManager(self.out_dir, self.device, self.log_callback)
        return manager.regime_kl(model, regime_check)

    def cmd_evaluate(self, forecast_dir=None, sweep: bool = False) -> Path:
        """スコア表とプロット用データを作る"""
        method = self.config.section("ensemble")["method"]
        forecast_dir = Path(forecast_dir) if forecast_dir else self.forecast_dir(method)
        if not (forecast_dir / MANIFEST_NAME).exists():
            raise PreconditionError(f"no forecast found at {forecast_dir}; run forecast or ensemble first")
        forecast, fmanifest = load_forecast(forecast_dir)
        method = forecast.method
        verification = self.config.section("verification")
        store, stats, _ = self.open_data()
        catalog = store.catalog
        prognostic = catalog.prognostic_channels

        n_steps = fmanifest["n_steps"]
        starts = fmanifest["window_starts"]
        init_times = fmanifest["init_times"]
        lead_hours = [STEP_HOURS * (t + 1) for t in range(n_steps)]
        weights = latitude_weights(store.grid)
        members = stats.denormalize(forecast.members.numpy().astype(np.float64), channels=prognostic, channel_axis=2)
        truth = self._truth(store, starts, n_steps)
        cells = location_cells(store.grid, verification["locations"])

        out_dir = self.eval_dir(method)
        plot_file = out_dir / PLOT_DATA_NAME
        if plot_file.exists():
            plot_file.unlink()
        table = ScoreTable({"forecast_dir": str(forecast_dir), "method": method})

        for field_name in verification["fields"]:
            channel = catalog.resolve_field(field_name)
            o = catalog.output_index(channel)
            scale = catalog.entry_of_channel(channel).score_scale
            members_f = members[:, :, o] * scale
            truth_f = truth[:, o] * scale
            clim_f = self._climatology(store, channel, init_times, n_steps)
            if clim_f is not None:
                clim_f = clim_f * scale

            table.add_field_scores(
                field_name, method, members_f, truth_f, weights, lead_hours, clim_f, verification["fair_crps"]
            )
            mean_f = members_f.mean(axis=0)
            rmse = [lat_weighted_rmse(mean_f[:, t], truth_f[:, t], weights) for t in range(n_steps)]
            record = {"kind": "rmse", "field": field_name, "method": method, "lead_hours": lead_hours, "rmse": rmse}
            if clim_f is not None:
                table.add_field_scores(field_name, "climatology", clim_f[None], truth_f, weights, lead_hours, clim_f)
                record["climatology_rmse"] = [
                    lat_weighted_rmse(clim_f[:, t], truth_f[:, t], weights) for t in range(n_steps)
                ]
            append_record(plot_file, record)

            diagnostics = spread_diagnostics(members_f, truth_f, weights, lead_hours, cells)
            append_record(plot_file, {"kind": "spread", "field": field_name, "method": method, **diagnostics})

            counts = rank_histogram(members_f[:, :, -1].reshape(members_f.shape[0], -1), truth_f[:, -1].reshape(-1), self.config.seed)
            append_record(
                plot_file,
                {
                    "kind": "rank", "field": field_name, "method": method, "lead_hours": lead_hours[-1],
                    "counts": counts, "chi2": rank_histogram_chi2(counts),
                },
            )
            append_record(
                plot_file,
                {
                    "kind": "difference", "field": field_name, "method": method, "lead_hours": lead_hours,
                    "init_time": init_times[0], "difference": mean_f[0] - truth_f[0],
                },
            )

            if sweep:
                self._sweep(table, plot_file, field_name, method, members_f, truth_f, weights, lead_hours)

        model = self._learned_model(fmanifest, method)
        regime_kl = None
        if model is not None:
            append_record(plot_file, self._covariance_record(model, store, stats, fmanifest, method))
            regime_kl = self._regime_kl(model, store, stats, fmanifest)
            if regime_kl is not None:
                self._log_message(f"領域別事後分布間のKL: {regime_kl:.6g}")

        table.to_csv(out_dir / SCORES_NAME)
        save_json(
            out_dir / MANIFEST_NAME,
            self._manifest(
                "evaluate", forecast_dir=str(forecast_dir), method=method, n_members=forecast.n_members,
                sweep=sweep, regime_kl=regime_kl,
            ),
        )
        self._log_message(f"スコア表を保存しました: {out_dir / SCORES_NAME}")
        return out_dir

    def _sweep(self, table, plot_file, field_name, method, members_f, truth_f, weights, lead_hours):
        """メンバー数を変えたときの平均予測RMSE"""
        verification = self.config.section("verification")
        by_lead, total = [], 0
        for t, lead in enumerate(lead_hours):
            records, violations = member_count_sweep(
                members_f[:, :, t], truth_f[:, t], weights,
                verification["sweep_counts"], verification["sweep_draws"], self.config.seed,
            )
            for rec in records:
                if rec["n_members"] != members_f.shape[0]:
                    table.add(field_name, lead, method, rec["n_members"], rec["rmse"])
            by_lead.append({"lead_hours": lead, "records": records, "violations": violations})
            total += violations
        append_record(
            plot_file, {"kind": "sweep", "field": field_name, "method": method, "by_lead": by_lead, "violations": total}
        )
        self._log_message(f"{field_name}: メンバー数スイープの単調性違反 {total} 件")

    # ------------------------------------------------------------------
    # 図
    # ------------------------------------------------------------------

    def cmd_plot(self, eval_dir=None, kinds=None) -> list:
        """評価結果から静的な図を書き出す"""
        method = self.config.section("ensemble")["method"]
        eval_dir = Path(eval_dir) if eval_dir else self.eval_dir(method)
        if not (eval_dir / PLOT_DATA_NAME).exists():
            raise PreconditionError(f"no evaluation output at {eval_dir}; run evaluate first")
        out_dir = self.out_dir / "plots" / eval_dir.name
        builder = PlotBuilder(out_dir, self.log_callback)
        written = builder.render_all(eval_dir / PLOT_DATA_NAME, kinds)
        save_json(out_dir / MANIFEST_NAME, self._manifest("plot", eval_dir=str(eval_dir), files=[str(p) for p in written]))
        return written
