import numpy as np
import pandas as pd
import pytest

from constants import MANIFEST_NAME, PLOT_DATA_NAME, SCORES_NAME, TRAIN_LOG_NAME
from main import build_parser, command_overrides, main
from utils import load_json, read_records

TINY = [
    "data.toy_steps=260",
    "data.t_hist=2",
    "data.t_pred=3",
    "data.stride=5",
    'data.train_range=["2015-01-01", "2015-02-10 18:00"]',
    'data.test_range=["2015-02-11", "2015-03-06 18:00"]',
    "model.stage_dims=[8, 16, 16, 16]",
    "model.encoder_depth=1",
    "model.decoder_depth=1",
    "model.window=4",
    "model.mlp_ratio=2.0",
    "perturbation.latent_channels=2",
    "training.epochs=1",
    "training.max_steps=2",
    "ensemble.n_members=3",
    "ensemble.n_init=2",
    "run.device=cpu",
]


@pytest.fixture
def run_args(tmp_path):
    def build(command, *extra):
        args = [command, "--out", str(tmp_path / "run"), "--set", f"data.cache_dir={tmp_path / 'cache'}"]
        for item in TINY:
            args += ["--set", item]
        return args + list(extra)

    return build


def test_parser_maps_flags_to_overrides():
    args = build_parser().parse_args(["ensemble", "--method", "fixed", "--members", "4", "--sigma", "0.1"])
    assert command_overrides(args) == ['ensemble.method="fixed"', "ensemble.n_members=4", "ensemble.sigma=0.1"]
    args = build_parser().parse_args(["ensemble", "--method", "multi-model", "--checkpoint", "a", "--checkpoint", "b"])
    assert 'ensemble.checkpoints=["a", "b"]' in command_overrides(args)
    args = build_parser().parse_args(["train", "--phase", "2"])
    assert command_overrides(args) == ["training.phase=2"]


def test_paper_preset_is_selectable_from_the_command_line():
    args = build_parser().parse_args(["train", "--phase", "1", "--preset", "paper"])
    assert args.preset == "paper"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--preset", "weatherbench"])


def test_configuration_errors_exit_with_code_2(capsys):
    assert main(["prepare-data", "--set", "training.learning_rate=1"]) == 2
    assert "ConfigurationError" in capsys.readouterr().err


def test_commands_need_their_inputs(tmp_path, run_args, capsys):
    assert main(run_args("train")) == 2
    assert "prepare-data" in capsys.readouterr().err
    assert main(run_args("prepare-data")) == 0
    assert main(run_args("train", "--phase", "2")) == 2
    assert "phase-1 checkpoint" in capsys.readouterr().err
    assert main(run_args("evaluate", "--method", "control")) == 2


def test_toy_pipeline_end_to_end(tmp_path, run_args, capsys):
    run = tmp_path / "run"

    assert main(run_args("prepare-data")) == 0
    cache_manifest = load_json(tmp_path / "cache" / MANIFEST_NAME)
    assert cache_manifest["command"] == "prepare-data"
    capsys.readouterr()
    assert main(run_args("prepare-data")) == 0
    assert "キャッシュは最新です" in capsys.readouterr().out

    assert main(run_args("train", "--phase", "1")) == 0
    assert load_json(run / "phase1" / MANIFEST_NAME)["kind"] == "swinrnn"
    assert main(run_args("train", "--phase", "2")) == 0
    assert load_json(run / "phase2" / MANIFEST_NAME)["kind"] == "swinvrnn"
    regimes = [r for r in read_records(run / TRAIN_LOG_NAME) if r.get("kind") == "regime"]
    assert len(regimes) == 1 and regimes[0]["regime_kl"] >= 0.0

    assert main(run_args("forecast")) == 0
    control = load_json(run / "forecast" / "control" / MANIFEST_NAME)
    assert control["n_members"] == 1
    assert len(control["init_times"]) == 2
    assert control["n_steps"] == 3

    assert main(run_args("ensemble", "--method", "fixed", "--sigma", "0.05")) == 0
    assert load_json(run / "forecast" / "fixed" / MANIFEST_NAME)["n_members"] == 3
    assert main(run_args("ensemble")) == 0
    learned = load_json(run / "forecast" / "learned" / MANIFEST_NAME)
    assert learned["method"] == "learned"
    assert learned["checkpoints"] == [str(run / "phase2")]

    phase2 = str(run / "phase2")
    assert main(run_args("ensemble", "--method", "multi-model", "--checkpoint", phase2)) == 2
    assert "at least 2 checkpoints" in capsys.readouterr().err
    assert main(run_args("ensemble", "--method", "multi-model", "--checkpoint", phase2, "--checkpoint", phase2)) == 0
    assert load_json(run / "forecast" / "multi-model" / MANIFEST_NAME)["n_members"] == 6
    assert main(run_args("evaluate", "--method", "multi-model")) == 0
    assert (run / "eval" / "multi-model" / SCORES_NAME).exists()

    assert main(run_args("evaluate", "--method", "learned", "--sweep")) == 0
    scores = pd.read_csv(run / "eval" / "learned" / SCORES_NAME)
    assert set(scores["field"]) == {"tracer_0", "tracer_1"}
    assert set(scores["lead_hours"]) == {6, 12, 18}
    assert {1, 2, 3} <= set(scores["n_members"])
    full = scores[scores["n_members"] == scores["n_members"].max()]
    assert full["mae"].notna().all() and (full["mae"] >= 0).all()
    kinds = {r["kind"] for r in read_records(run / "eval" / "learned" / PLOT_DATA_NAME)}
    assert kinds == {"rmse", "spread", "rank", "difference", "sweep", "covariance"}
    assert load_json(run / "eval" / "learned" / MANIFEST_NAME)["regime_kl"] >= 0.0

    assert main(run_args("evaluate", "--method", "control")) == 0
    control_scores = pd.read_csv(run / "eval" / "control" / SCORES_NAME)
    assert set(control_scores["n_members"]) == {1}
    # 1メンバーのCRPSは平均絶対誤差そのもの
    control_rows = control_scores[control_scores["method"] == "control"]
    assert ((control_rows["crps"] - control_rows["mae"]).abs() <= 1e-9 * control_rows["mae"].abs().max()).all()

    assert main(run_args("plot", "--method", "learned")) == 0
    plots = run / "plots" / "learned"
    names = {p.name for p in plots.glob("*.png")}
    assert {"rmse_tracer_0.png", "spread_tracer_0.png", "rank_tracer_1.png", "covariance_learned.png"} <= names
    assert "fan_tracer_0_north.png" in names
    assert "sweep_tracer_0.png" in names
    assert load_json(plots / MANIFEST_NAME)["command"] == "plot"

    replay = main(["forecast", "--config", str(run / "forecast" / "control" / MANIFEST_NAME)])
    assert replay == 0


@pytest.mark.slow
def test_stochastic_advection_learned_ensemble_spreads(tmp_path, capsys):
    out = tmp_path / "run"
    common = ["--out", str(out), "--set", f"data.cache_dir={tmp_path / 'cache'}", "--set", "run.device=cpu"]
    common += ["--set", "model.stage_dims=[16, 32, 32, 32]", "--set", "training.epochs=4"]
    common += ["--set", "ensemble.n_members=10"]
    for command in (["prepare-data"], ["train", "--phase", "1"], ["train", "--phase", "2"], ["ensemble"]):
        assert main(command + common) == 0
    assert main(["evaluate", "--sweep"] + common) == 0
    records = read_records(out / "eval" / "learned" / PLOT_DATA_NAME)
    spreads = [r for r in records if r["kind"] == "spread"]
    assert all(max(r["spread"]) > 0.0 for r in spreads)
    sweeps = [r for r in records if r["kind"] == "sweep"]
    assert all(r["by_lead"][0]["records"][-1]["n_members"] == 10 for r in sweeps)


@pytest.mark.slow
def test_learned_ensemble_beats_control_and_fixed_noise(tmp_path):
    out = tmp_path / "run"
    common = ["--out", str(out), "--set", f"data.cache_dir={tmp_path / 'cache'}", "--set", "run.device=cpu"]

    def run(*command):
        assert main(list(command) + common) == 0

    def last_lead_crps(method):
        scores = pd.read_csv(out / "eval" / method / SCORES_NAME)
        scores = scores[scores["method"] == method]
        last = scores[scores["lead_hours"] == scores["lead_hours"].max()]
        return last.set_index("field")["crps"].sort_index()

    def rank_chi2(method):
        records = read_records(out / "eval" / method / PLOT_DATA_NAME)
        return {r["field"]: r["chi2"] for r in records if r["kind"] == "rank"}

    for command in (["prepare-data"], ["train", "--phase", "1"], ["train", "--phase", "2"], ["forecast"]):
        run(*command)
    run("evaluate", "--method", "control")
    control = last_lead_crps("control")
    assert list(control.index) == ["tracer_0", "tracer_1"]

    run("ensemble", "--method", "learned", "--members", "20")
    run("evaluate", "--method", "learned")
    learned = last_lead_crps("learned")
    assert (learned < control).all()
    learned_chi2 = rank_chi2("learned")

    run("ensemble", "--method", "fixed", "--sigma", "0.02", "--members", "20")
    run("evaluate", "--method", "fixed")
    fixed_chi2 = rank_chi2("fixed")
    assert set(learned_chi2) == set(fixed_chi2) == {"tracer_0", "tracer_1"}
    assert all(learned_chi2[f] < fixed_chi2[f] for f in learned_chi2)

    # 雑音ゼロの固定摂動はコントロール予報と同じ
    run("ensemble", "--method", "fixed", "--sigma", "0", "--members", "20")
    run("evaluate", "--method", "fixed")
    np.testing.assert_allclose(last_lead_crps("fixed").to_numpy(), control.to_numpy(), rtol=1e-5)
