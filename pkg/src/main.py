#!/usr/bin/env python3
"""
SwinVRNN Forecast Toolkit

Command-line tool for training and verifying stochastic data-driven weather
forecasts built on a Swin-Transformer recurrent backbone.

Commands:
- prepare-data: build the consolidated data cache (archive or toy generator)
- train: phase 1 (deterministic backbone) or phase 2 (perturbation module)
- forecast: deterministic control forecast
- ensemble: control, fixed, mc-dropout, learned or multi-model ensembles
- evaluate: score tables, plot data and member-count sweeps
- plot: static figures from evaluation output

Every command writes manifest.json next to its outputs; pass it back with
--config to replay the run.
"""

import argparse
import json
import os
import sys
import traceback

# モジュールは名前だけでimportする (src直下をパスに追加)
_SRC_DIR = os.path.dirname(os.path.abspath(__file__))
if _SRC_DIR not in sys.path:
    sys.path.insert(0, _SRC_DIR)

from config_manager import PRESET_OVERRIDES, ConfigManager  # noqa: E402
from constants import APP_NAME, APP_VERSION, ENSEMBLE_METHODS  # noqa: E402
from errors import ForecastToolkitError  # noqa: E402
from forecast_app import ForecastApp  # noqa: E402
from plot_helpers import PLOT_KINDS  # noqa: E402
from utils import log_message, set_log_file  # noqa: E402


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML/JSON config file or a manifest.json to replay")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (JSON literal); repeatable")
    common.add_argument("--preset", choices=sorted(PRESET_OVERRIDES), help="base preset (default: toy)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--log-file", help="also append log lines to this file")

    parser = argparse.ArgumentParser(prog="swinvrnn", description=APP_NAME)
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare-data", parents=[common], help="build the data cache")

    train = sub.add_parser("train", parents=[common], help="train phase 1 or phase 2")
    train.add_argument("--phase", type=int, choices=(1, 2))
    train.add_argument("--resume", action="store_true", help="continue from the checkpoint in the phase directory")

    forecast = sub.add_parser("forecast", parents=[common], help="deterministic control forecast")
    forecast.add_argument("--checkpoint", help="checkpoint directory (default: <out>/phase1)")

    ensemble = sub.add_parser("ensemble", parents=[common], help="ensemble forecast")
    ensemble.add_argument("--method", choices=ENSEMBLE_METHODS)
    ensemble.add_argument("--members", type=int)
    ensemble.add_argument("--sigma", type=float)
    ensemble.add_argument("--checkpoint", action="append", default=[], help="checkpoint directory; repeatable")

    evaluate = sub.add_parser("evaluate", parents=[common], help="score a forecast")
    evaluate.add_argument("--method", choices=ENSEMBLE_METHODS, help="which forecast to score")
    evaluate.add_argument("--forecast-dir")
    evaluate.add_argument("--sweep", action="store_true", help="member-count subsampling sweep")

    plot = sub.add_parser("plot", parents=[common], help="render figures")
    plot.add_argument("--method", choices=ENSEMBLE_METHODS, help="which evaluation to plot")
    plot.add_argument("--eval-dir")
    plot.add_argument("--kind", action="append", choices=PLOT_KINDS, help="plot kind; repeatable (default: all)")
    return parser


def command_overrides(args) -> list:
    """専用フラグを --set 形式の上書きに変換"""
    overrides = []
    if getattr(args, "phase", None) is not None:
        overrides.append(f"training.phase={args.phase}")
    if getattr(args, "method", None):
        overrides.append(f"ensemble.method={json.dumps(args.method)}")
    if getattr(args, "members", None) is not None:
        overrides.append(f"ensemble.n_members={args.members}")
    if getattr(args, "sigma", None) is not None:
        overrides.append(f"ensemble.sigma={args.sigma!r}")
    if args.command == "ensemble" and args.checkpoint:
        overrides.append(f"ensemble.checkpoints={json.dumps(args.checkpoint)}")
    return overrides


def run_command(app: ForecastApp, args):
    if args.command == "prepare-data":
        return app.cmd_prepare_data()
    if args.command == "train":
        return app.cmd_train(resume=args.resume)
    if args.command == "forecast":
        return app.cmd_forecast(args.checkpoint)
    if args.command == "ensemble":
        return app.cmd_ensemble()
    if args.command == "evaluate":
        return app.cmd_evaluate(args.forecast_dir, sweep=args.sweep)
    return app.cmd_plot(args.eval_dir, args.kind)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ConfigManager().build(
            preset=args.preset,
            config_path=args.config,
            overrides=list(args.set) + command_overrides(args),
            seed=args.seed,
            out=args.out,
        )
        set_log_file(args.log_file or config.section("run")["log_file"] or None)
        log_message(f"{APP_NAME} {APP_VERSION}: {args.command}")
        run_command(ForecastApp(config), args)
    except ForecastToolkitError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1
    finally:
        set_log_file(None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
