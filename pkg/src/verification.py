"""
Forecast verification scores.

All scores take arrays in physical units with latitude on the second-to-last
axis and longitude last. Latitude weights come from grids.latitude_weights.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from constants import SCORE_HEADER, STEP_HOURS, STUDY_LOCATIONS
from grids import GridSpec, calendar_weeks


def _check_pair(forecast, truth, weights):
    forecast = np.asarray(forecast, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if forecast.shape != truth.shape:
        raise ValueError(f"forecast {forecast.shape} and truth {truth.shape} differ in shape")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (forecast.shape[-2],):
        raise ValueError(f"{weights.shape[0]} latitude weights for {forecast.shape[-2]} rows")
    return forecast, truth, weights[:, None]


def lat_weighted_rmse(forecast, truth, weights) -> float:
    """初期時刻ごとの緯度重み付きRMSEを平均 (forecast, truth: [N, H, W])"""
    forecast, truth, w = _check_pair(forecast, truth, weights)
    per_init = np.sqrt(np.mean(w * (forecast - truth) ** 2, axis=(-2, -1)))
    return float(np.mean(per_init))


def lat_weighted_mae(forecast, truth, weights) -> float:
    forecast, truth, w = _check_pair(forecast, truth, weights)
    return float(np.mean(np.mean(w * np.abs(forecast - truth), axis=(-2, -1))))


def acc(forecast, truth, climatology, weights) -> float:
    """緯度重み付き・気候値中心の空間プール相関 (分散ゼロならNaN)"""
    forecast, truth, w = _check_pair(forecast, truth, weights)
    climatology = np.broadcast_to(np.asarray(climatology, dtype=np.float64), forecast.shape)
    w = np.broadcast_to(w, forecast.shape)
    fa = forecast - climatology
    ta = truth - climatology
    fa = fa - np.sum(w * fa) / np.sum(w)
    ta = ta - np.sum(w * ta) / np.sum(w)
    denom = np.sqrt(np.sum(w * fa ** 2) * np.sum(w * ta ** 2))
    if denom == 0.0:
        return float("nan")
    return float(np.sum(w * fa * ta) / denom)


def crps_ensemble_cells(members, truth, fair: bool = False) -> np.ndarray:
    """格子点ごとの経験的CRPS (members: [M, ...], truth: [...])

    CRPS = mean_i |X_i - y| - 1/(2M^2) sum_ij |X_i - X_j|
    fair=True では第2項の分母を 2M(M-1) にする。
    """
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if members.shape[1:] != truth.shape:
        raise ValueError(f"members {members.shape} do not match truth {truth.shape}")
    M = members.shape[0]
    if M < 1:
        raise ValueError("CRPS needs at least one member")
    skill = np.mean(np.abs(members - truth), axis=0)
    if M == 1:
        return skill

    ordered = np.sort(members, axis=0)
    coeff = (2.0 * np.arange(M) - M + 1).reshape((M,) + (1,) * truth.ndim)
    pair_sum = 2.0 * np.sum(coeff * ordered, axis=0)  # sum_ij |X_i - X_j|
    if fair:
        return skill - pair_sum / (2.0 * M * (M - 1))
    return np.maximum(skill - pair_sum / (2.0 * M * M), 0.0)


def crps_ensemble(members, truth, weights, fair: bool = False) -> float:
    """格子点CRPSを緯度重み付きで平均 (members: [M, N, H, W], truth: [N, H, W])"""
    cells = crps_ensemble_cells(members, truth, fair)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (cells.shape[-2],):
        raise ValueError(f"{w.shape[0]} latitude weights for {cells.shape[-2]} rows")
    return float(np.mean(w[:, None] * cells))


def rank_histogram(members, truth, seed: int = 0) -> np.ndarray:
    """真値のメンバー内順位の度数 (同順位は一様乱数で割り振る)

    members: [M, N], truth: [N] -> counts [M + 1]
    """
    members = np.asarray(members).reshape(np.shape(members)[0], -1)
    truth = np.asarray(truth).reshape(-1)
    if members.shape[1] != truth.shape[0]:
        raise ValueError(f"members cover {members.shape[1]} cases, truth has {truth.shape[0]}")
    M = members.shape[0]
    below = np.sum(members < truth, axis=0)
    ties = np.sum(members == truth, axis=0)
    rng = np.random.default_rng(seed)
    ranks = below + rng.integers(0, ties + 1)
    return np.bincount(ranks, minlength=M + 1)


def rank_histogram_chi2(counts) -> float:
    """一様分布に対するカイ二乗統計量 (小さいほど平坦)"""
    counts = np.asarray(counts, dtype=np.float64)
    expected = counts.sum() / counts.size
    if expected == 0:
        return float("nan")
    return float(np.sum((counts - expected) ** 2 / expected))


def ensemble_spread(members, weights) -> float:
    """メンバー分散の緯度重み付き平均の平方根 (members: [M, N, H, W])"""
    members = np.asarray(members, dtype=np.float64)
    var = np.var(members, axis=0)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    return float(np.mean(np.sqrt(np.mean(w * var, axis=(-2, -1)))))


def spread_skill_ratio(spread, rmse):
    spread = np.asarray(spread, dtype=np.float64)
    rmse = np.asarray(rmse, dtype=np.float64)
    return np.divide(spread, rmse, out=np.full_like(spread, np.nan), where=rmse > 0)


def spread_diagnostics(members, truth, weights, lead_hours, locations: Optional[dict] = None) -> dict:
    """メンバーごとのRMSE曲線、平均のRMSE曲線、地点ごとのファンデータ

    members: [M, N, T, H, W], truth: [N, T, H, W]
    locations: {name: (row, col)}。ファンは最初の初期時刻について作る。
    """
    members = np.asarray(members, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    M, _, T = members.shape[:3]
    mean = members.mean(axis=0)
    member_rmse = np.array(
        [[lat_weighted_rmse(members[m, :, t], truth[:, t], weights) for t in range(T)] for m in range(M)]
    )
    mean_rmse = np.array([lat_weighted_rmse(mean[:, t], truth[:, t], weights) for t in range(T)])
    spread = np.array([ensemble_spread(members[:, :, t], weights) for t in range(T)])

    fans = {}
    for name, (row, col) in (locations or {}).items():
        fans[name] = {
            "cell": [int(row), int(col)],
            "members": members[:, 0, :, row, col].tolist(),
            "truth": truth[0, :, row, col].tolist(),
        }
    return {
        "lead_hours": list(lead_hours),
        "member_rmse": member_rmse.tolist(),
        "mean_rmse": mean_rmse.tolist(),
        "member_average_rmse": member_rmse.mean(axis=0).tolist(),
        "spread": spread.tolist(),
        "spread_skill": spread_skill_ratio(spread, mean_rmse).tolist(),
        "fans": fans,
    }


def climatology_forecast(climatology, init_times, n_steps: int, step_hours: int = STEP_HOURS) -> np.ndarray:
    """有効時刻の週の気候値を並べた基準予測 [N, C, T, H, W]

    climatology: [52, C, H, W]
    """
    climatology = np.asarray(climatology)
    out = []
    for init in pd.DatetimeIndex(init_times):
        valid = init + pd.to_timedelta(step_hours * np.arange(1, n_steps + 1), unit="h")
        weeks = calendar_weeks(valid)
        out.append(np.moveaxis(climatology[weeks], 0, 1))
    return np.stack(out)


def member_count_sweep(
    members,
    truth,
    weights,
    counts: Sequence[int] = (1, 2, 5, 10, 20, 50, 100),
    n_draws: int = 10,
    seed: int = 0,
) -> tuple[list[dict], int]:
    """メンバー数を変えたときのアンサンブル平均RMSE

    members: [M, N, H, W]。各メンバー数についてn_draws回の無作為抽出で平均し、
    (記録, 単調減少でない箇所の数) を返す。
    """
    members = np.asarray(members, dtype=np.float64)
    M = members.shape[0]
    if M < 1:
        raise ValueError("member sweep needs at least one member")
    sizes = sorted({c for c in counts if 1 <= c <= M} | {M})
    rng = np.random.default_rng(seed)
    records = []
    for n in sizes:
        draws = 1 if n == M else n_draws
        scores = [
            lat_weighted_rmse(members[rng.choice(M, size=n, replace=False)].mean(axis=0), truth, weights)
            for _ in range(draws)
        ]
        records.append({"n_members": n, "rmse": float(np.mean(scores))})
    violations = sum(1 for a, b in zip(records, records[1:]) if b["rmse"] > a["rmse"])
    return records, violations


def location_cells(grid: GridSpec, locations: Optional[dict] = None) -> dict:
    """地点名 -> 最寄り格子点 (row, col)"""
    locations = STUDY_LOCATIONS if locations is None else locations
    return {name: grid.nearest_index(lat, lon) for name, (lat, lon) in locations.items()}


class ScoreTable:
    """(field, lead_hours, method, n_members) ごとのスコア表"""

    def __init__(self, metadata: Optional[dict] = None):
        self.rows = []
        self.metadata = dict(metadata or {})

    def add(
        self, field, lead_hours, method, n_members, rmse,
        mae=float("nan"), acc=float("nan"), crps=float("nan"), spread=float("nan"),
    ):
        self.rows.append(
            {
                "field": field,
                "lead_hours": int(lead_hours),
                "method": method,
                "n_members": int(n_members),
                "rmse": float(rmse),
                "mae": float(mae),
                "acc": float(acc),
                "crps": float(crps),
                "spread": float(spread),
            }
        )

    def add_field_scores(self, field, method, members, truth, weights, lead_hours, climatology=None, fair=False):
        """リード時間ごとに平均のRMSE・MAE・ACC、CRPS、スプレッドを追加

        members: [M, N, T, H, W], truth: [N, T, H, W], climatology: [N, T, H, W]
        """
        members = np.asarray(members, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.float64)
        mean = members.mean(axis=0)
        for t, lead in enumerate(lead_hours):
            score_acc = float("nan")
            if climatology is not None:
                score_acc = acc(mean[:, t], truth[:, t], np.asarray(climatology)[:, t], weights)
            self.add(
                field, lead, method, members.shape[0],
                rmse=lat_weighted_rmse(mean[:, t], truth[:, t], weights),
                mae=lat_weighted_mae(mean[:, t], truth[:, t], weights),
                acc=score_acc,
                crps=crps_ensemble(members[:, :, t], truth[:, t], weights, fair),
                spread=ensemble_spread(members[:, :, t], weights),
            )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=list(SCORE_HEADER))
        return frame.sort_values(["field", "method", "n_members", "lead_hours"], kind="stable").reset_index(drop=True)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        frame = pd.read_csv(path)
        if list(frame.columns) != list(SCORE_HEADER):
            raise ValueError(f"{path} does not have the score table header")
        table = cls()
        table.rows = frame.to_dict("records")
        return table
