"""Static figure helpers for the forecast toolkit"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from utils import log_message, read_records  # noqa: E402

PLOT_KINDS = ("rmse", "spread", "fan", "covariance", "difference", "rank", "sweep")


def covariance_for_display(covariance) -> np.ndarray:
    """対角成分をゼロにしたコピー (非対角の構造を見やすくする)"""
    matrix = np.array(covariance, dtype=np.float64, copy=True)
    np.fill_diagonal(matrix, 0.0)
    return matrix


def difference_leads(n_leads: int, max_panels: int = 4) -> list:
    """差分図に使うリード時間のインデックス (最後を必ず含む)"""
    return sorted({int(i) for i in np.linspace(0, n_leads - 1, min(n_leads, max_panels)).round()})


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(text))


class PlotBuilder:
    """plot_data.jsonl のレコードから図を作るクラス"""

    def __init__(self, out_dir, log_callback=None, dpi: int = 120):
        self.out_dir = Path(out_dir)
        self.log_callback = log_callback or log_message
        self.dpi = dpi

    def _log_message(self, message):
        self.log_callback(message)

    def _save(self, fig, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"{name}.png"
        fig.savefig(path, dpi=self.dpi, bbox_inches="tight")
        plt.close(fig)
        return path

    def render_all(self, plot_data_path, kinds=None) -> list:
        """指定された種類 (省略時は全て) の図を書き出す"""
        kinds = tuple(kinds) if kinds else PLOT_KINDS
        unknown = [k for k in kinds if k not in PLOT_KINDS]
        if unknown:
            raise ValueError(f"unknown plot kind(s): {', '.join(unknown)}")
        records = read_records(plot_data_path)
        written = []
        for record in records:
            kind = record["kind"]
            if kind == "spread":
                if "spread" in kinds:
                    written.append(self.plot_spread(record))
                if "fan" in kinds:
                    written.extend(self.plot_fans(record))
            elif kind in kinds:
                written.append(getattr(self, f"plot_{kind}")(record))
        self._log_message(f"{len(written)} 枚の図を書き出しました: {self.out_dir}")
        return written

    def plot_rmse(self, record) -> Path:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(record["lead_hours"], record["rmse"], marker="o", label=record["method"])
        if "climatology_rmse" in record:
            ax.plot(record["lead_hours"], record["climatology_rmse"], ls="--", color="gray", label="climatology")
        ax.set_xlabel("lead time [h]")
        ax.set_ylabel("RMSE")
        ax.set_title(f"{record['field']} RMSE")
        ax.legend()
        return self._save(fig, f"rmse_{_slug(record['field'])}")

    def plot_spread(self, record) -> Path:
        """メンバーごとのRMSE (細線)、平均のRMSE、スプレッド"""
        fig, ax = plt.subplots(figsize=(6, 4))
        lead = record["lead_hours"]
        for curve in record["member_rmse"]:
            ax.plot(lead, curve, color="tab:blue", lw=0.5, alpha=0.4)
        ax.plot(lead, record["member_average_rmse"], color="tab:blue", lw=2, label="member average")
        ax.plot(lead, record["mean_rmse"], color="tab:red", lw=2, label="ensemble mean")
        ax.plot(lead, record["spread"], color="black", ls="--", label="spread")
        ax.set_xlabel("lead time [h]")
        ax.set_ylabel("RMSE")
        ax.set_title(f"{record['field']} {record['method']}")
        ax.legend()
        return self._save(fig, f"spread_{_slug(record['field'])}")

    def plot_fans(self, record) -> list:
        """地点ごとのメンバー軌道と真値 (地点ごとに1ファイル)"""
        paths = []
        lead = record["lead_hours"]
        for name, fan in record["fans"].items():
            fig, ax = plt.subplots(figsize=(6, 4))
            for trajectory in fan["members"]:
                ax.plot(lead, trajectory, color="tab:blue", lw=0.5, alpha=0.4)
            ax.plot(lead, np.mean(fan["members"], axis=0), color="tab:red", lw=2, label="ensemble mean")
            ax.plot(lead, fan["truth"], color="black", lw=2, label="truth")
            ax.set_xlabel("lead time [h]")
            ax.set_title(f"{record['field']} at {name} (cell {fan['cell'][0]}, {fan['cell'][1]})")
            ax.legend()
            paths.append(self._save(fig, f"fan_{_slug(record['field'])}_{_slug(name)}"))
        return paths

    def plot_covariance(self, record) -> Path:
        matrix = covariance_for_display(record["covariance"])
        fig, ax = plt.subplots(figsize=(5, 4))
        limit = float(np.abs(matrix).max()) or 1.0
        image = ax.imshow(matrix, cmap="RdBu_r", vmin=-limit, vmax=limit)
        fig.colorbar(image, ax=ax)
        ax.set_title("prior covariance (diagonal zeroed)")
        ax.set_xlabel("latent site")
        ax.set_ylabel("latent site")
        return self._save(fig, f"covariance_{_slug(record['method'])}")

    def plot_difference(self, record) -> Path:
        """予測 - 真値 の地図 (リード時間ごとのパネル)"""
        difference = np.asarray(record["difference"])
        leads = difference_leads(difference.shape[0])
        limit = float(np.abs(difference).max()) or 1.0
        fig, axes = plt.subplots(1, len(leads), figsize=(4 * len(leads), 3), squeeze=False)
        for ax, t in zip(axes[0], leads):
            image = ax.imshow(difference[t], cmap="RdBu_r", vmin=-limit, vmax=limit, origin="upper")
            ax.set_title(f"+{record['lead_hours'][t]} h")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(image, ax=axes[0].tolist())
        fig.suptitle(f"{record['field']} forecast - truth ({record['init_time']})")
        return self._save(fig, f"difference_{_slug(record['field'])}")

    def plot_rank(self, record) -> Path:
        counts = np.asarray(record["counts"])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(np.arange(counts.size), counts / max(counts.sum(), 1), color="tab:blue")
        ax.axhline(1.0 / counts.size, color="black", ls="--")
        ax.set_xlabel("rank of truth")
        ax.set_ylabel("frequency")
        ax.set_title(f"{record['field']} +{record['lead_hours']} h (chi2 {record['chi2']:.1f})")
        return self._save(fig, f"rank_{_slug(record['field'])}")

    def plot_sweep(self, record) -> Path:
        """メンバー数ごとの平均予測RMSE"""
        fig, ax = plt.subplots(figsize=(6, 4))
        sizes = sorted({r["n_members"] for lead in record["by_lead"] for r in lead["records"]})
        cmap = plt.get_cmap("viridis")
        for i, n in enumerate(sizes):
            xs, ys = [], []
            for lead in record["by_lead"]:
                for r in lead["records"]:
                    if r["n_members"] == n:
                        xs.append(lead["lead_hours"])
                        ys.append(r["rmse"])
            ax.plot(xs, ys, color=cmap(i / max(len(sizes) - 1, 1)), label=f"{n} members")
        ax.set_xlabel("lead time [h]")
        ax.set_ylabel("RMSE of ensemble mean")
        ax.set_title(f"{record['field']} member-count sweep")
        ax.legend(fontsize="small")
        return self._save(fig, f"sweep_{_slug(record['field'])}")
