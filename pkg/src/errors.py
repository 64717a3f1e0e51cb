"""Error types raised across the forecast toolkit."""


class ForecastToolkitError(Exception):
    """ツール全体の基底例外"""


class ConfigurationError(ForecastToolkitError, ValueError):
    """設定値が不正"""


class CatalogMismatchError(ForecastToolkitError):
    """アーカイブに変数・レベルが存在しない"""


class GeometryError(ForecastToolkitError, ValueError):
    """格子形状の不一致"""


class IngestionError(ForecastToolkitError):
    """アーカイブ読み込み時のデータ異常"""


class DegenerateStatisticsError(ForecastToolkitError):
    """分散ゼロのチャネル"""


class InvalidDistributionError(ForecastToolkitError, ValueError):
    """Cholesky因子の対角が正でない"""


class PreconditionError(ForecastToolkitError):
    """前提条件 (チェックポイント等) が満たされていない"""


class NumericalDivergenceError(ForecastToolkitError):
    """ロールアウト中に非有限値が発生"""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite values at rollout step {step}")


class TrainingDivergedError(ForecastToolkitError):
    """学習損失がNaNになった"""

    def __init__(self, step: int, checkpoint: str | None = None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(
            f"loss became non-finite at step {step}; last good checkpoint: {checkpoint or 'none'}"
        )
