"""Platform-specific helper functions for device selection and determinism"""

import os
import platform
import random

import numpy as np
import torch


class DeviceHelper:
    """プラットフォームに応じた計算デバイスを管理"""

    @staticmethod
    def get_device(preference: str = "auto") -> torch.device:
        """利用可能なデバイスを選択"""
        if preference != "auto":
            return torch.device(preference)

        if torch.cuda.is_available():
            return torch.device("cuda")
        if platform.system() == "Darwin":  # macOS
            mps = getattr(torch.backends, "mps", None)
            if mps is not None and mps.is_available():
                return torch.device("mps")
        return torch.device("cpu")

    @staticmethod
    def configure_determinism(seed: int):
        """全ての乱数源を固定し決定的アルゴリズムを有効化"""
        # cuBLASの決定性にはワークスペース設定が必要
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        random.seed(seed)
        np.random.seed(seed % (2 ** 32))
        torch.manual_seed(seed)
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False

    @staticmethod
    def describe() -> str:
        """実行環境の概要文字列"""
        device = DeviceHelper.get_device()
        return f"python {platform.python_version()} / torch {torch.__version__} / {platform.system()} / {device}"
