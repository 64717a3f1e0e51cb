"""
Utility functions for the SwinVRNN forecast toolkit.
"""

import hashlib
import json
from datetime import datetime
from pathlib import Path

import numpy as np
import torch

_log_file_path = None


def set_log_file(path):
    """ログをファイルにも追記する (Noneで解除)"""
    global _log_file_path
    _log_file_path = Path(path) if path else None
    if _log_file_path:
        _log_file_path.parent.mkdir(parents=True, exist_ok=True)


def log_message(message):
    """Log a message with timestamp."""
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    log_entry = f"[{timestamp}] {message}"
    print(log_entry)
    if _log_file_path:
        with open(_log_file_path, "a", encoding="utf-8", buffering=1) as f:
            f.write(log_entry + "\n")
    return log_entry


def get_timestamp():
    """Get formatted timestamp string."""
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def load_json(path):
    """JSONファイルを読み込む (存在しなければ空dict)"""
    path = Path(path)
    if path.exists():
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    return {}


def save_json(path, data):
    """JSONファイルに保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False, default=_json_default)


def append_record(path, record):
    """1行1レコードのJSONログに追記"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, ensure_ascii=False, default=_json_default) + "\n")


def read_records(path):
    """JSONLログを読み込む"""
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "isoformat"):
        return value.isoformat()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def fingerprint(data):
    """設定ツリーのハッシュ (冪等性チェック用)"""
    text = json.dumps(data, sort_keys=True, ensure_ascii=False, default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_blob(path, array):
    """リトルエンディアンfloat32の生バイナリとして保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_blob(path, shape, mmap=False):
    """write_blobで保存した配列を読み込む"""
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", shape=tuple(shape))
    return np.fromfile(path, dtype="<f4").reshape(tuple(shape))


def noise_generator(seed, member=0, step=0, device="cpu"):
    """(seed, member, step) から決定的な乱数ストリームを作る"""
    state = np.random.SeedSequence([int(seed), int(member), int(step)]).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator(device=device)
    generator.manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)
    return generator
