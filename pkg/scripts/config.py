#!/usr/bin/env python3
"""
設定値クラス

【編集ガイド】
無音除去の閾値・エンコーダ次元・ネットワーク幅・学習ハイパーパラメータ等の
数値設定を変更したい場合はこのファイルを編集してください。
DESCRIPTORS の並びを変えると属性インデックスが変わり、既存のチェックポイントとは
フィンガープリントが一致しなくなります。
"""

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from errors import ConfigurationError, InputError


class Config:
    """ハードコード値を集約した設定クラス"""
    ARTIFACT_VERSION = "vtad-pipeline/1.0"

    # 無音除去
    TRIM_THRESHOLD_DB = 40.0  # ピークフレームからの相対dB
    TRIM_WINDOW_MS = 25.0
    TRIM_HOP_MS = 10.0
    TRIM_MIN_KEEP_MS = 100.0  # 除去後がこれより短い場合は入力をそのまま返す
    SILENCE_FLOOR_DB = -120.0
    SAMPLE_RATE = 16000

    # エンコーダ（CNN出力1層 + Transformer 24層）
    ENCODER_LAYERS = 25
    ENCODER_DIM = 1024
    ENCODER_MODEL_ID = "microsoft/wavlm-large"

    # 層方向ASTP
    ASTP_HEADS = 8
    ASTP_DROPOUT = 0.1
    ASTP_EPS = 1e-8  # 分散のクランプ下限

    # Diff-Net
    NUM_ATTRIBUTES = 34
    FFN_WIDTHS = [512, 256, 128, 64]
    FFN_DROPOUT = 0.3
    SE_RES_WIDTHS = [1024, 1024, 512, 256]
    SE_RES_HEAD_WIDTHS = [192, 64]
    SE_REDUCTION = 16
    BN_EPS = 1e-5
    BN_MOMENTUM = 0.1
    VARIANTS = ["ffn", "se_res_ffn"]
    VARIANT_ALIASES = {"se-resffn": "se_res_ffn", "se_resffn": "se_res_ffn"}

    # 学習
    EPOCHS = 10
    BATCH_SIZE = 16
    LEARNING_RATE = 1e-4
    WEIGHT_DECAY = 0.01
    ETA_MIN = 0.0
    SEED = 42
    ADAM_BETAS = (0.9, 0.999)
    ADAM_EPS = 1e-8
    BCE_CLAMP = 1e-7  # 予測確率を [c, 1-c] にクランプ

    # ペア構築
    PAIRS_PER_SPEAKER_PAIR = {
        "train": 40,
        "seen": 400,
        "unseen": 400,
    }

    # 評価
    DECISION_THRESHOLD = 0.5
    EVAL_BATCH_SIZE = 64
    REPORT_DECIMALS = 2

    # 合成バックエンド
    SYNTH_LAYER_SCALE = 0.5  # 層ごとのオフセットの標準偏差
    SYNTH_NOISE_STD = 0.05  # 発話ごとのノイズの標準偏差

    # 属性レジストリ（男性 0-16、女性 17-33）
    GENDERS = ["male", "female"]
    DESCRIPTORS = [
        "Bright", "Thin", "Low", "Magnetic", "Pure", "Coarse", "Slim",
        "Shrill", "Husky", "Rich", "Soft", "Hoarse", "Dark", "Transparent",
        "Sweet", "Mellow", "Powerful",
    ]

    # ファイル名
    FEATURE_MANIFEST = "features.tsv"
    PROVENANCE_PREFIX = "# vtad"


# ============================================================
# 属性レジストリ
# ============================================================

def load_registry(path: Optional[str] = None) -> List[str]:
    """記述子レジストリを読み込む（1行1記述子）。path 未指定なら既定の17記述子"""
    if not path:
        return list(Config.DESCRIPTORS)
    p = Path(path)
    if not p.exists():
        raise InputError(f"レジストリファイルが見つかりません: {path}")
    names = [line.strip() for line in p.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n and not n.startswith("#")]
    if len(names) != len(Config.DESCRIPTORS):
        raise ConfigurationError(
            f"レジストリは{len(Config.DESCRIPTORS)}記述子が必要です（{len(names)}件）: {path}")
    if len(set(names)) != len(names):
        raise ConfigurationError(f"レジストリに重複した記述子があります: {path}")
    return names


# ============================================================
# Diff-Net バリアント名
# ============================================================

def canonical_variant(name: str) -> str:
    """別名（se-resffn など）を正式名に揃える。未知の名前はそのまま返す"""
    return Config.VARIANT_ALIASES.get(name, name)


# ============================================================
# シード導出
# ============================================================

def derive_seed(seed: int, tag: str, *index: Any) -> int:
    """グローバルシードと用途タグから独立した63bitシードを導出する"""
    text = ":".join([str(seed), tag] + [str(i) for i in index])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


# ============================================================
# 設定ファイル（key=value）
# ============================================================

def read_config_file(path: str) -> Dict[str, str]:
    """key=value 形式の設定ファイルを読み込む。# 以降はコメント"""
    p = Path(path)
    if not p.exists():
        raise InputError(f"設定ファイルが見つかりません: {path}")
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: key=value 形式ではありません: {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{path}:{lineno}: キーが空です")
        if key in values:
            raise ConfigurationError(f"{path}:{lineno}: キーが重複しています: {key}")
        values[key] = value
    return values


def _coerce(key: str, text: str, default: Any) -> Any:
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: 真偽値として解釈できません: {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: 数値として解釈できません: {text!r}") from None
    return text


def resolve_dataclass(cls, file_values: Optional[Mapping[str, str]] = None,
                      overrides: Optional[Mapping[str, Any]] = None):
    """既定値 < 設定ファイル < CLI の優先順位で dataclass を組み立てる

    overrides の値が None のキーは未指定として扱う。
    """
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}

    for key, text in (file_values or {}).items():
        if key not in known:
            raise ConfigurationError(f"未知の設定キーです: {key}")
        values[key] = _coerce(key, text, getattr(defaults, key))

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigurationError(f"未知の設定キーです: {key}")
        values[key] = value

    return dataclasses.replace(defaults, **values)


def write_config_file(obj, path: str) -> None:
    """dataclass を key=value 形式で書き出す（read_config_file と対）"""
    lines = [f"{f.name}={getattr(obj, f.name)}" for f in dataclasses.fields(obj)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ============================================================
# 来歴（provenance）
# ============================================================

def config_hash(settings: Mapping[str, Any]) -> str:
    """設定辞書の正規化JSONに対する SHA-256（先頭16桁）"""
    text = json.dumps(settings, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def provenance(settings: Mapping[str, Any], command: str = "") -> Dict[str, str]:
    """出力ファイルのヘッダに埋め込む来歴レコード"""
    record = {
        "artifact_version": Config.ARTIFACT_VERSION,
        "config_hash": config_hash(settings),
    }
    if command:
        record["command"] = command
    return record


def provenance_comment(record: Mapping[str, str]) -> str:
    """TSV 先頭に置くコメント行"""
    fields = " ".join(f"{k}={v}" for k, v in record.items())
    return f"{Config.PROVENANCE_PREFIX} {fields}"
