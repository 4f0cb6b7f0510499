#!/usr/bin/env python3
"""データクラス定義"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from config import Config, canonical_variant


# ============================================================
# 音声・特徴量
# ============================================================

@dataclass
class Waveform:
    """モノラル波形（float64、[-1, 1]）"""
    samples: np.ndarray
    sample_rate: int = Config.SAMPLE_RATE
    utterance_id: str = ""


@dataclass
class IntensityTrack:
    """フレームごとのRMS強度（ピークフレーム基準のdB）"""
    frame_db: np.ndarray
    frame_times: np.ndarray  # 各フレームの hop 区間の開始時刻（秒）。窓はその lead サンプル前から始まる
    window_ms: float
    hop_ms: float
    window_samples: int = 0
    hop_samples: int = 0


@dataclass
class LayerStack:
    """発話単位の層別埋め込み（L x D, float32）"""
    values: np.ndarray
    utterance_id: str = ""

    @property
    def num_layers(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


@dataclass
class ProviderConfig:
    """特徴量プロバイダの設定"""
    backend: str = "synthetic"  # synthetic / file / external-encoder
    expected_layers: int = Config.ENCODER_LAYERS
    expected_dim: int = Config.ENCODER_DIM
    feature_dir: str = ""  # file バックエンドの読み込み元
    profile_path: str = ""  # synthetic バックエンドの話者プロファイル
    encoder_id: str = Config.ENCODER_MODEL_ID
    seed: int = Config.SEED
    device: str = "cpu"


# ============================================================
# データセット
# ============================================================

@dataclass
class UtteranceRecord:
    """マニフェスト1行分"""
    utterance_id: str
    speaker_id: str
    gender: str  # male / female
    path: str = ""


@dataclass
class SpeakerPairAnnotation:
    """話者ペアに対する1記述子分の比較ラベル"""
    speaker_a: str
    speaker_b: str
    descriptor: str
    direction: str  # b_stronger / a_stronger


@dataclass
class PairExample:
    """発話ペア1件分の学習・評価サンプル"""
    utt_a: str
    utt_b: str
    labels: np.ndarray  # int8 (34,)
    mask: np.ndarray  # int8 (34,)
    gender: str
    speaker_a: str = ""
    speaker_b: str = ""


@dataclass
class SplitViolation:
    """分割衛生チェックの違反1件"""
    kind: str  # speaker_pair / utterance / speaker
    key: List[str]
    detail: str = ""


@dataclass
class SplitReport:
    """分割衛生チェック結果"""
    protocol: str
    n_train: int
    n_eval: int
    violations: List[SplitViolation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


# ============================================================
# 学習
# ============================================================

@dataclass
class TrainConfig:
    """学習設定（設定ファイル・CLIフラグのキーと1対1）"""
    epochs: int = Config.EPOCHS
    batch_size: int = Config.BATCH_SIZE
    learning_rate: float = Config.LEARNING_RATE
    weight_decay: float = Config.WEIGHT_DECAY
    eta_min: float = Config.ETA_MIN
    seed: int = Config.SEED
    variant: str = "ffn"  # ffn / se_res_ffn（別名 se-resffn）
    astp_heads: int = Config.ASTP_HEADS
    astp_attention_dim: int = 0  # 0 のとき D/H
    astp_dropout: float = Config.ASTP_DROPOUT
    astp_trainable: bool = True
    ffn_dropout: float = Config.FFN_DROPOUT
    se_reduction: int = Config.SE_REDUCTION

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)


@dataclass
class EpochRecord:
    """学習ログ1エポック分"""
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None


@dataclass
class Checkpoint:
    """学習状態一式"""
    config: TrainConfig
    registry: List[str]
    num_layers: int
    dim: int
    astp_state: Dict[str, Any]
    diffnet_state: Dict[str, Any]
    optimizer_state: Dict[str, Any]
    scheduler_state: Dict[str, Any]
    step: int
    epoch: int
    fingerprint: str
    provenance: Dict[str, str] = field(default_factory=dict)


# ============================================================
# 評価
# ============================================================

@dataclass
class ScoredTrial:
    """マスク有効な (ペア, 属性) 1件分のスコア"""
    score: float
    label: int
    attribute_index: int
    utt_a: str = ""
    utt_b: str = ""


@dataclass
class AttributeResult:
    """属性ごとの評価結果"""
    attribute_index: int
    descriptor: str
    gender: str
    n_trials: int
    acc: Optional[float] = None  # %
    eer: Optional[float] = None  # %
    evaluable: bool = True
    note: str = ""


@dataclass
class EvalReport:
    """評価レポート"""
    attributes: List[AttributeResult]
    gender_acc: Dict[str, Optional[float]]
    gender_eer: Dict[str, Optional[float]]
    overall_acc: float
    overall_eer: float
    flags: List[str] = field(default_factory=list)
