#!/usr/bin/env python3
"""
層別埋め込み（LayerStack）の抽出・保存・読み込み

【編集ガイド】
バックエンドは3種類:
  - file:             extract 済みの .lstk を features.tsv 経由で読む
  - synthetic:        シードと話者プロファイルから決定的に生成（テスト・動作確認用）
  - external-encoder: transformers の事前学習エンコーダ（WavLM-Large）で抽出
フレーム平均はこのモジュールで行い、ASTP には層 x 次元の行列だけを渡します。
.lstk の形式:
  "LSTK" | u32 version=1 | u32 L | u32 D | u32 id長 + UTF-8 id | L*D 個の float32（行優先、リトルエンディアン）
"""

import csv
import re
import struct
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np

from config import Config, derive_seed, provenance_comment
from errors import (BackendUnavailableError, ConfigurationError, ContractViolation,
                    FormatError, InputError)
from models import LayerStack, ProviderConfig, Waveform

try:
    import torch
    from transformers import AutoFeatureExtractor, AutoModel
    TRANSFORMERS_AVAILABLE = True
except ImportError:
    TRANSFORMERS_AVAILABLE = False


LSTK_MAGIC = b"LSTK"
LSTK_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")


# ============================================================
# .lstk ファイル
# ============================================================

def _check_stack(values: np.ndarray, utterance_id: str) -> None:
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ContractViolation(f"LayerStack は L x D の2次元が必要です: {values.shape} ({utterance_id})")
    if not np.all(np.isfinite(values)):
        raise InputError(f"LayerStack に非有限値が含まれています: {utterance_id}")


def encode_layer_stack(s: LayerStack) -> bytes:
    values = np.asarray(s.values)
    _check_stack(values, s.utterance_id)
    uid = s.utterance_id.encode("utf-8")
    L, D = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return _HEADER.pack(LSTK_MAGIC, LSTK_VERSION, L, D) + _U32.pack(len(uid)) + uid + payload


def decode_layer_stack(data: bytes, source: str = "<bytes>") -> LayerStack:
    if len(data) < _HEADER.size + _U32.size:
        raise FormatError(f"ヘッダが不完全です: {source}")
    magic, version, L, D = _HEADER.unpack_from(data, 0)
    if magic != LSTK_MAGIC:
        raise FormatError(f"マジックバイトが不正です（{magic!r}）: {source}")
    if version != LSTK_VERSION:
        raise FormatError(f"未対応のバージョンです（{version}）: {source}")
    if L < 1 or D < 1:
        raise FormatError(f"形状が不正です（L={L}, D={D}）: {source}")
    offset = _HEADER.size
    (uid_len,) = _U32.unpack_from(data, offset)
    offset += _U32.size
    if len(data) < offset + uid_len:
        raise FormatError(f"utterance_id が途中で切れています: {source}")
    try:
        uid = data[offset:offset + uid_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"utterance_id が UTF-8 ではありません: {source}") from e
    offset += uid_len

    expected = L * D * 4
    payload = data[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"ペイロード長が宣言と一致しません（宣言 {L}x{D} = {expected} bytes, 実際 {len(payload)} bytes）: {source}")
    values = np.frombuffer(payload, dtype="<f4").reshape(L, D).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"非有限値が含まれています: {source}")
    return LayerStack(values=values, utterance_id=uid)


def write_layer_stack(s: LayerStack, path: str) -> None:
    """LayerStack を .lstk 形式で書き出す"""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_layer_stack(s))


def read_layer_stack(path: str) -> LayerStack:
    """.lstk を読み込む。切り詰め・形状不一致は FormatError"""
    p = Path(path)
    if not p.exists():
        raise InputError(f"特徴量ファイルが見つかりません: {path}")
    return decode_layer_stack(p.read_bytes(), source=str(path))


# ============================================================
# 特徴量マニフェスト（utterance_id → .lstk パス）
# ============================================================

def safe_filename(utterance_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", utterance_id) + ".lstk"


def write_feature_manifest(entries: Mapping[str, str], path: str,
                           provenance: Optional[Mapping[str, str]] = None) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="") as f:
        if provenance:
            f.write(provenance_comment(provenance) + "\n")
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["utterance_id", "path"])
        for uid, fpath in entries.items():
            writer.writerow([uid, fpath])


def read_feature_manifest(path: str) -> Dict[str, Path]:
    """features.tsv を読む。相対パスはマニフェストのあるディレクトリ基準"""
    p = Path(path)
    if not p.exists():
        raise InputError(f"特徴量マニフェストが見つかりません: {path}")
    base = p.parent
    entries: Dict[str, Path] = {}
    with p.open(encoding="utf-8", newline="") as f:
        rows = csv.reader((line for line in f if not line.startswith("#")), delimiter="\t")
        header = next(rows, None)
        if header != ["utterance_id", "path"]:
            raise FormatError(f"特徴量マニフェストのヘッダが不正です: {header}")
        for row in rows:
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"特徴量マニフェストの列数が不正です: {row}")
            uid, rel = row
            if uid in entries:
                raise InputError(f"utterance_id が重複しています: {uid}")
            entries[uid] = base / rel
    return entries


class FeatureStore:
    """extract 済みディレクトリから LayerStack を引く（読み込み結果はキャッシュ）"""

    def __init__(self, feature_dir: str,
                 expected_layers: Optional[int] = None,
                 expected_dim: Optional[int] = None):
        self.feature_dir = Path(feature_dir)
        self.paths = read_feature_manifest(str(self.feature_dir / Config.FEATURE_MANIFEST))
        self.expected_layers = expected_layers
        self.expected_dim = expected_dim
        self._cache: Dict[str, LayerStack] = {}

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self.paths

    def get(self, utterance_id: str) -> LayerStack:
        if utterance_id not in self._cache:
            if utterance_id not in self.paths:
                raise InputError(f"特徴量がありません: {utterance_id}")
            stack = read_layer_stack(str(self.paths[utterance_id]))
            _check_shape(stack, self.expected_layers, self.expected_dim)
            self._cache[utterance_id] = stack
        return self._cache[utterance_id]


def _check_shape(stack: LayerStack, layers: Optional[int], dim: Optional[int]) -> None:
    if (layers is not None and stack.num_layers != layers) or (dim is not None and stack.dim != dim):
        raise ContractViolation(
            f"LayerStack の形状が期待と異なります: {stack.values.shape} != ({layers}, {dim}) "
            f"({stack.utterance_id})")


# ============================================================
# 合成バックエンド
# ============================================================

def synth_projection(seed: int, dim: int, num_attributes: int = Config.NUM_ATTRIBUTES) -> np.ndarray:
    """属性信号を埋め込み空間へ写す固定射影（dim x N）

    dim >= N なら列が正規直交、そうでなければ標準正規 / sqrt(dim)。
    """
    rng = np.random.default_rng(derive_seed(seed, "synth-projection", dim, num_attributes))
    gaussian = rng.standard_normal((dim, num_attributes))
    if dim >= num_attributes:
        q, _ = np.linalg.qr(gaussian)
        return q
    return gaussian / np.sqrt(dim)


def synth_layer_stack(utterance_id: str, seed: int, attribute_signal: np.ndarray,
                      num_layers: int = Config.ENCODER_LAYERS,
                      dim: int = Config.ENCODER_DIM,
                      noise_std: float = Config.SYNTH_NOISE_STD) -> LayerStack:
    """決定的な合成 LayerStack

    各層 = 層オフセット（seed のみで決まる）+ 発話ノイズ（seed, utterance_id）+ P @ signal。
    P @ signal は全層に同じだけ加わるため、層平均ベクトルにもそのまま現れる。
    """
    if seed < 0:
        raise ConfigurationError(f"seed は非負整数が必要です: {seed}")
    signal = np.asarray(attribute_signal, dtype=np.float64)
    if signal.shape != (Config.NUM_ATTRIBUTES,):
        raise ContractViolation(f"属性信号は {Config.NUM_ATTRIBUTES} 次元が必要です: {signal.shape}")

    layer_rng = np.random.default_rng(derive_seed(seed, "synth-layers", num_layers, dim))
    offsets = layer_rng.standard_normal((num_layers, dim)) * Config.SYNTH_LAYER_SCALE
    utt_rng = np.random.default_rng(derive_seed(seed, "synth-utterance", utterance_id))
    noise = utt_rng.standard_normal((num_layers, dim)) * noise_std
    encoded = synth_projection(seed, dim) @ signal

    values = (offsets + noise + encoded[None, :]).astype(np.float32)
    return LayerStack(values=values, utterance_id=utterance_id)


def read_profiles(path: str) -> Dict[str, np.ndarray]:
    """話者プロファイルTSV（speaker_id + 34列の信号）を読む"""
    p = Path(path)
    if not p.exists():
        raise InputError(f"プロファイルファイルが見つかりません: {path}")
    profiles: Dict[str, np.ndarray] = {}
    with p.open(encoding="utf-8", newline="") as f:
        rows = csv.reader((line for line in f if not line.startswith("#")), delimiter="\t")
        header = next(rows, None)
        if not header or header[0] != "speaker_id" or len(header) != Config.NUM_ATTRIBUTES + 1:
            raise FormatError(f"プロファイルのヘッダが不正です: {path}")
        for row in rows:
            if not row:
                continue
            if len(row) != Config.NUM_ATTRIBUTES + 1:
                raise FormatError(f"プロファイルの列数が不正です（{row[0]}）: {path}")
            try:
                profiles[row[0]] = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError as e:
                raise FormatError(f"プロファイルに数値以外が含まれています（{row[0]}）: {path}") from e
    return profiles


def write_profiles(profiles: Mapping[str, np.ndarray], path: str, attribute_names: List[str]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["speaker_id"] + list(attribute_names))
        for speaker, signal in profiles.items():
            writer.writerow([speaker] + [repr(float(v)) for v in signal])


# ============================================================
# バックエンド
# ============================================================

class FileBackend:
    """extract 済みの .lstk を返す（純粋・並行呼び出し可）"""
    name = "file"

    def __init__(self, cfg: ProviderConfig):
        if not cfg.feature_dir:
            raise ConfigurationError("file バックエンドには feature_dir が必要です")
        self.store = FeatureStore(cfg.feature_dir)

    def extract(self, w: Waveform) -> LayerStack:
        return self.store.get(w.utterance_id)


class SyntheticBackend:
    """話者プロファイルから合成する（純粋・並行呼び出し可）

    プロファイルのない発話はゼロ信号になる。
    """
    name = "synthetic"

    def __init__(self, cfg: ProviderConfig, speaker_of: Optional[Mapping[str, str]] = None):
        self.cfg = cfg
        self.profiles = read_profiles(cfg.profile_path) if cfg.profile_path else {}
        self.speaker_of = dict(speaker_of or {})

    def signal_for(self, utterance_id: str) -> np.ndarray:
        speaker = self.speaker_of.get(utterance_id, "")
        return self.profiles.get(speaker, np.zeros(Config.NUM_ATTRIBUTES))

    def extract(self, w: Waveform) -> LayerStack:
        return synth_layer_stack(w.utterance_id, self.cfg.seed, self.signal_for(w.utterance_id),
                                 num_layers=self.cfg.expected_layers, dim=self.cfg.expected_dim)


class ExternalEncoderBackend:
    """transformers の事前学習エンコーダで層別埋め込みを抽出する

    非再入: モデルをインスタンスごとに保持するため、並列抽出ではワーカーごとに生成すること。
    評価モード・勾配なしで実行し、同一入力には同一出力を返す。
    """
    name = "external-encoder"

    def __init__(self, cfg: ProviderConfig):
        if not TRANSFORMERS_AVAILABLE:
            raise BackendUnavailableError(
                "external-encoder には torch と transformers が必要です（pip install transformers）")
        self.cfg = cfg
        try:
            self.feature_extractor = AutoFeatureExtractor.from_pretrained(cfg.encoder_id)
            self.model = AutoModel.from_pretrained(cfg.encoder_id).to(cfg.device)
        except (OSError, ValueError) as e:
            raise BackendUnavailableError(f"エンコーダを読み込めません: {cfg.encoder_id}（{e}）") from e
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def extract(self, w: Waveform) -> LayerStack:
        if w.sample_rate != Config.SAMPLE_RATE:
            raise InputError(
                f"サンプリング周波数は {Config.SAMPLE_RATE} Hz が必要です（{w.sample_rate} Hz）: {w.utterance_id}")
        inputs = self.feature_extractor(np.asarray(w.samples, dtype=np.float32),
                                        sampling_rate=w.sample_rate, return_tensors="pt")
        with torch.no_grad():
            outputs = self.model(inputs["input_values"].to(self.cfg.device), output_hidden_states=True)
        # hidden_states[0] は畳み込み前段の出力、以降が各 Transformer ブロック
        layers = [h[0].mean(dim=0) for h in outputs.hidden_states]
        values = torch.stack(layers).cpu().numpy().astype(np.float32)
        return LayerStack(values=values, utterance_id=w.utterance_id)


BACKENDS = ["synthetic", "file", "external-encoder"]


def make_backend(cfg: ProviderConfig, speaker_of: Optional[Mapping[str, str]] = None):
    """設定に応じたバックエンドを生成する"""
    if cfg.expected_layers < 1 or cfg.expected_dim < 1:
        raise ConfigurationError(
            f"expected_layers / expected_dim は1以上が必要です（{cfg.expected_layers}, {cfg.expected_dim}）")
    if cfg.backend == "synthetic":
        return SyntheticBackend(cfg, speaker_of)
    if cfg.backend == "file":
        return FileBackend(cfg)
    if cfg.backend == "external-encoder":
        return ExternalEncoderBackend(cfg)
    raise ConfigurationError(f"未知のバックエンドです: {cfg.backend}（{' / '.join(BACKENDS)}）")


def extract_layer_stack(w: Waveform, cfg: ProviderConfig, backend=None) -> LayerStack:
    """発話1件の LayerStack を抽出する。形状が期待と異なれば ContractViolation"""
    if backend is None:
        backend = make_backend(cfg)
    stack = backend.extract(w)
    _check_shape(stack, cfg.expected_layers, cfg.expected_dim)
    _check_stack(stack.values, stack.utterance_id)
    return stack
