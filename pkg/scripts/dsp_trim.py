#!/usr/bin/env python3
"""
無音除去（先頭・末尾のみ）

【編集ガイド】
閾値・窓長・ホップ長・最小保持長の既定値は config.py の TRIM_* を編集してください。
強度は librosa のフレームRMSをピークフレーム基準のdBで表し、-120 dB で下限処理します。
フレームは hop 区間ごとに1つ置き、その区間を中心とする窓でRMSを取ります
（窓は hop 区間の前に lead サンプルはみ出す。信号の外は反射パディング）。
保持区間は閾値を超えたフレームの hop 区間の和（先頭から末尾まで）で、
切り出した区間で取り直しても変わらなくなるまで繰り返します。
区間内部の無音は除去しません。
"""

from pathlib import Path
from typing import Tuple

import librosa
import numpy as np
import soundfile as sf

from config import Config
from errors import ConfigurationError, InputError
from models import IntensityTrack, Waveform

# amplitude_to_db の下限（ゼロフレームが -120 dB の床まで落ちる大きさ）
_AMIN = 1e-10


# ============================================================
# 入力検証
# ============================================================

def _check_waveform(w: Waveform) -> np.ndarray:
    samples = np.asarray(w.samples, dtype=np.float64)
    if samples.ndim != 1:
        raise InputError(f"モノラル波形のみ対応しています（shape={samples.shape}）")
    if samples.size == 0:
        raise InputError(f"波形が空です: {w.utterance_id or '(no id)'}")
    if not np.all(np.isfinite(samples)):
        raise InputError(f"波形に非有限値が含まれています: {w.utterance_id or '(no id)'}")
    if w.sample_rate <= 0:
        raise InputError(f"サンプリング周波数が不正です: {w.sample_rate}")
    return samples


def _frame_geometry(sample_rate: int, window_ms: float, hop_ms: float) -> Tuple[int, int]:
    if hop_ms <= 0 or window_ms < hop_ms:
        raise ConfigurationError(
            f"窓長・ホップ長が不正です（window_ms={window_ms}, hop_ms={hop_ms}）")
    window = max(1, int(round(window_ms * sample_rate / 1000.0)))
    hop = max(1, int(round(hop_ms * sample_rate / 1000.0)))
    return window, min(hop, window)


# ============================================================
# 強度トラック
# ============================================================

def frame_lead(window: int, hop: int) -> int:
    """窓が hop 区間の前にはみ出すサンプル数"""
    return window // 2 - hop // 2


def _frame_rms(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    """フレーム j はホップ区間 [j*hop, (j+1)*hop) を中心に置いた窓のRMS（最後の半端な区間も含む）"""
    n = samples.size
    n_frames = -(-n // hop)
    lead = frame_lead(window, hop)
    tail = (n_frames - 1) * hop + window - lead - n
    padded = np.pad(samples, (lead, tail), mode="reflect")
    rms = librosa.feature.rms(y=padded, frame_length=window, hop_length=hop, center=False)[0]
    return rms[:n_frames]


def frame_intensity(w: Waveform,
                    window_ms: float = Config.TRIM_WINDOW_MS,
                    hop_ms: float = Config.TRIM_HOP_MS) -> IntensityTrack:
    """フレームごとのRMS強度をピークフレーム基準のdBで返す（最大値は0 dB）"""
    samples = _check_waveform(w)
    window, hop = _frame_geometry(w.sample_rate, window_ms, hop_ms)
    rms = _frame_rms(samples, window, hop)

    floor = Config.SILENCE_FLOOR_DB
    if rms.max() <= 0.0:
        frame_db = np.full(rms.size, floor)
    else:
        frame_db = librosa.amplitude_to_db(rms, ref=np.max, amin=_AMIN, top_db=None)
        frame_db = np.maximum(frame_db, floor)

    return IntensityTrack(
        frame_db=frame_db,
        frame_times=librosa.frames_to_time(np.arange(rms.size), sr=w.sample_rate, hop_length=hop),
        window_ms=window_ms,
        hop_ms=hop_ms,
        window_samples=window,
        hop_samples=hop,
    )


# ============================================================
# 無音除去
# ============================================================

def _kept_cells(w: Waveform, threshold_db: float, window_ms: float, hop_ms: float) -> Tuple[int, int]:
    track = frame_intensity(w, window_ms, hop_ms)
    above = np.flatnonzero(track.frame_db > -threshold_db)
    if above.size == 0:
        return 0, 0
    hop = track.hop_samples
    start = int(librosa.frames_to_samples(above[0], hop_length=hop))
    end = int(librosa.frames_to_samples(above[-1] + 1, hop_length=hop))
    return start, min(end, len(w.samples))


def trim_bounds(w: Waveform,
                threshold_db: float = Config.TRIM_THRESHOLD_DB,
                window_ms: float = Config.TRIM_WINDOW_MS,
                hop_ms: float = Config.TRIM_HOP_MS,
                min_keep_ms: float = Config.TRIM_MIN_KEEP_MS) -> Tuple[int, int]:
    """保持区間 [start, end) をサンプル単位で返す。除去しない場合は (0, n)

    切り出した区間で強度を取り直し、区間が変わらなくなるまで繰り返す。
    """
    if threshold_db <= 0:
        raise ConfigurationError(f"threshold_db は正の値が必要です: {threshold_db}")
    if min_keep_ms < 0:
        raise ConfigurationError(f"min_keep_ms は0以上が必要です: {min_keep_ms}")
    samples = _check_waveform(w)
    n = samples.size

    start, end = 0, n
    while True:
        segment = Waveform(samples[start:end], w.sample_rate, w.utterance_id)
        s, e = _kept_cells(segment, threshold_db, window_ms, hop_ms)
        if s >= e:
            return 0, n
        if (s, e) == (0, end - start):
            break
        start, end = start + s, start + e

    if (end - start) * 1000.0 < min_keep_ms * w.sample_rate:
        return 0, n
    return start, end


def trim_silence(w: Waveform,
                 threshold_db: float = Config.TRIM_THRESHOLD_DB,
                 min_keep_ms: float = Config.TRIM_MIN_KEEP_MS,
                 window_ms: float = Config.TRIM_WINDOW_MS,
                 hop_ms: float = Config.TRIM_HOP_MS) -> Waveform:
    """先頭・末尾の無音を除去した波形を返す（冪等）"""
    start, end = trim_bounds(w, threshold_db, window_ms, hop_ms, min_keep_ms)
    samples = np.asarray(w.samples, dtype=np.float64)
    return Waveform(samples=samples[start:end].copy(),
                    sample_rate=w.sample_rate,
                    utterance_id=w.utterance_id)


# ============================================================
# WAV入出力（16bit PCM・モノラル）
# ============================================================

def read_wav(path: str, utterance_id: str = "") -> Waveform:
    """WAVを読み込む。多チャンネルは入力エラー"""
    p = Path(path)
    if not p.exists():
        raise InputError(f"音声ファイルが見つかりません: {path}")
    try:
        data, sr = sf.read(str(p), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise InputError(f"音声ファイルを読み込めません: {path}（{e}）") from e
    if data.shape[1] != 1:
        raise InputError(f"モノラル音声のみ対応しています（{data.shape[1]}ch）: {path}")
    return Waveform(samples=data[:, 0], sample_rate=int(sr),
                    utterance_id=utterance_id or p.stem)


def write_wav(w: Waveform, path: str) -> None:
    """16bit PCM のWAVとして書き出す"""
    samples = _check_waveform(w)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(p), np.clip(samples, -1.0, 1.0), w.sample_rate, subtype="PCM_16")
