#!/usr/bin/env python3
"""
合成フィクスチャの生成（make-fixture）

【編集ガイド】
話者ごとに34次元のプロファイル（自分の性別ブロックのみ非ゼロ）を作り、属性ごとに
等間隔の水準 linspace(-1, 1, 話者数) を並べ替えて割り当てます。隣接水準の差がそのまま
ラベルのマージンになります。注釈の向きは プロファイル[B] > プロファイル[A] なら b_stronger。
発話は前後に無音を挟んだ合成トーン（16kHz, 16bit PCM）。発話は学習用・評価用に分け、
話者ペアも学習用・評価用で重ならないように割り当てます。
"""

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from config import Config, derive_seed, write_config_file
from dsp_trim import write_wav
from feature_provider import write_profiles
from models import SpeakerPairAnnotation, TrainConfig, UtteranceRecord, Waveform
from pairs_dataset import attribute_index, attribute_labels, write_annotations, write_manifest


@dataclass
class SyntheticDataset:
    """メモリ上の合成データ一式"""
    profiles: Dict[str, np.ndarray]
    train_records: List[UtteranceRecord]
    eval_records: List[UtteranceRecord]
    train_annotations: List[SpeakerPairAnnotation]
    eval_annotations: List[SpeakerPairAnnotation]
    speaker_f0: Dict[str, float] = field(default_factory=dict)

    @property
    def records(self) -> List[UtteranceRecord]:
        return self.train_records + self.eval_records

    @property
    def speaker_of(self) -> Dict[str, str]:
        return {r.utterance_id: r.speaker_id for r in self.records}


@dataclass
class FixturePaths:
    root: Path
    manifest: Path
    train_manifest: Path
    eval_manifest: Path
    profiles: Path
    train_annotations: Path
    eval_annotations: Path
    train_config: Path


def _annotate(a: str, b: str, profiles: Dict[str, np.ndarray], gender: str,
              descriptors: List[str]) -> List[SpeakerPairAnnotation]:
    out = []
    for d in descriptors:
        idx = attribute_index(d, gender)
        direction = "b_stronger" if profiles[b][idx] > profiles[a][idx] else "a_stronger"
        out.append(SpeakerPairAnnotation(a, b, d, direction))
    return out


def make_synthetic_dataset(seed: int = Config.SEED,
                           speakers_per_gender: int = 4,
                           train_utterances: int = 4,
                           eval_utterances: int = 4,
                           train_pairings: int = 4,
                           descriptors_per_pair: int = 4) -> SyntheticDataset:
    """話者プロファイル・発話レコード・注釈を決定的に生成する"""
    rng = np.random.default_rng(derive_seed(seed, "fixture"))
    n_desc = len(Config.DESCRIPTORS)
    levels = np.linspace(-1.0, 1.0, speakers_per_gender)

    profiles: Dict[str, np.ndarray] = {}
    speaker_f0: Dict[str, float] = {}
    train_records, eval_records = [], []
    train_ann, eval_ann = [], []

    for gi, gender in enumerate(Config.GENDERS):
        speakers = [f"{gender[0]}{i + 1:02d}" for i in range(speakers_per_gender)]
        block = np.stack([rng.permutation(levels) for _ in range(n_desc)], axis=1)
        for si, spk in enumerate(speakers):
            signal = np.zeros(Config.NUM_ATTRIBUTES)
            signal[gi * n_desc:(gi + 1) * n_desc] = block[si]
            profiles[spk] = signal
            speaker_f0[spk] = float(rng.uniform(100.0, 140.0) if gender == "male" else rng.uniform(180.0, 260.0))
            for u in range(train_utterances + eval_utterances):
                record = UtteranceRecord(f"{spk}_{u + 1:03d}", spk, gender, "")
                (train_records if u < train_utterances else eval_records).append(record)

        pairings = list(itertools.combinations(speakers, 2))
        order = rng.permutation(len(pairings))
        for rank, pi in enumerate(order):
            a, b = pairings[pi]
            if rng.random() < 0.5:
                a, b = b, a
            chosen = sorted(rng.choice(n_desc, size=descriptors_per_pair, replace=False))
            anns = _annotate(a, b, profiles, gender, [Config.DESCRIPTORS[i] for i in chosen])
            (train_ann if rank < train_pairings else eval_ann).extend(anns)

    return SyntheticDataset(profiles, train_records, eval_records, train_ann, eval_ann, speaker_f0)


def synth_tone(f0: float, seed: int, utterance_id: str,
               sample_rate: int = Config.SAMPLE_RATE) -> np.ndarray:
    """前後に無音を挟んだ合成トーン"""
    rng = np.random.default_rng(derive_seed(seed, "fixture-audio", utterance_id))
    lead = int(rng.uniform(0.1, 0.3) * sample_rate)
    body = int(rng.uniform(0.4, 0.8) * sample_rate)
    trail = int(rng.uniform(0.1, 0.3) * sample_rate)
    t = np.arange(body) / sample_rate
    tone = 0.35 * np.sin(2 * np.pi * f0 * t) + 0.15 * np.sin(2 * np.pi * 2 * f0 * t)
    return np.concatenate([np.zeros(lead), tone, np.zeros(trail)])


def write_synthetic_fixture(out_dir: str, seed: int = Config.SEED,
                            speakers_per_gender: int = 4,
                            utterances_per_speaker: int = 6,
                            train_pairings: int = 4,
                            descriptors_per_pair: int = 4,
                            verbose: bool = True) -> FixturePaths:
    """フィクスチャ一式（WAV・マニフェスト・プロファイル・注釈・学習設定）を書き出す"""
    root = Path(out_dir)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    half = utterances_per_speaker // 2
    data = make_synthetic_dataset(seed, speakers_per_gender, half, utterances_per_speaker - half,
                                  train_pairings, descriptors_per_pair)

    for r in data.records:
        wav_path = root / "wav" / f"{r.utterance_id}.wav"
        samples = synth_tone(data.speaker_f0[r.speaker_id], seed, r.utterance_id)
        write_wav(Waveform(samples, Config.SAMPLE_RATE, r.utterance_id), str(wav_path))
        r.path = str(wav_path)

    paths = FixturePaths(
        root=root,
        manifest=root / "manifest.tsv",
        train_manifest=root / "manifest_train.tsv",
        eval_manifest=root / "manifest_eval.tsv",
        profiles=root / "profiles.tsv",
        train_annotations=root / "annotations_train.tsv",
        eval_annotations=root / "annotations_eval.tsv",
        train_config=root / "train.conf",
    )
    write_manifest(data.records, str(paths.manifest))
    write_manifest(data.train_records, str(paths.train_manifest))
    write_manifest(data.eval_records, str(paths.eval_manifest))
    write_profiles(data.profiles, str(paths.profiles), attribute_labels())
    write_annotations(data.train_annotations, str(paths.train_annotations))
    write_annotations(data.eval_annotations, str(paths.eval_annotations))
    write_config_file(TrainConfig(seed=seed), str(paths.train_config))

    if verbose:
        print(f"  ✅ 発話 {len(data.records)} 件 / 話者 {len(data.profiles)} 名")
        print(f"  ✅ 注釈 学習 {len(data.train_annotations)} 行 / 評価 {len(data.eval_annotations)} 行")
        print(f"  📁 {root}")
    return paths
