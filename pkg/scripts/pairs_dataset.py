#!/usr/bin/env python3
"""
マニフェスト・話者ペア注釈の読み込み、発話ペア展開、分割衛生チェック

【編集ガイド】
  マニフェストTSV:  utterance_id, speaker_id, gender, path
  注釈TSV:          speaker_a, speaker_b, descriptor, direction（b_stronger / a_stronger）
  ペアリストTSV:    utt_a, utt_b, gender, ラベル34列, マスク34列（0/1）
属性インデックスは 男性 = 記述子番号、女性 = 17 + 記述子番号。
同じ話者ペアに複数の記述子が付いている場合は1つのラベル・マスクベクトルにまとめます。
"""

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import Config, derive_seed, provenance_comment
from errors import ConfigurationError, FormatError, InputError
from models import (PairExample, SpeakerPairAnnotation, SplitReport, SplitViolation,
                    UtteranceRecord)


DIRECTIONS = ("b_stronger", "a_stronger")
MANIFEST_COLUMNS = ["utterance_id", "speaker_id", "gender", "path"]
ANNOTATION_COLUMNS = ["speaker_a", "speaker_b", "descriptor", "direction"]


# ============================================================
# 属性レジストリ
# ============================================================

def attribute_index(descriptor: str, gender: str, registry: Optional[Sequence[str]] = None) -> int:
    """(記述子, 性別) -> [0, 34) の属性インデックス"""
    names = list(registry) if registry is not None else Config.DESCRIPTORS
    if descriptor not in names:
        raise InputError(f"未登録の記述子です: {descriptor}")
    if gender not in Config.GENDERS:
        raise InputError(f"性別は male / female のいずれかです: {gender}")
    return Config.GENDERS.index(gender) * len(names) + names.index(descriptor)


def attribute_name(index: int, registry: Optional[Sequence[str]] = None) -> Tuple[str, str]:
    """属性インデックス -> (記述子, 性別)"""
    names = list(registry) if registry is not None else Config.DESCRIPTORS
    if not 0 <= index < 2 * len(names):
        raise InputError(f"属性インデックスが範囲外です: {index}")
    return names[index % len(names)], Config.GENDERS[index // len(names)]


def attribute_labels(registry: Optional[Sequence[str]] = None) -> List[str]:
    """全34属性の表示名（記述子/性別）"""
    names = list(registry) if registry is not None else Config.DESCRIPTORS
    return [f"{d}/{g}" for g in Config.GENDERS for d in names]


# ============================================================
# TSV 読み書き
# ============================================================

def _read_tsv(path: str, columns: List[str]) -> List[List[str]]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"ファイルが見つかりません: {path}")
    with p.open(encoding="utf-8", newline="") as f:
        rows = csv.reader((line for line in f if not line.startswith("#")), delimiter="\t")
        header = next(rows, None)
        if header is None or header[:len(columns)] != columns:
            raise FormatError(f"ヘッダが不正です（期待: {columns}）: {path}")
        body = []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: 列数が不正です（{len(row)} != {len(header)}）")
            body.append(row)
    return body


def _open_for_write(path: str, provenance: Optional[Mapping[str, str]]):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    f = p.open("w", encoding="utf-8", newline="")
    if provenance:
        f.write(provenance_comment(provenance) + "\n")
    return f, csv.writer(f, delimiter="\t", lineterminator="\n")


def read_manifest(path: str) -> List[UtteranceRecord]:
    """マニフェストを読む。相対パスはマニフェストのあるディレクトリ基準で解決する"""
    base = Path(path).parent
    records: List[UtteranceRecord] = []
    seen = set()
    for uid, speaker, gender, rel in _read_tsv(path, MANIFEST_COLUMNS):
        if uid in seen:
            raise InputError(f"utterance_id が重複しています: {uid}")
        if gender not in Config.GENDERS:
            raise InputError(f"性別が不正です（{uid}）: {gender}")
        seen.add(uid)
        resolved = str(base / rel) if rel and not Path(rel).is_absolute() else rel
        records.append(UtteranceRecord(uid, speaker, gender, resolved))
    return records


def write_manifest(records: Iterable[UtteranceRecord], path: str,
                   provenance: Optional[Mapping[str, str]] = None) -> None:
    base = Path(path).parent.resolve()
    f, writer = _open_for_write(path, provenance)
    with f:
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            rel = r.path
            if rel:
                try:
                    rel = str(Path(rel).resolve().relative_to(base))
                except ValueError:
                    rel = str(Path(rel).resolve())
            writer.writerow([r.utterance_id, r.speaker_id, r.gender, rel])


def read_annotations(path: str, registry: Optional[Sequence[str]] = None) -> List[SpeakerPairAnnotation]:
    names = list(registry) if registry is not None else Config.DESCRIPTORS
    annotations = []
    for a, b, descriptor, direction in _read_tsv(path, ANNOTATION_COLUMNS):
        if a == b:
            raise InputError(f"同一話者どうしの注釈です: {a}")
        if descriptor not in names:
            raise InputError(f"未登録の記述子です: {descriptor}")
        if direction not in DIRECTIONS:
            raise InputError(f"direction は b_stronger / a_stronger のいずれかです: {direction}")
        annotations.append(SpeakerPairAnnotation(a, b, descriptor, direction))
    return annotations


def write_annotations(annotations: Iterable[SpeakerPairAnnotation], path: str) -> None:
    f, writer = _open_for_write(path, None)
    with f:
        writer.writerow(ANNOTATION_COLUMNS)
        for a in annotations:
            writer.writerow([a.speaker_a, a.speaker_b, a.descriptor, a.direction])


def write_pairs(pairs: Iterable[PairExample], path: str,
                registry: Optional[Sequence[str]] = None,
                provenance: Optional[Mapping[str, str]] = None) -> int:
    labels = attribute_labels(registry)
    f, writer = _open_for_write(path, provenance)
    count = 0
    with f:
        writer.writerow(["utt_a", "utt_b", "gender"]
                        + [f"label:{n}" for n in labels] + [f"mask:{n}" for n in labels])
        for p in pairs:
            writer.writerow([p.utt_a, p.utt_b, p.gender]
                            + [int(v) for v in p.labels] + [int(v) for v in p.mask])
            count += 1
    return count


def read_pairs(path: str, speaker_of: Optional[Mapping[str, str]] = None) -> List[PairExample]:
    """ペアリストを読む。speaker_of を渡すと話者IDも埋める"""
    n = Config.NUM_ATTRIBUTES
    pairs = []
    for row in _read_tsv(path, ["utt_a", "utt_b", "gender"]):
        if len(row) != 3 + 2 * n:
            raise FormatError(f"ペアリストの列数が不正です: {path}")
        try:
            values = np.array([int(v) for v in row[3:]], dtype=np.int8)
        except ValueError as e:
            raise FormatError(f"ラベル・マスクは 0/1 が必要です: {path}") from e
        if np.any((values != 0) & (values != 1)):
            raise FormatError(f"ラベル・マスクは 0/1 が必要です: {path}")
        labels, mask = values[:n].copy(), values[n:].copy()
        if mask.sum() < 1:
            raise InputError(f"マスクが空のペアがあります（{row[0]}, {row[1]}）: {path}")
        speaker_of = speaker_of or {}
        pairs.append(PairExample(row[0], row[1], labels, mask, row[2],
                                 speaker_of.get(row[0], ""), speaker_of.get(row[1], "")))
    return pairs


# ============================================================
# 発話ペア展開
# ============================================================

def _group_annotations(annotations: Iterable[SpeakerPairAnnotation]):
    """順序なし話者ペアごとにまとめる（最初に現れた向きを基準）"""
    groups: Dict[frozenset, Tuple[str, str, Dict[str, int]]] = {}
    for ann in annotations:
        key = frozenset((ann.speaker_a, ann.speaker_b))
        if key not in groups:
            groups[key] = (ann.speaker_a, ann.speaker_b, {})
        a, b, labels = groups[key]
        value = 1 if ann.direction == "b_stronger" else 0
        if ann.speaker_a != a:
            value = 1 - value
        if labels.get(ann.descriptor, value) != value:
            raise InputError(f"同じ話者ペア・記述子に矛盾するラベルがあります: {a}, {b}, {ann.descriptor}")
        labels[ann.descriptor] = value
    return list(groups.values())


def build_pairs(annotations: Sequence[SpeakerPairAnnotation],
                utterances: Sequence[UtteranceRecord],
                pairs_per_speaker_pair: int = Config.PAIRS_PER_SPEAKER_PAIR["train"],
                include_reverse: bool = True,
                seed: int = Config.SEED,
                registry: Optional[Sequence[str]] = None) -> List[PairExample]:
    """話者ペア注釈を発話ペアに展開する

    話者ペアごとに (seed, グループ番号) から導出した乱数で、両話者の発話の直積から
    重複なしで抽出する（直積が足りないときだけ重複あり）。include_reverse のとき
    抽出した各ペアの逆順ペア（ラベル反転）も出力し、合計が pairs_per_speaker_pair になる。
    """
    if pairs_per_speaker_pair < 1:
        raise ConfigurationError(f"pairs_per_speaker_pair は1以上が必要です: {pairs_per_speaker_pair}")
    if include_reverse and pairs_per_speaker_pair % 2 != 0:
        raise ConfigurationError(
            f"逆順ペアを含める場合 pairs_per_speaker_pair は偶数が必要です: {pairs_per_speaker_pair}")
    n_draw = pairs_per_speaker_pair // 2 if include_reverse else pairs_per_speaker_pair

    by_speaker: Dict[str, List[str]] = {}
    gender_of: Dict[str, str] = {}
    for r in utterances:
        by_speaker.setdefault(r.speaker_id, []).append(r.utterance_id)
        gender_of[r.speaker_id] = r.gender

    pairs: List[PairExample] = []
    for gi, (a, b, labelled) in enumerate(_group_annotations(annotations)):
        for speaker in (a, b):
            if not by_speaker.get(speaker):
                raise InputError(f"話者の発話がマニフェストにありません: {speaker}")
        gender = gender_of[a]
        if gender_of[b] != gender:
            raise InputError(f"話者ペアの性別が一致しません: {a}（{gender}）, {b}（{gender_of[b]}）")

        labels = np.zeros(Config.NUM_ATTRIBUTES, dtype=np.int8)
        mask = np.zeros(Config.NUM_ATTRIBUTES, dtype=np.int8)
        for descriptor, value in labelled.items():
            idx = attribute_index(descriptor, gender, registry)
            labels[idx] = value
            mask[idx] = 1
        flipped = np.where(mask == 1, 1 - labels, 0).astype(np.int8)

        utts_a, utts_b = by_speaker[a], by_speaker[b]
        cross = len(utts_a) * len(utts_b)
        rng = np.random.default_rng(derive_seed(seed, "pairs", gi))
        drawn = rng.choice(cross, size=n_draw, replace=n_draw > cross)
        for flat in drawn:
            ua, ub = utts_a[int(flat) // len(utts_b)], utts_b[int(flat) % len(utts_b)]
            pairs.append(PairExample(ua, ub, labels.copy(), mask.copy(), gender, a, b))
            if include_reverse:
                pairs.append(PairExample(ub, ua, flipped.copy(), mask.copy(), gender, b, a))
    return pairs


# ============================================================
# 分割衛生チェック
# ============================================================

PROTOCOLS = ("seen", "unseen")


def _speakers(pair: PairExample, speaker_of: Mapping[str, str]) -> Tuple[str, str]:
    sa = pair.speaker_a or speaker_of.get(pair.utt_a, "")
    sb = pair.speaker_b or speaker_of.get(pair.utt_b, "")
    if not sa or not sb:
        missing = pair.utt_a if not sa else pair.utt_b
        raise InputError(f"発話の話者が不明です: {missing}")
    return sa, sb


def split_check(train_pairs: Sequence[PairExample], eval_pairs: Sequence[PairExample],
                protocol: str = "seen",
                speaker_of: Optional[Mapping[str, str]] = None) -> SplitReport:
    """学習・評価セット間の漏れを列挙する

    共通: 順序なし話者ペアの重複。seen: 発話IDの共有。unseen: 話者の共有。
    """
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"protocol は seen / unseen のいずれかです: {protocol}")
    speaker_of = speaker_of or {}

    def collect(pairs):
        speaker_pairs, utts, speakers = set(), set(), set()
        for p in pairs:
            sa, sb = _speakers(p, speaker_of)
            speaker_pairs.add(tuple(sorted((sa, sb))))
            utts.update((p.utt_a, p.utt_b))
            speakers.update((sa, sb))
        return speaker_pairs, utts, speakers

    train_sp, train_utts, train_spk = collect(train_pairs)
    eval_sp, eval_utts, eval_spk = collect(eval_pairs)

    report = SplitReport(protocol=protocol, n_train=len(train_pairs), n_eval=len(eval_pairs))
    for sp in sorted(train_sp & eval_sp):
        report.violations.append(SplitViolation(
            "speaker_pair", list(sp), f"話者ペア {sp[0]} - {sp[1]} が学習・評価の両方にあります"))
    if protocol == "seen":
        for uid in sorted(train_utts & eval_utts):
            report.violations.append(SplitViolation(
                "utterance", [uid], f"発話 {uid} が学習・評価の両方にあります"))
    else:
        for spk in sorted(train_spk & eval_spk):
            report.violations.append(SplitViolation(
                "speaker", [spk], f"話者 {spk} が学習・評価の両方にあります"))
    return report
