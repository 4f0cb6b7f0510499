#!/usr/bin/env python3
"""
評価: ペアのスコアリング、属性ごとの正解率・EER、性別平均・全体平均、レポート出力

【編集ガイド】
- 判定: スコア >= 0.5 を「B の方が強い」と予測（閾値は Config.DECISION_THRESHOLD）
- EER: 閾値を走査し FAR（負例で score >= θ の割合）と FRR（正例で score < θ の割合）の
  符号が入れ替わる隣接2点を線形補間
- 集計: 属性ごと -> 性別ごとの単純平均 -> 2性別の単純平均（試行をまとめての平均ではない）
- レポートは全精度で計算し、表示時に小数2桁へ丸める
"""

import dataclasses
import json
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import roc_curve

from config import Config
from errors import ContractViolation, InputError
from models import (AttributeResult, Checkpoint, EvalReport, LayerStack, PairExample,
                    ScoredTrial)
from pairs_dataset import attribute_labels, attribute_name
from trainer import load_feature_bank, model_from_checkpoint

try:
    import openpyxl
    from openpyxl.styles import Font
except ImportError:
    openpyxl = None


# ============================================================
# スコアリング
# ============================================================

def _pair_input(values) -> torch.Tensor:
    """(1, L, D) の float32 入力（常に新しい領域にコピーする）"""
    return torch.tensor(np.asarray(values), dtype=torch.float32).unsqueeze(0)


def _forward_pair(model, values_a, values_b) -> np.ndarray:
    return model(_pair_input(values_a), _pair_input(values_b))[0].numpy().astype(np.float64)


@torch.no_grad()
def predict_pair(ckpt: Checkpoint, stack_a: LayerStack, stack_b: LayerStack, model=None) -> np.ndarray:
    """1ペア分の34属性確率"""
    for s in (stack_a, stack_b):
        if (s.num_layers, s.dim) != (ckpt.num_layers, ckpt.dim):
            raise ContractViolation(
                f"特徴量の形状 {s.values.shape} がチェックポイント ({ckpt.num_layers}, {ckpt.dim}) と一致しません")
    model = model or model_from_checkpoint(ckpt)
    return _forward_pair(model, stack_a.values, stack_b.values)


@torch.no_grad()
def score_pairs(ckpt: Checkpoint, pairs: Sequence[PairExample], provider) -> List[ScoredTrial]:
    """評価モードで各ペアを1件ずつ推論し、マスク属性ごとに1試行を返す

    ペアごとに単独で順伝播するので、スコアは一緒に渡した他のペアに依存しない。
    """
    if not pairs:
        return []
    uids, bank = load_feature_bank(pairs, provider)
    if (bank.shape[1], bank.shape[2]) != (ckpt.num_layers, ckpt.dim):
        raise ContractViolation(
            f"特徴量の形状 ({bank.shape[1]}, {bank.shape[2]}) がチェックポイント "
            f"({ckpt.num_layers}, {ckpt.dim}) と一致しません")
    index = {uid: i for i, uid in enumerate(uids)}
    model = model_from_checkpoint(ckpt)

    trials: List[ScoredTrial] = []
    for p in pairs:
        row = _forward_pair(model, bank[index[p.utt_a]].numpy(), bank[index[p.utt_b]].numpy())
        for n in np.flatnonzero(p.mask):
            trials.append(ScoredTrial(score=float(row[n]), label=int(p.labels[n]),
                                      attribute_index=int(n), utt_a=p.utt_a, utt_b=p.utt_b))
    return trials


# ============================================================
# 指標
# ============================================================

def _arrays(trials: Sequence[ScoredTrial]):
    if not trials:
        raise InputError("試行が空です")
    scores = np.array([t.score for t in trials], dtype=np.float64)
    labels = np.array([t.label for t in trials], dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise InputError("スコアに非有限値が含まれています")
    return scores, labels


def accuracy(trials: Sequence[ScoredTrial], threshold: float = Config.DECISION_THRESHOLD) -> float:
    """正解率（%）。score >= threshold を正と予測"""
    scores, labels = _arrays(trials)
    predicted = (scores >= threshold).astype(np.int64)
    return 100.0 * float(np.sum(predicted == labels)) / len(labels)


def error_rate(trials: Sequence[ScoredTrial], threshold: float = Config.DECISION_THRESHOLD) -> float:
    return 100.0 - accuracy(trials, threshold)


def eer(trials: Sequence[ScoredTrial]) -> float:
    """等価エラー率（%）"""
    scores, labels = _arrays(trials)
    if labels.min() == labels.max():
        raise InputError("EER には正例と負例の両方が必要です")
    # 閾値は降順: FAR は増加、FRR は減少
    far, tpr, _ = roc_curve(labels, scores, drop_intermediate=False)
    frr = 1.0 - tpr
    diff = far - frr
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return 100.0 * float(far[i])
    t = -diff[i - 1] / (diff[i] - diff[i - 1])
    return 100.0 * float(far[i - 1] + t * (far[i] - far[i - 1]))


# ============================================================
# 集計
# ============================================================

def evaluate_attributes(trials: Sequence[ScoredTrial],
                        registry: Optional[Sequence[str]] = None,
                        threshold: float = Config.DECISION_THRESHOLD) -> List[AttributeResult]:
    """試行を属性ごとにまとめて正解率・EERを計算する（試行のない属性は出力しない）"""
    grouped: Dict[int, List[ScoredTrial]] = {}
    for t in trials:
        grouped.setdefault(t.attribute_index, []).append(t)

    results = []
    for idx in sorted(grouped):
        group = grouped[idx]
        descriptor, gender = attribute_name(idx, registry)
        result = AttributeResult(attribute_index=idx, descriptor=descriptor, gender=gender,
                                 n_trials=len(group), acc=accuracy(group, threshold))
        try:
            result.eer = eer(group)
        except InputError:
            result.evaluable = False
            result.note = "単一クラスのため EER を計算できません"
        results.append(result)
    return results


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def aggregate(results: Sequence[AttributeResult]) -> EvalReport:
    """性別ごとの平均と、2性別平均の平均（全体）を計算する"""
    flags: List[str] = []
    gender_acc: Dict[str, Optional[float]] = {}
    gender_eer: Dict[str, Optional[float]] = {}
    for r in results:
        if not r.evaluable:
            flags.append(f"評価不能: {r.descriptor}/{r.gender}（{r.note}）")
    for gender in Config.GENDERS:
        usable = [r for r in results if r.gender == gender and r.evaluable]
        gender_acc[gender] = _mean([r.acc for r in usable])
        gender_eer[gender] = _mean([r.eer for r in usable])
        if not usable:
            flags.append(f"{gender} に評価可能な属性がありません（全体平均は他方の性別のみ）")

    available = [g for g in Config.GENDERS if gender_acc[g] is not None]
    if not available:
        raise InputError("評価可能な属性がありません")
    return EvalReport(
        attributes=list(results),
        gender_acc=gender_acc,
        gender_eer=gender_eer,
        overall_acc=float(np.mean([gender_acc[g] for g in available])),
        overall_eer=float(np.mean([gender_eer[g] for g in available])),
        flags=flags,
    )


def round_report(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.{Config.REPORT_DECIMALS}f}"


# ============================================================
# レポート出力
# ============================================================

def report_records(report: EvalReport, provenance: Optional[Mapping[str, str]] = None) -> List[dict]:
    """JSON Lines 用のレコード列（ヘッダ -> 属性 -> 性別平均 -> 全体）"""
    records = [{"record": "header", **dict(provenance or {})}]
    for r in report.attributes:
        records.append({"record": "attribute", "index": r.attribute_index,
                        "gender": r.gender, "name": r.descriptor,
                        "acc": r.acc, "eer": r.eer, "n_trials": r.n_trials,
                        "evaluable": r.evaluable})
    for g in Config.GENDERS:
        records.append({"record": "gender_average", "gender": g,
                        "acc": report.gender_acc[g], "eer": report.gender_eer[g]})
    records.append({"record": "overall", "acc": report.overall_acc, "eer": report.overall_eer,
                    "flags": list(report.flags)})
    return records


def write_report(report: EvalReport, path: str, provenance: Optional[Mapping[str, str]] = None) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(rec, ensure_ascii=False) for rec in report_records(report, provenance)]
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def format_report_table(report: EvalReport) -> str:
    """男性・女性を左右に並べた表"""
    columns = {g: [r for r in report.attributes if r.gender == g] for g in Config.GENDERS}
    rows = max(len(v) for v in columns.values())
    width = 14
    head = " | ".join(f"{'Attribute':<{width}} {'Acc (%)':>8} {'EER (%)':>8}" for _ in Config.GENDERS)
    lines = [" | ".join(f"{g.capitalize():<{width + 18}}" for g in Config.GENDERS).rstrip(),
             head, "-" * len(head)]
    for i in range(rows):
        cells = []
        for g in Config.GENDERS:
            if i < len(columns[g]):
                r = columns[g][i]
                name = r.descriptor + ("" if r.evaluable else "*")
                cells.append(f"{name:<{width}} {round_report(r.acc):>8} {round_report(r.eer):>8}")
            else:
                cells.append(" " * (width + 18))
        lines.append(" | ".join(cells).rstrip())
    lines.append("-" * len(head))
    lines.append(" | ".join(
        f"{'Average':<{width}} {round_report(report.gender_acc[g]):>8} {round_report(report.gender_eer[g]):>8}"
        for g in Config.GENDERS))
    lines.append(f"Overall: Acc {round_report(report.overall_acc)} %  EER {round_report(report.overall_eer)} %")
    for flag in report.flags:
        lines.append(f"⚠️ {flag}")
    return "\n".join(lines)


def write_report_xlsx(report: EvalReport, path: str,
                      provenance: Optional[Mapping[str, str]] = None) -> None:
    """男女を左右に並べた集計シートと属性一覧シートを持つブックを書き出す"""
    if openpyxl is None:
        raise InputError("openpyxl が未インストールです（pip install openpyxl）")
    wb = openpyxl.Workbook()
    if "Sheet" in wb.sheetnames:
        del wb["Sheet"]

    ws = wb.create_sheet("summary")
    bold = Font(bold=True)
    for gi, gender in enumerate(Config.GENDERS):
        col = 1 + gi * 4
        ws.cell(row=1, column=col, value=gender.capitalize()).font = bold
        for ci, label in enumerate(["Attribute", "Acc (%)", "EER (%)"]):
            ws.cell(row=2, column=col + ci, value=label).font = bold
        row = 3
        for r in (r for r in report.attributes if r.gender == gender):
            ws.cell(row=row, column=col, value=r.descriptor)
            ws.cell(row=row, column=col + 1, value=r.acc).number_format = "0.00"
            ws.cell(row=row, column=col + 2, value=r.eer).number_format = "0.00"
            row += 1
        ws.cell(row=row, column=col, value="Average").font = bold
        ws.cell(row=row, column=col + 1, value=report.gender_acc[gender]).number_format = "0.00"
        ws.cell(row=row, column=col + 2, value=report.gender_eer[gender]).number_format = "0.00"

    last = ws.max_row + 2
    ws.cell(row=last, column=1, value="Overall").font = bold
    ws.cell(row=last, column=2, value=report.overall_acc).number_format = "0.00"
    ws.cell(row=last, column=3, value=report.overall_eer).number_format = "0.00"

    ws = wb.create_sheet("attributes")
    header = [f.name for f in dataclasses.fields(AttributeResult)]
    ws.append(header)
    for r in report.attributes:
        ws.append([getattr(r, name) for name in header])

    if provenance:
        ws = wb.create_sheet("provenance")
        for key, value in provenance.items():
            ws.append([key, value])

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    wb.save(str(p))


def format_predictions(probs: np.ndarray, registry: Optional[Sequence[str]] = None) -> str:
    """predict 用: 34行の「記述子/性別<TAB>確率」"""
    return "\n".join(f"{name}\t{float(p):.6f}" for name, p in zip(attribute_labels(registry), probs))
