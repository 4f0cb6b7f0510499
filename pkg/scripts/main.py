#!/usr/bin/env python3
"""
声質属性比較（vTAD）パイプライン CLI

実際のロジックは以下のモジュールに分割されています：

  models.py            - データクラス定義
  config.py            - 設定値（既定値）・設定ファイル・シード導出・来歴
  errors.py            - 例外階層
  dsp_trim.py          - 前後無音のトリミング
  feature_provider.py  - 層別埋め込みの抽出・保存（synthetic / file / external-encoder）
  astp.py              - 層方向の注意統計プーリング
  diffnet.py           - Diff-Net（FFN / SE-ResFFN）
  pairs_dataset.py     - 注釈の発話ペア展開・分割チェック
  trainer.py           - 学習ループ・チェックポイント
  evaluator.py         - 推論・ACC/EER・レポート
  synthetic_fixture.py - 合成フィクスチャ生成

【使用方法】
python scripts/main.py make-fixture --out-dir ./fixture
python scripts/main.py trim --manifest ./fixture/manifest.tsv --out-dir ./trimmed
python scripts/main.py extract --manifest ./trimmed/manifest.tsv --backend synthetic \\
    --profiles ./fixture/profiles.tsv --out-dir ./features
python scripts/main.py build-pairs --manifest ./fixture/manifest_train.tsv \\
    --annotations ./fixture/annotations_train.tsv --protocol train --out ./train_pairs.tsv
python scripts/main.py train --config ./fixture/train.conf --pairs ./train_pairs.tsv \\
    --features ./features --out ./model.ckpt
python scripts/main.py eval --ckpt ./model.ckpt --pairs ./eval_pairs.tsv --features ./features \\
    --report ./report.jsonl

終了コード: 成功 0 / エラー・分割チェック違反 1 / 使い方の誤り 2
"""

import argparse
import concurrent.futures
import dataclasses
import json
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config import (
    Config,
    canonical_variant,
    load_registry,
    provenance,
    read_config_file,
    resolve_dataclass,
)
from errors import ConfigurationError, VtadError
from models import ProviderConfig, TrainConfig
from dsp_trim import read_wav, trim_silence, write_wav
from feature_provider import (
    BACKENDS,
    FeatureStore,
    extract_layer_stack,
    make_backend,
    safe_filename,
    write_feature_manifest,
    write_layer_stack,
)
from pairs_dataset import (
    PROTOCOLS,
    build_pairs,
    read_annotations,
    read_manifest,
    read_pairs,
    split_check,
    write_manifest,
    write_pairs,
)
from trainer import epoch_record_json, load_checkpoint, save_checkpoint, train
from evaluator import (
    aggregate,
    evaluate_attributes,
    format_predictions,
    format_report_table,
    predict_pair,
    score_pairs,
    write_report,
    write_report_xlsx,
)
from synthetic_fixture import write_synthetic_fixture


# =============================================================================
# 補助
# =============================================================================

def _banner(title: str) -> None:
    print("=" * 60)
    print(title)
    print("=" * 60)


def _settings(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _format_default(value) -> str:
    if isinstance(value, float) and value != 0 and abs(value) < 1e-3:
        return re.sub(r"e([+-])0*(\d)", r"e\1\2", f"{value:.0e}").replace("e+", "e")
    return str(value)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"真偽値として解釈できません: {text!r}")


# =============================================================================
# trim
# =============================================================================

def cmd_trim(args: argparse.Namespace) -> int:
    opts = dict(threshold_db=args.threshold_db, window_ms=args.window_ms,
                hop_ms=args.hop_ms, min_keep_ms=args.min_keep_ms)
    if args.input:
        if not args.output:
            raise ConfigurationError("--in を使う場合は --out が必要です")
        w = trim_silence(read_wav(args.input), **opts)
        write_wav(w, args.output)
        print(f"  ✅ {args.input} -> {args.output}（{len(w.samples)} サンプル）")
        return 0

    if not args.manifest or not args.out_dir:
        raise ConfigurationError("--in/--out または --manifest/--out-dir を指定してください")
    out_dir = Path(args.out_dir)
    records = read_manifest(args.manifest)
    for r in records:
        w = trim_silence(read_wav(r.path, r.utterance_id), **opts)
        out_path = out_dir / "wav" / Path(safe_filename(r.utterance_id)).with_suffix(".wav")
        write_wav(w, str(out_path))
        r.path = str(out_path)
    write_manifest(records, str(out_dir / "manifest.tsv"), provenance(_settings(args), "trim"))
    print(f"  ✅ {len(records)} 件をトリミングしました: {out_dir / 'manifest.tsv'}")
    return 0


# =============================================================================
# extract
# =============================================================================

def _extract_chunk(records, cfg: ProviderConfig, speaker_of, out_dir: Path) -> Dict[str, str]:
    # ワーカーごとに独立したバックエンドを持つ
    backend = make_backend(cfg, speaker_of)
    written = {}
    for r in records:
        stack = extract_layer_stack(read_wav(r.path, r.utterance_id), cfg, backend)
        name = safe_filename(r.utterance_id)
        write_layer_stack(stack, str(out_dir / name))
        written[r.utterance_id] = name
    return written


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = ProviderConfig(backend=args.backend, expected_layers=args.layers, expected_dim=args.dim,
                         feature_dir=args.feature_dir or "", profile_path=args.profiles or "",
                         encoder_id=args.encoder_id, seed=args.seed, device=args.device)
    records = read_manifest(args.manifest)
    speaker_of = {r.utterance_id: r.speaker_id for r in records}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = max(1, min(args.jobs, len(records) or 1))
    chunks = [records[i::jobs] for i in range(jobs)]
    print(f"📖 {len(records)} 件を抽出します（backend={cfg.backend}, L={cfg.expected_layers}, "
          f"D={cfg.expected_dim}, jobs={jobs}）")
    written: Dict[str, str] = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(_extract_chunk, chunk, cfg, speaker_of, out_dir) for chunk in chunks]
        for fut in futs:
            written.update(fut.result())

    entries = {r.utterance_id: written[r.utterance_id] for r in records}
    write_feature_manifest(entries, str(out_dir / Config.FEATURE_MANIFEST),
                           provenance(_settings(args), "extract"))
    print(f"  ✅ {len(entries)} 件を書き出しました: {out_dir}")
    return 0


# =============================================================================
# build-pairs
# =============================================================================

def cmd_build_pairs(args: argparse.Namespace) -> int:
    registry = load_registry(args.registry)
    pairs_per = args.pairs_per or Config.PAIRS_PER_SPEAKER_PAIR[args.protocol]
    records = read_manifest(args.manifest)
    annotations = read_annotations(args.annotations, registry)
    pairs = build_pairs(annotations, records, pairs_per, include_reverse=not args.no_reverse,
                        seed=args.seed, registry=registry)
    n = write_pairs(pairs, args.out, registry, provenance(_settings(args), "build-pairs"))
    print(f"  ✅ {n} ペアを書き出しました（protocol={args.protocol}, pairs_per={pairs_per}）: {args.out}")
    return 0


# =============================================================================
# train
# =============================================================================

def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """既定値 < --config < 個別フラグ の順に TrainConfig を決める"""
    file_values = read_config_file(args.config) if args.config else None
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    return resolve_dataclass(TrainConfig, file_values, overrides)


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_train_config(args)
    registry = load_registry(args.registry)
    settings = {"train_config": dataclasses.asdict(config), "registry": registry}
    prov = provenance(settings, "train")

    _banner(f"学習 variant={config.variant} epochs={config.epochs} batch={config.batch_size} "
            f"lr={_format_default(config.learning_rate)} seed={config.seed}")
    store = FeatureStore(args.features)
    train_pairs = read_pairs(args.pairs)
    val_pairs = read_pairs(args.val_pairs) if args.val_pairs else []
    resume = load_checkpoint(args.resume, force=args.force) if args.resume else None

    log_lines: List[str] = [json.dumps({"record": "header", **prov}, ensure_ascii=False)]
    ckpt, log = train(config, train_pairs, val_pairs, store, registry=registry,
                      resume=resume, force=args.force, stop_after=args.stop_after,
                      checkpoint_dir=args.checkpoint_dir, provenance=prov)
    log_lines += [epoch_record_json(r) for r in log]

    save_checkpoint(ckpt, args.out)
    if args.log:
        Path(args.log).parent.mkdir(parents=True, exist_ok=True)
        Path(args.log).write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"  ✅ チェックポイント: {args.out}（epoch={ckpt.epoch}, step={ckpt.step}）")
    return 0


# =============================================================================
# eval / predict
# =============================================================================

def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt, force=args.force)
    store = FeatureStore(args.features)
    pairs = read_pairs(args.pairs)
    trials = score_pairs(ckpt, pairs, store)
    report = aggregate(evaluate_attributes(trials, ckpt.registry))

    prov = dict(provenance(_settings(args), "eval"), checkpoint_fingerprint=ckpt.fingerprint)
    print(format_report_table(report))
    for flag in report.flags:
        print(f"  ⚠️ {flag}")
    if args.report:
        write_report(report, args.report, prov)
        print(f"  ✅ レポート: {args.report}")
    if args.xlsx:
        write_report_xlsx(report, args.xlsx, prov)
        print(f"  ✅ Excel: {args.xlsx}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt, force=args.force)
    store = FeatureStore(args.features)
    probs = predict_pair(ckpt, store.get(args.utt_a), store.get(args.utt_b))
    print(format_predictions(probs, ckpt.registry))
    return 0


# =============================================================================
# split-check
# =============================================================================

def cmd_split_check(args: argparse.Namespace) -> int:
    speaker_of: Dict[str, str] = {}
    for manifest in args.manifest or []:
        speaker_of.update({r.utterance_id: r.speaker_id for r in read_manifest(manifest)})
    report = split_check(read_pairs(args.train_pairs, speaker_of), read_pairs(args.eval_pairs, speaker_of),
                         args.protocol, speaker_of)

    if args.json:
        print(json.dumps({"protocol": report.protocol, "n_train": report.n_train,
                          "n_eval": report.n_eval, "pass": report.ok,
                          "violations": [dataclasses.asdict(v) for v in report.violations]},
                         ensure_ascii=False, indent=2))
        return 0 if report.ok else 1

    _banner(f"分割チェック（protocol={report.protocol}）")
    print(f"  学習 {report.n_train} ペア / 評価 {report.n_eval} ペア")
    kinds = ["speaker_pair", "utterance"] if report.protocol == "seen" else ["speaker_pair", "speaker"]
    for kind in kinds:
        found = [v for v in report.violations if v.kind == kind]
        print(f"  [{'OK' if not found else 'NG'}] {kind}: 重複 {len(found)} 件")
        for v in found:
            print(f"    - {v.detail}")
    print("=" * 60)
    print("総合判定: PASS" if report.ok else f"総合判定: FAIL（違反 {len(report.violations)} 件）")
    return 0 if report.ok else 1


# =============================================================================
# make-fixture
# =============================================================================

def cmd_make_fixture(args: argparse.Namespace) -> int:
    _banner("合成フィクスチャ生成")
    write_synthetic_fixture(args.out_dir, seed=args.seed,
                            speakers_per_gender=args.speakers_per_gender,
                            utterances_per_speaker=args.utterances_per_speaker,
                            train_pairings=args.train_pairings,
                            descriptors_per_pair=args.descriptors_per_pair)
    return 0


# =============================================================================
# 引数定義
# =============================================================================

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        default = getattr(defaults, f.name)
        kind = _parse_bool if isinstance(default, bool) else type(default)
        extra = {}
        if f.name == "variant":
            kind, extra = canonical_variant, {"choices": Config.VARIANTS}
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                       help=f"{f.name}（デフォルト: {_format_default(default)}）", **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtad", description="声質属性比較（vTAD）パイプライン")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("trim", help="前後の無音をトリミング")
    p.add_argument("--in", dest="input", help="入力WAV（単一ファイル）")
    p.add_argument("--out", dest="output", help="出力WAV（単一ファイル）")
    p.add_argument("--manifest", help="発話マニフェスト（一括処理）")
    p.add_argument("--out-dir", help="一括処理の出力ディレクトリ")
    p.add_argument("--threshold-db", type=float, default=Config.TRIM_THRESHOLD_DB,
                   help=f"無音判定しきい値 dB（デフォルト: {Config.TRIM_THRESHOLD_DB}）")
    p.add_argument("--window-ms", type=float, default=Config.TRIM_WINDOW_MS,
                   help=f"分析窓 ms（デフォルト: {Config.TRIM_WINDOW_MS}）")
    p.add_argument("--hop-ms", type=float, default=Config.TRIM_HOP_MS,
                   help=f"ホップ ms（デフォルト: {Config.TRIM_HOP_MS}）")
    p.add_argument("--min-keep-ms", type=float, default=Config.TRIM_MIN_KEEP_MS,
                   help=f"残す最短長 ms（デフォルト: {Config.TRIM_MIN_KEEP_MS}）")
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("extract", help="層別埋め込みを抽出")
    p.add_argument("--manifest", required=True, help="発話マニフェスト")
    p.add_argument("--backend", choices=BACKENDS, default="synthetic", help="バックエンド（デフォルト: synthetic）")
    p.add_argument("--out-dir", required=True, help="出力ディレクトリ")
    p.add_argument("--profiles", help="synthetic 用の話者プロファイル TSV")
    p.add_argument("--feature-dir", help="file バックエンドの読み込み元")
    p.add_argument("--encoder-id", default=Config.ENCODER_MODEL_ID,
                   help=f"external-encoder のモデル（デフォルト: {Config.ENCODER_MODEL_ID}）")
    p.add_argument("--device", default="cpu", help="external-encoder の実行デバイス（デフォルト: cpu）")
    p.add_argument("--layers", type=int, default=Config.ENCODER_LAYERS,
                   help=f"層数 L（デフォルト: {Config.ENCODER_LAYERS}）")
    p.add_argument("--dim", type=int, default=Config.ENCODER_DIM, help=f"次元 D（デフォルト: {Config.ENCODER_DIM}）")
    p.add_argument("--seed", type=int, default=Config.SEED, help=f"シード（デフォルト: {Config.SEED}）")
    p.add_argument("--jobs", type=int, default=1, help="並列ワーカー数（デフォルト: 1）")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-pairs", help="話者ペア注釈を発話ペアに展開")
    p.add_argument("--manifest", required=True, help="発話マニフェスト")
    p.add_argument("--annotations", required=True, help="話者ペア注釈 TSV")
    p.add_argument("--out", required=True, help="出力ペアリスト")
    p.add_argument("--protocol", choices=list(Config.PAIRS_PER_SPEAKER_PAIR), default="train",
                   help="pairs_per の既定値を選ぶ（train=40 / seen=400 / unseen=400、デフォルト: train）")
    p.add_argument("--pairs-per", type=int, default=None, help="話者ペアあたりのペア数（指定時は --protocol より優先）")
    p.add_argument("--no-reverse", action="store_true", help="逆順ペアを含めない")
    p.add_argument("--seed", type=int, default=Config.SEED, help=f"シード（デフォルト: {Config.SEED}）")
    p.add_argument("--registry", help="記述子レジストリファイル")
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("train", help="ASTP + Diff-Net を学習")
    p.add_argument("--config", help="key=value 形式の設定ファイル")
    _add_train_flags(p)
    p.add_argument("--pairs", required=True, help="学習ペアリスト")
    p.add_argument("--val-pairs", help="検証ペアリスト")
    p.add_argument("--features", required=True, help="extract の出力ディレクトリ")
    p.add_argument("--out", required=True, help="出力チェックポイント")
    p.add_argument("--log", help="学習ログ（JSON Lines）")
    p.add_argument("--registry", help="記述子レジストリファイル")
    p.add_argument("--resume", help="再開元チェックポイント")
    p.add_argument("--force", action="store_true", help="設定フィンガープリントの不一致を無視")
    p.add_argument("--stop-after", type=int, default=None, help="このエポックで中断する")
    p.add_argument("--checkpoint-dir", help="エポックごとのチェックポイント出力先")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="属性ごとの ACC / EER を計算")
    p.add_argument("--ckpt", required=True, help="チェックポイント")
    p.add_argument("--pairs", required=True, help="評価ペアリスト")
    p.add_argument("--features", required=True, help="extract の出力ディレクトリ")
    p.add_argument("--report", help="レポート（JSON Lines）")
    p.add_argument("--xlsx", help="Excel レポート")
    p.add_argument("--force", action="store_true", help="チェックポイントのフィンガープリント不一致を無視")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="1ペアの34属性スコアを表示")
    p.add_argument("--ckpt", required=True, help="チェックポイント")
    p.add_argument("--features", required=True, help="extract の出力ディレクトリ")
    p.add_argument("--utt-a", required=True, help="発話A の utterance_id")
    p.add_argument("--utt-b", required=True, help="発話B の utterance_id")
    p.add_argument("--force", action="store_true", help="チェックポイントのフィンガープリント不一致を無視")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("split-check", help="学習・評価セットの漏れを検査")
    p.add_argument("--train-pairs", required=True, help="学習ペアリスト")
    p.add_argument("--eval-pairs", required=True, help="評価ペアリスト")
    p.add_argument("--manifest", action="append", help="話者IDを引くマニフェスト（複数可）")
    p.add_argument("--protocol", choices=PROTOCOLS, default="seen", help="seen / unseen（デフォルト: seen）")
    p.add_argument("--json", action="store_true", help="JSON形式で出力")
    p.set_defaults(func=cmd_split_check)

    p = sub.add_parser("make-fixture", help="合成フィクスチャを生成")
    p.add_argument("--out-dir", required=True, help="出力ディレクトリ")
    p.add_argument("--seed", type=int, default=Config.SEED, help=f"シード（デフォルト: {Config.SEED}）")
    p.add_argument("--speakers-per-gender", type=int, default=4, help="性別あたりの話者数（デフォルト: 4）")
    p.add_argument("--utterances-per-speaker", type=int, default=6, help="話者あたりの発話数（デフォルト: 6）")
    p.add_argument("--train-pairings", type=int, default=4, help="性別あたりの学習用話者ペア数（デフォルト: 4）")
    p.add_argument("--descriptors-per-pair", type=int, default=4, help="話者ペアあたりの注釈記述子数（デフォルト: 4）")
    p.set_defaults(func=cmd_make_fixture)

    return parser


# =============================================================================
# メイン処理（CLI）
# =============================================================================

def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage()
        return 2
    try:
        return args.func(args)
    except VtadError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
