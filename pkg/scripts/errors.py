#!/usr/bin/env python3
"""例外クラス定義

CLI（main.py）は VtadError をまとめて捕捉し、終了コード1と ❌ 行に変換する。
"""


class VtadError(Exception):
    """パイプライン共通の基底例外"""


class InputError(VtadError):
    """入力データの不備（空・非有限の波形、未登録の記述子、発話不足、単一クラスのEERなど）"""


class ConfigurationError(VtadError):
    """設定値の不整合（H が D を割り切らない、未知のバリアント、設定ファイルの書式不正など）"""


class ContractViolation(VtadError):
    """形状・次元の契約違反"""


class FormatError(VtadError):
    """ファイル形式の不正（マジック・バージョン・長さ・ハッシュ不一致）"""


class CheckpointMismatchError(FormatError):
    """チェックポイントのフィンガープリント不一致"""


class BackendUnavailableError(VtadError):
    """実行環境がバックエンドを提供できない（依存パッケージ・モデル未導入）"""
