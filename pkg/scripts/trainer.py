#!/usr/bin/env python3
"""
学習ループ（ASTP + Diff-Net）とチェックポイント

【編集ガイド】
学習設定の既定値は config.py（EPOCHS, BATCH_SIZE, LEARNING_RATE ...）と models.TrainConfig。
乱数はすべて TrainConfig.seed から導出します:
  - ASTP / Diff-Net の初期値:  derive_seed(seed, "astp") / derive_seed(seed, "diffnet")
  - エポック e のシャッフル:     derive_seed(seed, "shuffle", e)
  - エポック e のドロップアウト: derive_seed(seed, "dropout", e)
エポック単位で乱数を作り直すため、途中のチェックポイントから再開しても
中断なしの学習とビット単位で同じ結果になります。
チェックポイント形式:
  "VTCK" | u32 version | u64 ヘッダ長 | ヘッダ（UTF-8 JSON）| テンソル本体（リトルエンディアン連結）
ヘッダにテンソルの dtype・shape・オフセット、本体の SHA-256、設定フィンガープリントを持ちます。
"""

import copy
import dataclasses
import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from astp import LayerASTP, astp_init
from config import Config, derive_seed
from diffnet import init_diffnet
from errors import (CheckpointMismatchError, ConfigurationError, ContractViolation,
                    FormatError, InputError)
from models import Checkpoint, EpochRecord, LayerStack, PairExample, TrainConfig


# ============================================================
# 損失・学習率
# ============================================================

def masked_bce(pred: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """マスク付きBCE: サンプル内はマスク属性の平均、バッチはサンプル平均"""
    single = pred.dim() == 1
    if single:
        pred, labels, mask = pred.unsqueeze(0), labels.unsqueeze(0), mask.unsqueeze(0)
    if pred.shape != labels.shape or pred.shape != mask.shape:
        raise ContractViolation(
            f"pred / labels / mask の形状が一致しません: {tuple(pred.shape)}, {tuple(labels.shape)}, {tuple(mask.shape)}")
    labels = labels.to(pred.dtype)
    active = mask > 0
    counts = active.sum(dim=1)
    if bool((counts == 0).any()):
        raise InputError("マスクが空のサンプルは損失に渡せません")
    p = pred.clamp(Config.BCE_CLAMP, 1.0 - Config.BCE_CLAMP)
    bce = -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p))
    bce = torch.where(active, bce, torch.zeros_like(bce))
    per_sample = bce.sum(dim=1) / counts.to(pred.dtype)
    return per_sample.mean()


def cosine_lr(step: int, total_steps: int, lr0: float, eta_min: float = Config.ETA_MIN) -> float:
    """コサインアニーリング。step=0 で lr0、step=total_steps で eta_min（いずれも厳密）"""
    if total_steps < 1:
        raise ConfigurationError(f"total_steps は1以上が必要です: {total_steps}")
    if step < 0 or step > total_steps:
        raise InputError(f"step は [0, {total_steps}] の範囲が必要です: {step}")
    w = (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
    return lr0 * w + eta_min * (1.0 - w)


# ============================================================
# モデル
# ============================================================

class PairScorer(nn.Module):
    """ASTP（両発話で共有）+ Diff-Net"""

    def __init__(self, astp: LayerASTP, diffnet: nn.Module):
        super().__init__()
        self.astp = astp
        self.diffnet = diffnet

    def embed_pair(self, stacks_a: torch.Tensor, stacks_b: torch.Tensor) -> torch.Tensor:
        batch = stacks_a.shape[0]
        e = self.astp(torch.cat([stacks_a, stacks_b], dim=0))
        return torch.cat([e[:batch], e[batch:]], dim=1)

    def forward(self, stacks_a: torch.Tensor, stacks_b: torch.Tensor) -> torch.Tensor:
        return self.diffnet(self.embed_pair(stacks_a, stacks_b))


def validate_train_config(config: TrainConfig) -> None:
    if config.epochs < 1:
        raise ConfigurationError(f"epochs は1以上が必要です: {config.epochs}")
    if config.batch_size < 2:
        raise ConfigurationError(f"batch_size は2以上が必要です（バッチ正規化）: {config.batch_size}")
    if config.learning_rate <= 0:
        raise ConfigurationError(f"learning_rate は正の値が必要です: {config.learning_rate}")
    if config.eta_min < 0 or config.weight_decay < 0:
        raise ConfigurationError("eta_min / weight_decay は0以上が必要です")
    if config.variant not in Config.VARIANTS:
        raise ConfigurationError(f"未知のバリアントです: {config.variant}（{' / '.join(Config.VARIANTS)}）")


def build_model(config: TrainConfig, num_layers: int, dim: int) -> PairScorer:
    """設定からモデルを組み立てる

    nn.Linear の既定初期化がグローバル乱数を引くため、構築は fork_rng の中で行い
    呼び出し側の乱数状態を変えない（重みは seed から初期化し直す）。
    """
    validate_train_config(config)
    with torch.random.fork_rng(devices=[]):
        astp = astp_init(dim, config.astp_heads, config.astp_attention_dim or None,
                         seed=derive_seed(config.seed, "astp"), dropout=config.astp_dropout)
        diffnet = init_diffnet(config.variant, 2 * astp.output_dim,
                               seed=derive_seed(config.seed, "diffnet"),
                               reduction=config.se_reduction, dropout=config.ffn_dropout)
    model = PairScorer(astp, diffnet)
    if not config.astp_trainable:
        for p in model.astp.parameters():
            p.requires_grad_(False)
    return model


def build_optimizer(model: PairScorer, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=config.learning_rate, betas=Config.ADAM_BETAS,
                             eps=Config.ADAM_EPS, weight_decay=config.weight_decay)


def build_scheduler(optimizer, config: TrainConfig, total_steps: int):
    lr0 = config.learning_rate
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: cosine_lr(min(step, total_steps), total_steps, lr0, config.eta_min) / lr0)


def compute_fingerprint(config: TrainConfig, registry: Sequence[str]) -> str:
    """学習設定 + 記述子レジストリのハッシュ"""
    text = json.dumps({"train_config": dataclasses.asdict(config), "registry": list(registry)},
                      sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ============================================================
# 特徴量の読み込み
# ============================================================

def lookup_stack(provider, utterance_id: str) -> LayerStack:
    """provider は get(uid) -> LayerStack を持つもの（FeatureStore や dict）"""
    stack = provider.get(utterance_id)
    if stack is None:
        raise InputError(f"特徴量がありません: {utterance_id}")
    return stack


def load_feature_bank(pairs: Sequence[PairExample], provider) -> Tuple[List[str], torch.Tensor]:
    """ペアに現れる発話の LayerStack を1つのテンソル (U, L, D) にまとめる"""
    uids: List[str] = []
    index: Dict[str, int] = {}
    for p in pairs:
        for uid in (p.utt_a, p.utt_b):
            if uid not in index:
                index[uid] = len(uids)
                uids.append(uid)
    stacks = [lookup_stack(provider, uid).values for uid in uids]
    shapes = {s.shape for s in stacks}
    if len(shapes) != 1:
        raise ContractViolation(f"LayerStack の形状が揃っていません: {sorted(shapes)}")
    bank = torch.from_numpy(np.stack([np.asarray(s, dtype=np.float32) for s in stacks]))
    return uids, bank


def _pair_tensors(pairs: Sequence[PairExample], uids: List[str]):
    index = {uid: i for i, uid in enumerate(uids)}
    idx_a = torch.tensor([index[p.utt_a] for p in pairs], dtype=torch.long)
    idx_b = torch.tensor([index[p.utt_b] for p in pairs], dtype=torch.long)
    labels = torch.from_numpy(np.stack([p.labels for p in pairs]).astype(np.float32))
    mask = torch.from_numpy(np.stack([p.mask for p in pairs]).astype(np.float32))
    return idx_a, idx_b, labels, mask


def epoch_batches(n: int, batch_size: int, generator: torch.Generator) -> List[torch.Tensor]:
    """シャッフルしたミニバッチ。末尾がサイズ1になる場合は捨てる"""
    perm = torch.randperm(n, generator=generator)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) == 1:
        batches.pop()
    return batches


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size) - (1 if n % batch_size == 1 else 0)


# ============================================================
# 評価（検証）
# ============================================================

@torch.no_grad()
def evaluate_loss_acc(model: PairScorer, bank: torch.Tensor, pairs_t, batch_size: int,
                      threshold: float = Config.DECISION_THRESHOLD) -> Tuple[float, float]:
    """評価モードで平均損失と試行単位の正解率（%）を返す"""
    idx_a, idx_b, labels, mask = pairs_t
    model.eval()
    loss_sum, correct, trials = 0.0, 0, 0
    n = len(idx_a)
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        probs = model(bank[idx_a[sl]], bank[idx_b[sl]])
        loss_sum += masked_bce(probs, labels[sl], mask[sl]).item() * probs.shape[0]
        active = mask[sl] > 0
        predicted = (probs >= threshold).to(labels.dtype)
        correct += int(((predicted == labels[sl]) & active).sum())
        trials += int(active.sum())
    return loss_sum / n, 100.0 * correct / trials


# ============================================================
# 学習ループ
# ============================================================

def _snapshot(model: PairScorer, optimizer, scheduler, config: TrainConfig,
              registry: Sequence[str], num_layers: int, dim: int, step: int, epoch: int,
              provenance: Optional[Dict[str, str]]) -> Checkpoint:
    return Checkpoint(
        config=dataclasses.replace(config),
        registry=list(registry),
        num_layers=num_layers,
        dim=dim,
        astp_state=copy.deepcopy(model.astp.state_dict()),
        diffnet_state=copy.deepcopy(model.diffnet.state_dict()),
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
        scheduler_state=copy.deepcopy(scheduler.state_dict()),
        step=step,
        epoch=epoch,
        fingerprint=compute_fingerprint(config, registry),
        provenance=dict(provenance or {}),
    )


def train(config: TrainConfig,
          train_pairs: Sequence[PairExample],
          val_pairs: Sequence[PairExample],
          provider,
          registry: Optional[Sequence[str]] = None,
          resume: Optional[Checkpoint] = None,
          force: bool = False,
          stop_after: Optional[int] = None,
          checkpoint_dir: Optional[str] = None,
          provenance: Optional[Dict[str, str]] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None,
          verbose: bool = True) -> Tuple[Checkpoint, List[EpochRecord]]:
    """学習を実行し、最終チェックポイントとこの呼び出しで走ったエポックのログを返す"""
    validate_train_config(config)
    registry = list(registry) if registry is not None else list(Config.DESCRIPTORS)
    if len(train_pairs) < 2:
        raise InputError(f"学習ペアは2件以上が必要です（{len(train_pairs)}件）")

    uids, bank = load_feature_bank(list(train_pairs) + list(val_pairs), provider)
    num_layers, dim = int(bank.shape[1]), int(bank.shape[2])
    train_t = _pair_tensors(train_pairs, uids)
    val_t = _pair_tensors(val_pairs, uids) if val_pairs else None

    n = len(train_pairs)
    if n % config.batch_size == 1 and verbose:
        print(f"  ⚠️ 末尾のミニバッチがサイズ1になるため各エポックで1件を除外します（{n}件）")
    total_steps = config.epochs * steps_per_epoch(n, config.batch_size)

    model = build_model(config, num_layers, dim)
    optimizer = build_optimizer(model, config)
    scheduler = build_scheduler(optimizer, config, total_steps)
    step, start_epoch = 0, 1
    fingerprint = compute_fingerprint(config, registry)

    if resume is not None:
        if resume.fingerprint != fingerprint and not force:
            raise CheckpointMismatchError(
                "再開元チェックポイントの設定フィンガープリントが一致しません（--force で無視）")
        if (resume.num_layers, resume.dim) != (num_layers, dim):
            raise ContractViolation(
                f"チェックポイントの次元 ({resume.num_layers}, {resume.dim}) が特徴量 ({num_layers}, {dim}) と一致しません")
        model.astp.load_state_dict(resume.astp_state)
        model.diffnet.load_state_dict(resume.diffnet_state)
        optimizer.load_state_dict(resume.optimizer_state)
        scheduler.load_state_dict(resume.scheduler_state)
        step, start_epoch = resume.step, resume.epoch + 1
        if verbose:
            print(f"  📖 エポック {resume.epoch} のチェックポイントから再開します")

    log: List[EpochRecord] = []
    checkpoint = _snapshot(model, optimizer, scheduler, config, registry,
                           num_layers, dim, step, start_epoch - 1, provenance)
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)

    with torch.random.fork_rng(devices=[]):
        for epoch in range(start_epoch, last_epoch + 1):
            torch.manual_seed(derive_seed(config.seed, "dropout", epoch))
            shuffle = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle", epoch))
            idx_a, idx_b, labels, mask = train_t

            model.train()
            loss_sum, seen, lr = 0.0, 0, optimizer.param_groups[0]["lr"]
            for batch in epoch_batches(n, config.batch_size, shuffle):
                probs = model(bank[idx_a[batch]], bank[idx_b[batch]])
                loss = masked_bce(probs, labels[batch], mask[batch])
                if not torch.isfinite(loss):
                    raise InputError(
                        f"損失が非有限になりました（epoch={epoch}, step={step}, lr={lr:.3e}, loss={loss.item()}）")
                optimizer.zero_grad()
                loss.backward()
                lr = optimizer.param_groups[0]["lr"]
                optimizer.step()
                scheduler.step()
                step += 1
                loss_sum += loss.item() * len(batch)
                seen += len(batch)

            record = EpochRecord(epoch=epoch, step=step, lr=lr, train_loss=loss_sum / seen)
            if val_t is not None:
                record.val_loss, record.val_acc = evaluate_loss_acc(model, bank, val_t, Config.EVAL_BATCH_SIZE)
            log.append(record)
            if verbose:
                val = "" if record.val_loss is None else \
                    f"  val_loss={record.val_loss:.4f}  val_acc={record.val_acc:.2f}%"
                print(f"  epoch {epoch:>3}/{config.epochs}  step={step}  lr={lr:.3e}  "
                      f"train_loss={record.train_loss:.4f}{val}")
            if on_epoch is not None:
                on_epoch(record)

            checkpoint = _snapshot(model, optimizer, scheduler, config, registry,
                                   num_layers, dim, step, epoch, provenance)
            if checkpoint_dir:
                save_checkpoint(checkpoint, str(Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt"))

    return checkpoint, log


def model_from_checkpoint(ckpt: Checkpoint) -> PairScorer:
    """チェックポイントから評価モードのモデルを復元する"""
    model = build_model(ckpt.config, ckpt.num_layers, ckpt.dim)
    model.astp.load_state_dict(ckpt.astp_state)
    model.diffnet.load_state_dict(ckpt.diffnet_state)
    model.eval()
    return model


def epoch_record_json(record: EpochRecord) -> str:
    return json.dumps({"record": "epoch", **dataclasses.asdict(record)}, ensure_ascii=False)


# ============================================================
# チェックポイント入出力
# ============================================================

CKPT_MAGIC = b"VTCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _encode_tree(obj: Any, tensors: List[torch.Tensor]) -> Any:
    if isinstance(obj, torch.Tensor):
        tensors.append(obj)
        return {"__tensor__": len(tensors) - 1}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: _encode_tree(v, tensors) for k, v in obj.items()}
        return {"__items__": [[_encode_tree(k, tensors), _encode_tree(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode_tree(v, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_encode_tree(v, tensors) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if obj is None or isinstance(obj, (str, int, float, bool)):
        return obj
    raise FormatError(f"チェックポイントに保存できない型です: {type(obj).__name__}")


def _decode_tree(obj: Any, tensors: List[torch.Tensor]) -> Any:
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            return tensors[obj["__tensor__"]]
        if set(obj) == {"__tuple__"}:
            return tuple(_decode_tree(v, tensors) for v in obj["__tuple__"])
        if set(obj) == {"__items__"}:
            return {_decode_tree(k, tensors): _decode_tree(v, tensors) for k, v in obj["__items__"]}
        return {k: _decode_tree(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_tree(v, tensors) for v in obj]
    return obj


def encode_checkpoint(c: Checkpoint) -> bytes:
    tensors: List[torch.Tensor] = []
    meta = _encode_tree({
        "config": dataclasses.asdict(c.config),
        "registry": list(c.registry),
        "num_layers": c.num_layers,
        "dim": c.dim,
        "step": c.step,
        "epoch": c.epoch,
        "fingerprint": c.fingerprint,
        "provenance": dict(c.provenance),
        "astp_state": c.astp_state,
        "diffnet_state": c.diffnet_state,
        "optimizer_state": c.optimizer_state,
        "scheduler_state": c.scheduler_state,
    }, tensors)

    index, chunks, offset = [], [], 0
    for t in tensors:
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise FormatError(f"未対応の dtype です: {t.dtype}")
        data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    header = json.dumps({"meta": meta, "tensors": index,
                         "payload_sha256": hashlib.sha256(payload).hexdigest()},
                        ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + payload


def decode_checkpoint(data: bytes, source: str = "<bytes>",
                      expected_fingerprint: Optional[str] = None, force: bool = False) -> Checkpoint:
    if len(data) < _CKPT_HEAD.size:
        raise FormatError(f"チェックポイントのヘッダが不完全です: {source}")
    magic, version, header_len = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"チェックポイントではありません（magic={magic!r}）: {source}")
    if version != CKPT_VERSION:
        raise FormatError(f"未対応のチェックポイント版です（{version}）: {source}")
    start = _CKPT_HEAD.size
    if len(data) < start + header_len:
        raise FormatError(f"チェックポイントのヘッダが途中で切れています: {source}")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"チェックポイントのヘッダを解釈できません: {source}") from e
    payload = data[start + header_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise FormatError(f"チェックポイント本体のハッシュが一致しません（破損・切り詰め）: {source}")

    tensors = []
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        tensors.append(torch.from_numpy(array.astype(dtype.newbyteorder("="))))
    meta = _decode_tree(header["meta"], tensors)

    try:
        config = TrainConfig(**meta["config"])
    except TypeError as e:
        raise FormatError(f"チェックポイントの学習設定が不正です: {source}") from e
    ckpt = Checkpoint(
        config=config,
        registry=meta["registry"],
        num_layers=meta["num_layers"],
        dim=meta["dim"],
        astp_state=meta["astp_state"],
        diffnet_state=meta["diffnet_state"],
        optimizer_state=meta["optimizer_state"],
        scheduler_state=meta["scheduler_state"],
        step=meta["step"],
        epoch=meta["epoch"],
        fingerprint=meta["fingerprint"],
        provenance=meta.get("provenance", {}),
    )
    if not force:
        actual = compute_fingerprint(ckpt.config, ckpt.registry)
        if ckpt.fingerprint != actual:
            raise CheckpointMismatchError(f"フィンガープリントが設定と一致しません（--force で無視）: {source}")
        if expected_fingerprint is not None and ckpt.fingerprint != expected_fingerprint:
            raise CheckpointMismatchError(f"フィンガープリントが期待値と一致しません: {source}")
    return ckpt


def save_checkpoint(c: Checkpoint, path: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_checkpoint(c))


def load_checkpoint(path: str, expected_fingerprint: Optional[str] = None,
                    force: bool = False) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise InputError(f"チェックポイントが見つかりません: {path}")
    return decode_checkpoint(p.read_bytes(), str(path), expected_fingerprint, force)
