#!/usr/bin/env python3
"""
Diff-Net: ペア埋め込み e_A || e_B から34属性の確率を出す比較ヘッド

【編集ガイド】
バリアントは2種類（幅は config.py で変更）:
  ffn        [FC -> BN -> ReLU -> Dropout(0.3)] x 4 (512, 256, 128, 64) -> FC(34) -> sigmoid
  se_res_ffn SE-ResNetブロック x 4 (1024, 1024, 512, 256) -> BN -> FC(192) -> ReLU -> FC(64) -> FC(34) -> sigmoid
SE-ResNetブロック:
  main     = SE(BN(FC(ReLU(BN(FC(x))))))
  shortcut = x（次元が同じ）/ BN(FC(x))（次元が変わる）
  out      = ReLU(main + shortcut)
初期化: 全結合の重みは U(+-1/sqrt(fan_in))、バイアスは0。BNは scale=1, shift=0, 平均0, 分散1。
"""

import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from config import Config, canonical_variant
from errors import ConfigurationError, ContractViolation, InputError


def _bn(dim: int, eps: float) -> nn.BatchNorm1d:
    return nn.BatchNorm1d(dim, eps=eps, momentum=Config.BN_MOMENTUM)


class SEGate(nn.Module):
    """x * sigmoid(FC2(ReLU(FC1(x))))、FC1: d -> d/r, FC2: d/r -> d"""

    def __init__(self, dim: int, reduction: int = Config.SE_REDUCTION):
        super().__init__()
        if reduction < 1 or dim % reduction != 0:
            raise ConfigurationError(f"SE の縮小率 {reduction} は次元 {dim} を割り切る必要があります")
        self.dim = dim
        self.reduction = reduction
        self.fc1 = nn.Linear(dim, dim // reduction)
        self.fc2 = nn.Linear(dim // reduction, dim)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class SEResBlock(nn.Module):
    """SE-ResNet ブロック（全結合版）"""

    def __init__(self, d_in: int, d_out: int, reduction: int = Config.SE_REDUCTION,
                 bn_eps: float = Config.BN_EPS):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.fc1 = nn.Linear(d_in, d_out)
        self.bn1 = _bn(d_out, bn_eps)
        self.fc2 = nn.Linear(d_out, d_out)
        self.bn2 = _bn(d_out, bn_eps)
        self.se = SEGate(d_out, reduction)
        if d_in == d_out:
            self.shortcut = None
        else:
            self.shortcut = nn.Sequential(nn.Linear(d_in, d_out), _bn(d_out, bn_eps))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        main = self.se(self.bn2(self.fc2(torch.relu(self.bn1(self.fc1(x))))))
        short = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(main + short)


class FFNDiffNet(nn.Module):
    """FFN 版 Diff-Net"""
    variant = "ffn"

    def __init__(self, input_dim: int, widths: Sequence[int] = tuple(Config.FFN_WIDTHS),
                 dropout: float = Config.FFN_DROPOUT,
                 num_outputs: int = Config.NUM_ATTRIBUTES,
                 bn_eps: float = Config.BN_EPS):
        super().__init__()
        self.input_dim = input_dim
        blocks: List[nn.Module] = []
        d = input_dim
        for w in widths:
            blocks += [nn.Linear(d, w), _bn(w, bn_eps), nn.ReLU(), nn.Dropout(dropout)]
            d = w
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Linear(d, num_outputs)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.blocks(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _probabilities(self.logits(x))


class SEResFFNDiffNet(nn.Module):
    """SE-ResFFN 版 Diff-Net（ドロップアウトなし）"""
    variant = "se_res_ffn"

    def __init__(self, input_dim: int, widths: Sequence[int] = tuple(Config.SE_RES_WIDTHS),
                 head_widths: Sequence[int] = tuple(Config.SE_RES_HEAD_WIDTHS),
                 reduction: int = Config.SE_REDUCTION,
                 num_outputs: int = Config.NUM_ATTRIBUTES,
                 bn_eps: float = Config.BN_EPS):
        super().__init__()
        if len(head_widths) != 2:
            raise ConfigurationError(f"head_widths は2要素が必要です: {list(head_widths)}")
        self.input_dim = input_dim
        blocks: List[nn.Module] = []
        d = input_dim
        for w in widths:
            blocks.append(SEResBlock(d, w, reduction, bn_eps))
            d = w
        self.blocks = nn.Sequential(*blocks)
        self.norm = _bn(d, bn_eps)
        self.head_fc1 = nn.Linear(d, head_widths[0])
        self.head_fc2 = nn.Linear(head_widths[0], head_widths[1])
        self.out = nn.Linear(head_widths[1], num_outputs)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.blocks(x))
        h = self.head_fc2(torch.relu(self.head_fc1(h)))
        return self.out(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _probabilities(self.logits(x))


def _probabilities(logits: torch.Tensor) -> torch.Tensor:
    # float の飽和で 0 / 1 ちょうどにならないよう開区間に収める
    info = torch.finfo(logits.dtype)
    return torch.sigmoid(logits).clamp(min=info.tiny, max=1.0 - info.eps)


def reset_parameters(module: nn.Module, seed: int) -> None:
    """登録順に全結合を U(+-1/sqrt(fan_in)) で初期化し、BN を既定状態に戻す"""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=g)
                m.bias.zero_()
            elif isinstance(m, nn.BatchNorm1d):
                m.reset_parameters()


def init_diffnet(variant: str = "ffn", input_dim: int = 4 * Config.ENCODER_DIM,
                 seed: int = Config.SEED, widths: Optional[Sequence[int]] = None,
                 head_widths: Optional[Sequence[int]] = None,
                 reduction: int = Config.SE_REDUCTION,
                 dropout: float = Config.FFN_DROPOUT,
                 num_outputs: int = Config.NUM_ATTRIBUTES,
                 bn_eps: float = Config.BN_EPS) -> nn.Module:
    """バリアント名から Diff-Net を生成し、シード固定で初期化する"""
    if input_dim < 1:
        raise ConfigurationError(f"input_dim は1以上が必要です: {input_dim}")
    variant = canonical_variant(variant)
    if variant == "ffn":
        net = FFNDiffNet(input_dim, widths or Config.FFN_WIDTHS, dropout, num_outputs, bn_eps)
    elif variant == "se_res_ffn":
        net = SEResFFNDiffNet(input_dim, widths or Config.SE_RES_WIDTHS,
                              head_widths or Config.SE_RES_HEAD_WIDTHS,
                              reduction, num_outputs, bn_eps)
    else:
        raise ConfigurationError(f"未知のバリアントです: {variant}（{' / '.join(Config.VARIANTS)}）")
    reset_parameters(net, seed)
    return net


def _run(module: nn.Module, x: torch.Tensor, mode: str) -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode は train / eval のいずれかです: {mode}")
    if mode == "train" and x.shape[0] < 2:
        raise InputError("学習モードのバッチ正規化にはバッチサイズ2以上が必要です")
    previous = module.training
    module.train(mode == "train")
    try:
        return module(x)
    finally:
        module.train(previous)


def diffnet_forward(e_pair: torch.Tensor, params: nn.Module, mode: str = "eval") -> torch.Tensor:
    """ペア埋め込み (B, input_dim) または (input_dim,) から確率ベクトルを返す"""
    single = e_pair.dim() == 1
    x = e_pair.unsqueeze(0) if single else e_pair
    if x.dim() != 2 or x.shape[1] != params.input_dim:
        raise ContractViolation(
            f"ペア埋め込みの次元が一致しません: {tuple(e_pair.shape)}（期待 {params.input_dim}）")
    out = _run(params, x, mode)
    return out[0] if single else out


def se_gate(x: torch.Tensor, gate: SEGate, r: int) -> torch.Tensor:
    """SE ゲートを適用する"""
    if gate.reduction != r:
        raise ContractViolation(f"SE の縮小率が一致しません: {gate.reduction} != {r}")
    if x.shape[-1] != gate.dim:
        raise ContractViolation(f"SE ゲートの入力次元が一致しません: {x.shape[-1]} != {gate.dim}")
    return gate(x)


def se_res_block(x: torch.Tensor, block: SEResBlock, d_out: int, mode: str = "eval") -> torch.Tensor:
    """SE-ResNet ブロック1段を適用する"""
    if block.d_out != d_out or x.dim() != 2 or x.shape[1] != block.d_in:
        raise ContractViolation(
            f"ブロックの形状が一致しません: 入力 {tuple(x.shape)}, d_in={block.d_in}, d_out={block.d_out}")
    return _run(block, x, mode)
