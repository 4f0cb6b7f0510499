#!/usr/bin/env python3
"""
層方向のマルチヘッド注意統計プーリング（ASTP）

【編集ガイド】
入力は発話ごとの層別埋め込み（L x D）。チャネルをヘッド数 H で連続分割し、
ヘッドごとに層方向の注意重みで加重平均・加重標準偏差を取って連結します（出力 2D 次元）。
  スコア  e_l = v_h . tanh(W_h x_l + b_h) + k_h
  重み    a   = softmax_l(e)
  平均    mu  = sum_l a_l x_l
  標準偏差 sd = sqrt(max(sum_l a_l x_l^2 - mu^2, eps))
ドロップアウトは tanh の直後と出力埋め込みの2箇所（学習モードのみ）。
"""

import math
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from config import Config
from errors import ConfigurationError, ContractViolation, InputError
from models import LayerStack


class LayerASTP(nn.Module):
    """層方向 ASTP

    weight: (H, A, D/H), bias: (H, A), vector: (H, A), offset: (H,)
    """

    def __init__(self, dim: int, heads: int = Config.ASTP_HEADS,
                 attention_dim: Optional[int] = None,
                 dropout: float = Config.ASTP_DROPOUT,
                 eps: float = Config.ASTP_EPS,
                 use_offset: bool = True,
                 nonlinearity: str = "tanh"):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ConfigurationError(f"ヘッド数 {heads} は次元 {dim} を割り切る必要があります")
        if not 0.0 <= dropout < 1.0:
            raise ConfigurationError(f"dropout は [0, 1) が必要です: {dropout}")
        if eps <= 0:
            raise ConfigurationError(f"eps は正の値が必要です: {eps}")
        if nonlinearity not in ("tanh", "relu"):
            raise ConfigurationError(f"未知の活性化関数です: {nonlinearity}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.attention_dim = attention_dim or self.head_dim
        if self.attention_dim < 1:
            raise ConfigurationError(f"attention_dim は1以上が必要です: {attention_dim}")
        self.eps = eps
        self.nonlinearity = nonlinearity

        self.weight = nn.Parameter(torch.empty(heads, self.attention_dim, self.head_dim))
        self.bias = nn.Parameter(torch.zeros(heads, self.attention_dim))
        self.vector = nn.Parameter(torch.empty(heads, self.attention_dim))
        if use_offset:
            self.offset = nn.Parameter(torch.zeros(heads))
        else:
            self.register_buffer("offset", torch.zeros(heads))
        self.hidden_dropout = nn.Dropout(dropout)
        self.output_dropout = nn.Dropout(dropout)

    @property
    def output_dim(self) -> int:
        return 2 * self.dim

    def reset_parameters(self, seed: int) -> None:
        """W ~ U(+-1/sqrt(D/H)), v ~ U(+-1/sqrt(A)), バイアス・オフセットは0"""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(self.head_dim)
            self.weight.uniform_(-bound, bound, generator=g)
            bound = 1.0 / math.sqrt(self.attention_dim)
            self.vector.uniform_(-bound, bound, generator=g)
            self.bias.zero_()
            self.offset.zero_()

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """層方向の注意重み (B, L, H)"""
        B, L, _ = x.shape
        xh = x.reshape(B, L, self.heads, self.head_dim)
        hidden = torch.einsum("blhd,had->blha", xh, self.weight) + self.bias
        hidden = torch.tanh(hidden) if self.nonlinearity == "tanh" else torch.relu(hidden)
        hidden = self.hidden_dropout(hidden)
        scores = torch.einsum("blha,ha->blh", hidden, self.vector) + self.offset
        return torch.softmax(scores, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, D) -> (B, 2D)"""
        if x.dim() != 3 or x.shape[2] != self.dim:
            raise ContractViolation(f"入力形状は (B, L, {self.dim}) が必要です: {tuple(x.shape)}")
        B, L, _ = x.shape
        alpha = self.attention(x)
        xh = x.reshape(B, L, self.heads, self.head_dim)
        mean = torch.einsum("blh,blhd->bhd", alpha, xh)
        second = torch.einsum("blh,blhd->bhd", alpha, xh * xh)
        std = torch.sqrt(torch.clamp(second - mean * mean, min=self.eps))
        out = torch.cat([mean.reshape(B, self.dim), std.reshape(B, self.dim)], dim=1)
        return self.output_dropout(out)


def astp_init(dim: int, heads: int = Config.ASTP_HEADS, attention_dim: Optional[int] = None,
              seed: int = Config.SEED, dropout: float = Config.ASTP_DROPOUT,
              eps: float = Config.ASTP_EPS, use_offset: bool = True,
              nonlinearity: str = "tanh") -> LayerASTP:
    """シード固定で初期化した LayerASTP を返す"""
    module = LayerASTP(dim, heads, attention_dim, dropout, eps, use_offset, nonlinearity)
    module.reset_parameters(seed)
    return module


def _as_batch(stack: Union[LayerStack, np.ndarray, torch.Tensor],
              dtype: torch.dtype) -> Tuple[torch.Tensor, bool]:
    if isinstance(stack, LayerStack):
        stack = stack.values
    x = torch.as_tensor(stack)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    x = x.to(dtype)
    if not torch.isfinite(x).all():
        raise InputError("LayerStack に非有限値が含まれています")
    return x, single


def astp_forward(stack: Union[LayerStack, np.ndarray, torch.Tensor], params: LayerASTP,
                 mode: str = "eval") -> torch.Tensor:
    """LayerStack（または (B, L, D) テンソル）から話者埋め込みを計算する

    単一の (L, D) 入力には (2D,) を返す。モジュールの train/eval 状態は呼び出し後に戻す。
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode は train / eval のいずれかです: {mode}")
    x, single = _as_batch(stack, params.weight.dtype)
    previous = params.training
    params.train(mode == "train")
    try:
        out = params(x)
    finally:
        params.train(previous)
    return out[0] if single else out
