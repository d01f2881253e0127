"""Post-norm transformer encoder over windows of visit vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numcore as nc
from .encoders import ConfigurationError, positional_encoding


@dataclass
class TransformerConfig:
    layers: int = 4
    heads: int = 8
    d_h: int = 512
    ffn_dim: int = 1024
    window: int = 32

    def __post_init__(self):
        if self.d_h % self.heads:
            raise ConfigurationError(f"d_h={self.d_h} is not divisible by heads={self.heads}")

    @property
    def d_k(self) -> int:
        return self.d_h // self.heads


def _uniform_fan_in(rows: int, cols: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(rows)
    return nn.Parameter(torch.empty(rows, cols).uniform_(-bound, bound))


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = _uniform_fan_in(d_in, d_out)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        y = nc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return nc.layernorm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_h: int, heads: int):
        super().__init__()
        if d_h % heads:
            raise ConfigurationError(f"d_h={d_h} is not divisible by heads={heads}")
        self.heads = heads
        self.d_k = d_h // heads
        self.w_q = _uniform_fan_in(d_h, d_h)
        self.w_k = _uniform_fan_in(d_h, d_h)
        self.w_v = _uniform_fan_in(d_h, d_h)
        self.w_o = _uniform_fan_in(d_h, d_h)

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.d_k).transpose(1, 2)  # [B, heads, L, d_k]

    def attention_weights(self, h: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self._split(nc.matmul(h, self.w_q))
        k = self._split(nc.matmul(h, self.w_k))
        scores = nc.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.d_k)
        key_mask = None if mask is None else mask[:, None, None, :]
        return nc.softmax(scores, -1, key_mask)

    def forward(self, h: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``h``: [B, L, d_h]; ``mask``: [B, L] bool, True at real (non-padding) positions."""
        squeeze = h.dim() == 2
        if squeeze:
            h = h[None]
            mask = None if mask is None else mask[None]
        attn = self.attention_weights(h, mask)
        v = self._split(nc.matmul(h, self.w_v))
        heads = nc.matmul(attn, v)  # [B, heads, L, d_k]
        b, _, l, _ = heads.shape
        out = nc.matmul(heads.transpose(1, 2).reshape(b, l, -1), self.w_o)
        return out[0] if squeeze else out


class EncoderLayer(nn.Module):
    """``H' = LN(H + MHA(H))``, ``H_out = LN(H' + FFN(H'))``."""

    def __init__(self, d_h: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_h, heads)
        self.norm1 = LayerNorm(d_h)
        self.ff1 = Linear(d_h, ffn_dim)
        self.ff2 = Linear(ffn_dim, d_h)
        self.norm2 = LayerNorm(d_h)

    def forward(self, h, mask=None):
        h = self.norm1(h + self.attn(h, mask))
        return self.norm2(h + self.ff2(torch.relu(self.ff1(h))))


class SequenceEncoder(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_h, cfg.heads, cfg.ffn_dim) for _ in range(cfg.layers))
        self.register_buffer("pe", positional_encoding(cfg.window, cfg.d_h), persistent=False)

    def forward(self, h0: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Add positions and run the stack. ``h0``: [B, L, d_h] with L <= window."""
        if h0.shape[-2] == 0:
            raise nc.ContractError("cannot encode an empty window")
        if h0.shape[-2] > self.cfg.window:
            raise nc.ContractError(f"window of {h0.shape[-2]} visits exceeds w={self.cfg.window}")
        h = h0 + self.pe[: h0.shape[-2]].to(h0.dtype)
        for layer in self.layers:
            h = layer(h, mask)
        return h
