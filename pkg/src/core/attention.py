"""
多头交叉注意力，置信度模块与模态挖掘共用
"""

from typing import Optional

import torch
import torch.nn as nn
from einops.layers.torch import Rearrange

from core.errors import ConfigurationError, InputError


class MultiHeadCrossAttention(nn.Module):
    """
    缩放点积注意力，query 与 context 为两条独立序列

    query (B, Nq, D) 提供查询，context (B, Nk, D) 提供键和值
    """

    def __init__(self, embed_dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if embed_dim % heads:
            raise ConfigurationError(f"embed_dim {embed_dim} is not divisible by heads {heads}")

        self.heads = heads
        self.head_dim = embed_dim // heads
        self.scale = self.head_dim ** -0.5

        self.to_q = nn.Linear(embed_dim, embed_dim)
        self.to_k = nn.Linear(embed_dim, embed_dim)
        self.to_v = nn.Linear(embed_dim, embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)
        self.dropout = nn.Dropout(dropout)

        self.split_heads = Rearrange("b n (h d) -> b h n d", h=heads)
        self.merge_heads = Rearrange("b h n d -> b n (h d)")

    def attention_weights(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """注意力图 (B, heads, Nq, Nk)"""
        if context.shape[1] == 0:
            raise InputError("attention context is empty")
        q = self.split_heads(self.to_q(query))
        k = self.split_heads(self.to_k(context))
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        return dots.softmax(dim=-1)

    def forward(
        self,
        query: torch.Tensor,
        context: torch.Tensor,
        dropout_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Args:
            query: (B, Nq, D)
            context: (B, Nk, D)
            dropout_mask: 可广播到注意力图的外部 dropout 掩码（已按保留率缩放）；
                给定时替代模块自身的 dropout

        Returns:
            torch.Tensor: (B, Nq, D)
        """
        attn = self.attention_weights(query, context)
        attn = self.dropout(attn) if dropout_mask is None else attn * dropout_mask
        v = self.split_heads(self.to_v(context))
        out = self.merge_heads(torch.matmul(attn, v))
        return self.proj(out)
