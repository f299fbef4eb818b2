"""
共享视觉编码器

把每个模态图像编码为一个类别 token 加上 patch token 序列，三个模态共享同一组参数
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn as nn
from einops.layers.torch import Rearrange

from config.settings import EncoderConfig
from core.attention import MultiHeadCrossAttention
from core.errors import ConfigurationError, InputError
from core.types import Modality

logger = logging.getLogger(__name__)


@dataclass
class TokenFeatures:
    """
    单个模态的编码结果

    cls: (B, D)；patches: (B, M, D)
    """
    cls: torch.Tensor
    patches: torch.Tensor
    modality: Modality

    @property
    def tokens(self) -> torch.Tensor:
        """类别 token 在前的完整序列 (B, 1+M, D)"""
        return torch.cat([self.cls.unsqueeze(1), self.patches], dim=1)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[1]

    @classmethod
    def from_tokens(cls, tokens: torch.Tensor, modality: Modality) -> "TokenFeatures":
        return cls(cls=tokens[:, 0], patches=tokens[:, 1:], modality=modality)


def as_three_channels(images: torch.Tensor) -> torch.Tensor:
    """
    单通道图像复制为三通道，输入 (B, C, H, W)
    """
    if images.shape[1] == 1:
        return images.expand(-1, 3, -1, -1).contiguous()
    if images.shape[1] != 3:
        raise ConfigurationError(f"expected 1 or 3 channels, got {images.shape[1]}")
    return images


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadCrossAttention(dim, heads, dropout=dropout)
        self.mlp = FeedForward(dim, mlp_dim, dropout=dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.norm(x)
        x = self.attn(normed, normed) + x
        x = self.mlp(x) + x
        return x


class TokenEncoder(nn.Module):
    """
    桌面规模的 ViT 风格编码器

    输出 token 数恒为 1 + (H/p)(W/p)，位置编码为可学习的绝对位置嵌入
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        p = config.patch_size
        patch_dim = 3 * p * p

        self.to_patch_embedding = nn.Sequential(
            Rearrange("b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=p, p2=p),
            nn.LayerNorm(patch_dim),
            nn.Linear(patch_dim, config.embed_dim),
            nn.LayerNorm(config.embed_dim),
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.embed_dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, 1 + config.num_patches, config.embed_dim))
        self.dropout = nn.Dropout(config.dropout_rate)

        mlp_dim = int(config.embed_dim * config.mlp_ratio)
        self.blocks = nn.ModuleList([
            TransformerBlock(config.embed_dim, config.heads, mlp_dim, config.dropout_rate)
            for _ in range(config.depth)
        ])
        self.norm = nn.LayerNorm(config.embed_dim)

        self._init_parameters()
        if config.freeze:
            self.freeze()

    def _init_parameters(self) -> None:
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def freeze(self) -> None:
        for param in self.parameters():
            param.requires_grad = False
        logger.info("编码器参数已冻结")

    def check_input(self, images: torch.Tensor) -> torch.Tensor:
        expected = (self.config.image_height, self.config.image_width)
        if images.dim() != 4 or tuple(images.shape[-2:]) != expected:
            raise ConfigurationError(
                f"expected images of shape (B, C, {expected[0]}, {expected[1]}), got {tuple(images.shape)}"
            )
        if not torch.isfinite(images).all():
            raise InputError("images contain non-finite values")
        return as_three_channels(images)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """
        Args:
            images: (B, C, H, W)，C 为 1 或 3

        Returns:
            torch.Tensor: (B, 1+M, D) token 序列
        """
        x = self.to_patch_embedding(self.check_input(images))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embedding
        x = self.dropout(x)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode(self, images: torch.Tensor, modality: Modality) -> TokenFeatures:
        return TokenFeatures.from_tokens(self(images), modality)


def encode(
    encoder: TokenEncoder,
    image: Union[np.ndarray, torch.Tensor],
    modality: Modality,
) -> TokenFeatures:
    """
    编码单张图像

    Args:
        encoder: 共享编码器
        image: H×W×C 的 numpy 栅格，或 (C, H, W) / (B, C, H, W) 张量
        modality: 图像所属模态，仅作标记，参数在模态间共享

    Returns:
        TokenFeatures: 批维度为 1（或输入批大小）的编码结果
    """
    if isinstance(image, np.ndarray):
        array = image if image.ndim == 3 else image[..., None]
        tensor = torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).float()
    else:
        tensor = image
    if tensor.dim() == 3:
        tensor = tensor.unsqueeze(0)
    param = next(encoder.parameters())
    return encoder.encode(tensor.to(device=param.device, dtype=param.dtype), modality)
