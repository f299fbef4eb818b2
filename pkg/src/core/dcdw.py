"""
动态置信度加权 (DCDW)

每个模态的 cls token 对本模态的 patch tokens 做交叉注意力，再由该模态专属的头
给出 mono-confidence；holo-confidence 是其余模态 mono 在总和中的占比；
co-belief (mono + holo) 经 softmax 得到模态权重，驱动路由、保留与主导选择。
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.attention import MultiHeadCrossAttention
from core.backbone import TokenFeatures
from core.errors import DegenerateInputError, InputError
from core.types import MODALITIES, Modality


@dataclass
class ConfidenceBundle:
    """
    逐样本置信度，均为 (B, 3)，模态顺序 R, N, T

    缺失模态的 mono、holo 与权重均为 0
    """
    mono: torch.Tensor
    holo: torch.Tensor
    co_belief: torch.Tensor
    weights: torch.Tensor
    present: torch.Tensor

    def __len__(self) -> int:
        return self.weights.shape[0]

    def row(self, index: int) -> Dict[str, List[float]]:
        return {
            "mono": self.mono[index].tolist(),
            "holo": self.holo[index].tolist(),
            "co_belief": self.co_belief[index].tolist(),
            "weights": self.weights[index].tolist(),
        }


def _full_mask(mono: torch.Tensor) -> torch.Tensor:
    return torch.ones_like(mono, dtype=torch.bool)


def holo_confidence(mono: torch.Tensor, present: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    H_i = 其余存在模态的 mono 之和 / 全部存在模态的 mono 之和

    Raises:
        DegenerateInputError: 某一行的 mono 总和为 0
    """
    present = _full_mask(mono) if present is None else present
    mono = torch.where(present, mono, torch.zeros_like(mono))
    total = mono.sum(dim=-1, keepdim=True)
    if (total <= 0).any():
        raise DegenerateInputError("mono-confidences sum to zero")
    holo = (total - mono) / total
    return torch.where(present, holo, torch.zeros_like(holo))


def uniform_holo(present: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """退化行的替代值：每个存在模态取 (n-1)/n"""
    count = present.sum(dim=-1, keepdim=True).to(dtype)
    value = (count - 1) / count.clamp_min(1)
    return torch.where(present, value.expand_as(present), torch.zeros(present.shape, dtype=dtype))


def safe_holo_confidence(mono: torch.Tensor, present: torch.Tensor) -> torch.Tensor:
    masked = torch.where(present, mono, torch.zeros_like(mono))
    degenerate = masked.sum(dim=-1, keepdim=True) <= 0
    if not degenerate.any():
        return holo_confidence(mono, present)
    safe_mono = torch.where(degenerate & present, torch.ones_like(mono), masked)
    holo = holo_confidence(safe_mono, present)
    return torch.where(degenerate, uniform_holo(present, mono.dtype).to(mono.device), holo)


def co_belief_weights(
    mono: torch.Tensor,
    holo: torch.Tensor,
    present: Optional[torch.Tensor] = None,
) -> ConfidenceBundle:
    """
    C = M + H，权重为 C 在存在模态上的 softmax

    Raises:
        InputError: 某个样本没有任何存在模态
    """
    present = _full_mask(mono) if present is None else present
    if not present.any(dim=-1).all():
        raise InputError("every sample needs at least one present modality")
    zeros = torch.zeros_like(mono)
    mono = torch.where(present, mono, zeros)
    holo = torch.where(present, holo, zeros)
    co_belief = mono + holo
    logits = co_belief.masked_fill(~present, float("-inf"))
    weights = logits.softmax(dim=-1)
    return ConfidenceBundle(mono=mono, holo=holo, co_belief=co_belief, weights=weights, present=present)


class MonoConfidenceHead(nn.Module):
    """embed_dim -> embed_dim/2 -> 1，softplus 输出"""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, embed_dim // 2)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(embed_dim // 2, 1)

    def forward(self, interaction: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.fc2(self.act(self.fc1(interaction)))).squeeze(-1)


class DynamicConfidenceWeighting(nn.Module):
    """共享的 cls->patch 交叉注意力 + 每模态一个 mono 头"""

    def __init__(self, embed_dim: int, heads: int):
        super().__init__()
        self.interaction = MultiHeadCrossAttention(embed_dim, heads)
        self.heads = nn.ModuleDict({m.name: MonoConfidenceHead(embed_dim) for m in MODALITIES})

    def attend_cls_to_patches(
        self,
        features: TokenFeatures,
        dropout_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """cls token 作为唯一查询，对 patch tokens 做注意力；返回 (B, D)"""
        if features.num_patches == 0:
            raise InputError(f"{features.modality.value}: empty patch sequence")
        return self.interaction(features.cls.unsqueeze(1), features.patches, dropout_mask)[:, 0]

    def mono_confidence(self, interaction: torch.Tensor, modality: Modality) -> torch.Tensor:
        return self.heads[modality.name](interaction)

    def dropout_shapes(self, features: TokenFeatures) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        """dropout_pass 所需的两个掩码形状：注意力图 (heads, 1, M) 与交互特征 (D,)"""
        return (self.interaction.heads, 1, features.num_patches), (features.cls.shape[-1],)

    def dropout_pass(
        self,
        features: TokenFeatures,
        attention_mask: torch.Tensor,
        feature_mask: torch.Tensor,
    ) -> torch.Tensor:
        """
        带外部 dropout 掩码的一次置信度前向：注意力图与交互特征各乘一个掩码后进入 mono 头

        掩码在批次内共享，单个样本的结果与同批次其他样本无关

        Returns:
            torch.Tensor: (B, 1)
        """
        interaction = self.attend_cls_to_patches(features, attention_mask) * feature_mask
        return self.mono_confidence(interaction, features.modality).unsqueeze(-1)

    def forward(self, features: Sequence[TokenFeatures], present: torch.Tensor) -> ConfidenceBundle:
        """
        Args:
            features: R, N, T 顺序的 TokenFeatures
            present: (B, 3) 存在掩码

        Returns:
            ConfidenceBundle
        """
        mono = torch.stack(
            [self.mono_confidence(self.attend_cls_to_patches(f), f.modality) for f in features],
            dim=-1,
        )
        holo = safe_holo_confidence(mono, present)
        return co_belief_weights(mono, holo, present)
