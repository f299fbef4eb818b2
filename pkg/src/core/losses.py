"""
训练目标

ReID 损失 = 标签平滑交叉熵 + batch-hard 三元组损失，
总损失 = L_ReID(融合特征) + L_ReID(三个模态 cls 的拼接)。
另含置信度监督与路由门控的辅助项。
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from core.errors import InputError, SamplerError


def id_loss(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.1) -> torch.Tensor:
    """
    标签平滑交叉熵

    Args:
        logits: (B, C)，或每模态分类头的 (B, H, C)，后者对 H 个头取平均
        labels: (B,) 身份索引
        smoothing: 平滑系数 ε
    """
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"label out of range for {n_classes} classes")
    if logits.dim() == 3:
        heads = logits.shape[1]
        return sum(F.cross_entropy(logits[:, h], labels, label_smoothing=smoothing) for h in range(heads)) / heads
    return F.cross_entropy(logits, labels, label_smoothing=smoothing)


def pairwise_distances(embeddings: torch.Tensor) -> torch.Tensor:
    """欧氏距离矩阵；平方距离下限 1e-12，零距离处梯度有界"""
    diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0)
    return diff.pow(2).sum(dim=-1).clamp_min(1e-12).sqrt()


def hard_example_hinge(d_ap: torch.Tensor, d_an: torch.Tensor, margin: float) -> torch.Tensor:
    return F.relu(d_ap - d_an + margin)


def triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """
    batch-hard 三元组损失：每个锚点取最远正样本与最近负样本

    Raises:
        SamplerError: 批次中只有一个身份，或没有任何身份出现两次
    """
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    if same.all() or not (same.sum(dim=1) > 1).any():
        raise SamplerError(
            "batch needs >=2 identities and >=2 samples of some identity; check the P x K sampler"
        )
    dist = pairwise_distances(embeddings)
    d_ap = dist.masked_fill(~same, float("-inf")).max(dim=1).values
    d_an = dist.masked_fill(same, float("inf")).min(dim=1).values
    return hard_example_hinge(d_ap, d_an, margin).mean()


def reid_loss(embeddings: torch.Tensor, logits: torch.Tensor, labels: torch.Tensor,
              smoothing: float = 0.1, margin: float = 0.3) -> Dict[str, torch.Tensor]:
    return {
        "id": id_loss(logits, labels, smoothing),
        "triplet": triplet_loss(embeddings, labels, margin),
    }


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        values = {name: float(value.detach()) for name, value in self.components.items()}
        values["total"] = float(self.total.detach())
        return values


def total_loss(bundle, labels: torch.Tensor, smoothing: float = 0.1, margin: float = 0.3) -> LossBreakdown:
    """
    L_total = L_ReID(f) + L_ReID([f_R, f_N, f_T])

    Args:
        bundle: EmbeddingBundle
        labels: (B,) 身份索引
    """
    fused = reid_loss(bundle.fused, bundle.logits_fused, labels, smoothing, margin)
    modal = reid_loss(bundle.modal_concat, bundle.logits_modal, labels, smoothing, margin)
    components = {
        "id_fused": fused["id"],
        "triplet_fused": fused["triplet"],
        "id_modal": modal["id"],
        "triplet_modal": modal["triplet"],
    }
    return LossBreakdown(total=sum(components.values()), components=components)


def confidence_loss(
    bundle,
    labels: torch.Tensor,
    scale: float = 3.0,
    quality: Optional[torch.Tensor] = None,
    graded: Optional[torch.Tensor] = None,
) -> Dict[str, torch.Tensor]:
    """
    置信度监督

    逐模态分类头在各模态 cls 上用交叉熵训练（梯度进入编码器）；mono-confidence 回归
    scale × q。已知退化元数据的样本 q 为模态质量（退化模态 1 - severity，其余 1），
    其余样本 q 为该模态真实类别概率（不回传梯度）。缺失模态不参与。

    Args:
        bundle: EmbeddingBundle
        labels: (B,) 身份索引
        scale: 置信度目标的尺度
        quality: (B, 3) 模态质量，缺省时全部使用真实类别概率
        graded: (B,) quality 是否可信，缺省视为全部可信

    Returns:
        dict: {"tcp": 逐模态交叉熵, "confidence": 置信度回归 MSE}
    """
    present = bundle.confidence.present
    tcp_logits = bundle.tcp_logits
    targets = labels.unsqueeze(1).expand(-1, tcp_logits.shape[1])
    ce = F.cross_entropy(tcp_logits.flatten(0, 1), targets.flatten(), reduction="none").view_as(targets)
    with torch.no_grad():
        target = tcp_logits.softmax(dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        if quality is not None:
            known = torch.ones_like(labels, dtype=torch.bool) if graded is None else graded.to(torch.bool)
            target = torch.where(known.unsqueeze(-1), quality.to(target.dtype), target)
    error = (bundle.confidence.mono - scale * target).pow(2)
    weight = present.to(error.dtype)
    count = weight.sum().clamp_min(1.0)
    return {
        "tcp": (ce * weight).sum() / count,
        "confidence": (error * weight).sum() / count,
    }
