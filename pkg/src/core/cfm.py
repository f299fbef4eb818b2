"""
协同融合 (CFM)，处理各模态质量均衡的样本

可学习阈值 tau 作用于排序后的模态权重，决定保留哪些模态；每个保留模态的有向对
先做交叉注意力，再经 patch 网格上两路 tanh 门控的深度卷积增强。
各有向对的 cls 切片拼接后投影回嵌入维度。
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from config.settings import FusionConfig
from core.attention import MultiHeadCrossAttention
from core.backbone import TokenFeatures
from core.dcdw import ConfidenceBundle
from core.errors import ConsistencyError, InputError
from core.types import MODALITIES, TIE_PREFERENCE, Modality

logger = logging.getLogger(__name__)

Pair = Tuple[Modality, Modality]


@dataclass(frozen=True)
class RetentionDecision:
    tau: float
    retained: Tuple[Modality, ...]
    discarded: Tuple[Modality, ...] = field(default=())

    def to_dict(self) -> Dict[str, object]:
        return {
            "tau": self.tau,
            "retained": [m.value for m in self.retained],
            "discarded": [m.value for m in self.discarded],
        }


@dataclass
class MinedFeature:
    source: Modality
    target: Modality
    tokens: torch.Tensor

    @property
    def pair(self) -> Pair:
        return (self.source, self.target)


def ordered_pairs(modalities: Sequence[Modality]) -> List[Pair]:
    """按 R < N < T 字典序列出全部有向对"""
    ordered = sorted(modalities, key=lambda m: m.index)
    return list(permutations(ordered, 2))


def select_retained(
    weights: Sequence[float],
    tau: float,
    present: Optional[Sequence[bool]] = None,
    drop: bool = True,
) -> RetentionDecision:
    """
    硬保留规则：w_m < tau 时丢弃模态 m，至少保留两个

    通过阈值的不足两个时保留权重最大的两个，同权重按 N > T > R 取舍

    Args:
        weights: 三个模态的权重
        tau: 保留阈值
        present: 存在掩码，缺省视为全部存在
        drop: False 时保留全部存在模态

    Returns:
        RetentionDecision

    Raises:
        InputError: 存在模态少于两个
    """
    w = [float(x) for x in weights]
    present = [True] * len(MODALITIES) if present is None else [bool(p) for p in present]
    candidates = [m for m in MODALITIES if present[m.index]]
    if len(candidates) < 2:
        raise InputError("retention needs at least two present modalities")

    if drop:
        kept = [m for m in candidates if w[m.index] >= tau]
        if len(kept) < 2:
            ranked = sorted(candidates, key=lambda m: (w[m.index], TIE_PREFERENCE[m]), reverse=True)
            kept = ranked[:2]
    else:
        kept = candidates

    retained = tuple(sorted(kept, key=lambda m: m.index))
    discarded = tuple(m for m in MODALITIES if m not in retained)
    return RetentionDecision(tau=float(tau), retained=retained, discarded=discarded)


class RetentionThreshold(nn.Module):
    """
    tau = sigmoid(MLP(降序排列的权重))，初始输出为 tau_init
    """

    def __init__(self, hidden: int = 8, tau_init: float = 0.25):
        super().__init__()
        self.fc1 = nn.Linear(len(MODALITIES), hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.constant_(self.fc2.bias, math.log(tau_init / (1.0 - tau_init)))

    def logit(self, weights: torch.Tensor) -> torch.Tensor:
        ranked = weights.sort(dim=-1, descending=True).values
        return self.fc2(self.act(self.fc1(ranked))).squeeze(-1)

    def forward(self, weights: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(weights))


class InterMining(nn.Module):
    """
    有向模态挖掘 F_m -> F_n，输入为 (B, 1+M, D) 的 token 序列
    """

    def __init__(self, embed_dim: int, heads: int, grid: Tuple[int, int]):
        super().__init__()
        self.grid = grid
        self.attn = MultiHeadCrossAttention(embed_dim, heads)
        self.expand = nn.Conv2d(embed_dim, 2 * embed_dim, 3, padding=1, groups=embed_dim)
        self.branch1 = nn.Conv2d(embed_dim, embed_dim, 3, padding=1, groups=embed_dim)
        self.branch2 = nn.Conv2d(embed_dim, embed_dim, 3, padding=1, groups=embed_dim)

    def branch_terms(self, patches: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        把通道加倍后的网格拆成 (b1, b2) 及其 tanh 项

        加倍图的 2c 与 2c+1 通道都来自输入通道 c；偶数通道组成 b1，奇数通道组成 b2
        """
        grid_h, grid_w = self.grid
        grid = rearrange(patches, "b (h w) d -> b d h w", h=grid_h, w=grid_w)
        doubled = self.expand(grid)
        b1, b2 = doubled[:, 0::2], doubled[:, 1::2]
        return b1, b2, torch.tanh(self.branch1(b1)), torch.tanh(self.branch2(b2))

    def forward(self, f_m: torch.Tensor, f_n: torch.Tensor) -> torch.Tensor:
        if f_m.shape != f_n.shape:
            raise InputError(f"token shape mismatch: {tuple(f_m.shape)} vs {tuple(f_n.shape)}")
        mined = self.attn(f_m, f_n)
        b1, b2, t1, t2 = self.branch_terms(mined[:, 1:])
        enhanced = (t1 + b1) * (t2 + b2)

        patches = rearrange(enhanced, "b d h w -> b (h w) d") + f_n[:, 1:]
        # cls 不经过卷积，汇入增强图的全局均值
        cls = mined[:, 0] + enhanced.mean(dim=(2, 3)) + f_n[:, 0]
        return torch.cat([cls.unsqueeze(1), patches], dim=1)

    def mine(self, source: TokenFeatures, target: TokenFeatures) -> MinedFeature:
        return MinedFeature(source.modality, target.modality, self(source.tokens, target.tokens))


def _projection(in_dim: int, embed_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, embed_dim), nn.GELU(), nn.Linear(embed_dim, embed_dim))


class CollaborationFusion(nn.Module):
    """按有向对顺序拼接挖掘得到的 cls token，投影到 embed_dim"""

    def __init__(self, embed_dim: int):
        super().__init__()
        # 2 个保留模态 -> 2 个有向对；3 个 -> 6 个
        self.mlps = nn.ModuleDict({
            "2": _projection(2 * embed_dim, embed_dim),
            "6": _projection(6 * embed_dim, embed_dim),
        })

    def forward(self, mined: Mapping[Pair, torch.Tensor], retained: Sequence[Modality]) -> torch.Tensor:
        """
        Args:
            mined: 有向对 -> cls 切片 (B, D)
            retained: 保留的模态（2 或 3 个）

        Raises:
            ConsistencyError: 缺少某个有向对的挖掘结果
        """
        pairs = ordered_pairs(retained)
        missing = [p for p in pairs if p not in mined]
        if missing:
            labels = ", ".join(f"{m.name}->{n.name}" for m, n in missing)
            raise ConsistencyError(f"mined features missing for pairs: {labels}")
        key = str(len(pairs))
        if key not in self.mlps:
            raise ConsistencyError(f"no fusion head for {len(pairs)} mined features")
        return self.mlps[key](torch.cat([mined[p] for p in pairs], dim=-1))


def cfm_fuse(
    fusion: CollaborationFusion,
    mined: Sequence[MinedFeature],
    retained: Sequence[Modality],
) -> torch.Tensor:
    return fusion({f.pair: f.tokens[:, 0] for f in mined}, retained)


class CollaborationFusionModule(nn.Module):
    """阈值保留 + 模态挖掘 + 融合投影；训练时保留掩码以直通估计传梯度"""

    def __init__(self, embed_dim: int, heads: int, grid: Tuple[int, int], config: FusionConfig):
        super().__init__()
        self.temperature = config.retention_temperature
        self.threshold = RetentionThreshold(config.retention_hidden, config.tau_init)
        self.mining = InterMining(embed_dim, heads, grid)
        self.fusion = CollaborationFusion(embed_dim)

    def decide(self, bundle: ConfidenceBundle, tau: torch.Tensor, drop: bool = True) -> List[RetentionDecision]:
        weights = bundle.weights.detach().cpu().tolist()
        taus = tau.detach().cpu().tolist()
        present = bundle.present.cpu().tolist()
        return [select_retained(w, t, p, drop=drop) for w, t, p in zip(weights, taus, present)]

    def _gates(self, bundle: ConfidenceBundle, tau: torch.Tensor, decisions: List[RetentionDecision]) -> torch.Tensor:
        """前向为硬保留掩码，反向经 sigmoid((w - tau) / T) 传梯度"""
        hard = torch.tensor(
            [[1.0 if m in d.retained else 0.0 for m in MODALITIES] for d in decisions],
            dtype=bundle.weights.dtype,
            device=bundle.weights.device,
        )
        soft = torch.sigmoid((bundle.weights - tau.unsqueeze(-1)) / self.temperature)
        return hard + (soft - soft.detach())

    def forward(
        self,
        features: Sequence[TokenFeatures],
        bundle: ConfidenceBundle,
        drop: bool = True,
    ) -> Tuple[torch.Tensor, List[RetentionDecision]]:
        """
        Args:
            features: 路由到 CFM 的样本，R, N, T 顺序的 TokenFeatures
            bundle: 这些样本的置信度
            drop: 是否应用保留规则；False 时保留全部存在模态

        Returns:
            (融合特征 (B, D), 逐样本 RetentionDecision)
        """
        tau = self.threshold(bundle.weights)
        decisions = self.decide(bundle, tau, drop=drop)
        gates = self._gates(bundle, tau, decisions) if self.training else None

        needed = sorted({p for d in decisions for p in ordered_pairs(d.retained)}, key=lambda p: (p[0].index, p[1].index))
        mined: Dict[Pair, torch.Tensor] = {}
        for source, target in needed:
            cls = self.mining(features[source.index].tokens, features[target.index].tokens)[:, 0]
            if gates is not None:
                cls = cls * (gates[:, source.index] * gates[:, target.index]).unsqueeze(-1)
            mined[(source, target)] = cls

        batch, dim = features[0].cls.shape
        fused = features[0].cls.new_zeros(batch, dim)
        groups: Dict[Tuple[Modality, ...], List[int]] = {}
        for i, decision in enumerate(decisions):
            groups.setdefault(decision.retained, []).append(i)
        for retained, rows in groups.items():
            index = torch.tensor(rows, device=fused.device)
            subset = {p: mined[p].index_select(0, index) for p in ordered_pairs(retained)}
            fused = fused.index_copy(0, index, self.fusion(subset, retained))
        return fused, decisions
