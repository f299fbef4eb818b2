"""
引导融合 (GFM)：用于质量不均衡的样本

主导模态取 不确定性 × 权重 最大者。主导模态与每个辅助模态的差异经空间处理后，
一方面放大主导模态的 tokens，另一方面经余弦注意力引导各辅助模态，
最后把辅助模态聚合到主导模态上。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from config.settings import FusionConfig
from core.backbone import TokenFeatures
from core.dcdw import ConfidenceBundle, DynamicConfidenceWeighting
from core.errors import ConfigurationError, InputError
from core.types import MODALITIES, TIE_PREFERENCE, DominantRule, Modality

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DominantSelection:
    dominant: Modality
    auxiliaries: Tuple[Modality, ...]
    uncertainty: Tuple[float, ...]
    score: Tuple[float, ...]

    def to_dict(self) -> Dict[str, object]:
        return {
            "dominant": self.dominant.value,
            "auxiliaries": [m.value for m in self.auxiliaries],
            "uncertainty": list(self.uncertainty),
            "score": list(self.score),
        }


@dataclass
class Discrepancy:
    raw: torch.Tensor
    processed: torch.Tensor


def uncertainty_from_passes(passes: torch.Tensor) -> torch.Tensor:
    """
    对 K 次前向（第 0 维）取总体方差，再在最后一维上取均值
    """
    return passes.var(dim=0, unbiased=False).mean(dim=-1)


class MCDropoutEstimator:
    """
    MC dropout 认知不确定性

    K 次前向都经过置信度模块中带参数的路径（cls 对 patch 的注意力 + 该模态的 mono 头），
    每次在注意力图与交互特征上各施加一组 dropout 掩码，不确定性为 K 个 mono 输出的总体方差。
    掩码来自每次调用时按 seed + 模态下标重新播种的生成器，所以估计值是输入与参数的确定性函数；
    同一批次的所有样本共享掩码，单个样本的估计与批次组成无关。
    """

    def __init__(self, passes: int = 8, dropout_rate: float = 0.1, seed: int = 0):
        if passes < 2:
            raise ConfigurationError(f"MC dropout needs at least 2 passes, got {passes}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        self.passes = passes
        self.dropout_rate = dropout_rate
        self.seed = seed

    def masks(self, shape: Sequence[int], generator: torch.Generator) -> torch.Tensor:
        """(K, *shape) 的伯努利掩码，已除以保留率"""
        keep = 1.0 - self.dropout_rate
        probs = torch.full((self.passes, *shape), keep, dtype=torch.float64)
        return torch.bernoulli(probs, generator=generator) / keep

    @torch.no_grad()
    def __call__(self, path: DynamicConfidenceWeighting, features: TokenFeatures) -> torch.Tensor:
        """
        Args:
            path: 提供 dropout_pass 的置信度模块
            features: 单个模态的 TokenFeatures

        Returns:
            torch.Tensor: (B,) 逐样本不确定性
        """
        generator = torch.Generator().manual_seed(self.seed + features.modality.index)
        attention_shape, feature_shape = path.dropout_shapes(features)
        options = {"device": features.cls.device, "dtype": features.cls.dtype}
        attention_masks = self.masks(attention_shape, generator).to(**options)
        feature_masks = self.masks(feature_shape, generator).to(**options)
        passes = torch.stack([
            path.dropout_pass(features, attention_masks[k], feature_masks[k]) for k in range(self.passes)
        ])
        return uncertainty_from_passes(passes)


def epistemic_uncertainty(
    tokens: TokenFeatures,
    path: DynamicConfidenceWeighting,
    passes: int = 8,
    dropout_rate: float = 0.1,
    seed: int = 0,
) -> torch.Tensor:
    """单个模态的逐样本 U_e，形状 (B,)"""
    return MCDropoutEstimator(passes, dropout_rate, seed)(path, tokens)


def select_dominant(
    uncertainty: Sequence[float],
    weights: Sequence[float],
    rule: DominantRule = DominantRule.UNCERTAINTY_WEIGHTED,
    present: Optional[Sequence[bool]] = None,
) -> DominantSelection:
    """
    选择主导模态：argmax U*W（inverse_uncertainty 规则下为 W/(1+U)）

    同分时先比较权重，再按 N > T > R

    Args:
        uncertainty: 三个模态的不确定性
        weights: 三个模态的权重
        rule: 打分规则
        present: 存在掩码，缺失模态不参与

    Returns:
        DominantSelection: 主导模态、辅助模态与各模态得分

    Raises:
        InputError: 没有存在模态
    """
    u = [float(x) for x in uncertainty]
    w = [float(x) for x in weights]
    present = [True] * len(MODALITIES) if present is None else [bool(p) for p in present]
    if rule == DominantRule.UNCERTAINTY_WEIGHTED:
        score = [ui * wi for ui, wi in zip(u, w)]
    else:
        score = [wi / (1.0 + ui) for ui, wi in zip(u, w)]

    candidates = [m for m in MODALITIES if present[m.index]]
    if not candidates:
        raise InputError("no present modality to select as dominant")
    dominant = max(candidates, key=lambda m: (score[m.index], w[m.index], TIE_PREFERENCE[m]))
    auxiliaries = tuple(m for m in candidates if m != dominant)
    return DominantSelection(dominant=dominant, auxiliaries=auxiliaries, uncertainty=tuple(u), score=tuple(score))


class DiscrepancyProcessor(nn.Module):
    """
    raw = F_dom - F_aux；processed = conv(raw) * sigmoid(saliency)

    显著图由卷积输出的通道均值与通道最大值再经一层卷积得到；cls 取处理后网格的均值
    """

    def __init__(self, embed_dim: int, grid: Tuple[int, int]):
        super().__init__()
        self.grid = grid
        self.conv = nn.Conv2d(embed_dim, embed_dim, 3, padding=1)
        self.saliency = nn.Conv2d(2, 1, 3, padding=1)
        nn.init.zeros_(self.conv.bias)
        nn.init.zeros_(self.saliency.bias)

    def saliency_map(self, conv_out: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([conv_out.mean(dim=1, keepdim=True), conv_out.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.saliency(pooled))

    def forward(self, f_dom: torch.Tensor, f_aux: torch.Tensor) -> Discrepancy:
        if f_dom.shape != f_aux.shape:
            raise InputError(f"discrepancy shape mismatch: {tuple(f_dom.shape)} vs {tuple(f_aux.shape)}")
        raw = f_dom - f_aux
        grid_h, grid_w = self.grid
        conv_out = self.conv(rearrange(raw[:, 1:], "b (h w) d -> b d h w", h=grid_h, w=grid_w))
        processed = conv_out * self.saliency_map(conv_out)
        cls = processed.mean(dim=(2, 3))
        patches = rearrange(processed, "b d h w -> b (h w) d")
        return Discrepancy(raw=raw, processed=torch.cat([cls.unsqueeze(1), patches], dim=1))


def amplify_dominant(
    f_dom: torch.Tensor,
    d_1: torch.Tensor,
    d_2: torch.Tensor,
    alpha_1: torch.Tensor,
    alpha_2: torch.Tensor,
) -> torch.Tensor:
    return f_dom + alpha_1 * d_1 + alpha_2 * d_2


class AmplificationFactors(nn.Module):
    """可学习的 alpha_1、alpha_2，宽度 embed_dim，初始为 0"""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.alpha_1 = nn.Parameter(torch.zeros(embed_dim))
        self.alpha_2 = nn.Parameter(torch.zeros(embed_dim))

    def freeze_at_zero(self) -> None:
        with torch.no_grad():
            self.alpha_1.zero_()
            self.alpha_2.zero_()
        self.alpha_1.requires_grad = False
        self.alpha_2.requires_grad = False

    def forward(self, f_dom: torch.Tensor, d_1: Discrepancy, d_2: Discrepancy) -> torch.Tensor:
        return amplify_dominant(f_dom, d_1.processed, d_2.processed, self.alpha_1, self.alpha_2)


def guidance_attention(f_dom_en: torch.Tensor, f_aux: torch.Tensor) -> torch.Tensor:
    """
    逐 token 余弦相似度 cos(F_dom_en[t], F_aux[t]) / sqrt(D) 在 token 维上的 softmax，形状 (B, T)

    零向量的余弦记为 0
    """
    dot = (f_dom_en * f_aux).sum(dim=-1)
    norms = f_dom_en.norm(dim=-1) * f_aux.norm(dim=-1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    cosine = torch.where(norms > 0, dot / safe, torch.zeros_like(dot))
    return (cosine / math.sqrt(f_dom_en.shape[-1])).softmax(dim=-1)


def guide_auxiliary(f_dom_en: torch.Tensor, f_aux: torch.Tensor, d_processed: torch.Tensor) -> torch.Tensor:
    attn = guidance_attention(f_dom_en, f_aux)
    return f_aux + attn.unsqueeze(-1) * d_processed


class GuidanceFusion(nn.Module):
    """
    inter_x2i = conv1x1(concat(F_x^En, F_i^En))；F_All = concat(inter_j2i, inter_k2i, F_i^En) 投影回 embed_dim

    这里的算子都逐 token 作用，只计算 cls token
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.inter = nn.Conv1d(2 * embed_dim, embed_dim, kernel_size=1)
        self.projection = nn.Linear(3 * embed_dim, embed_dim)

    def interact(self, f_aux_en: torch.Tensor, f_dom_en: torch.Tensor) -> torch.Tensor:
        stacked = torch.cat([f_aux_en, f_dom_en], dim=-1).unsqueeze(-1)
        return self.inter(stacked).squeeze(-1)

    def aggregate(
        self,
        f_dom_en: torch.Tensor,
        f_aux1_en: torch.Tensor,
        f_aux2_en: torch.Tensor,
        aux_present: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """cls token 的 F_All，宽度 3*embed_dim；缺失的辅助模态贡献 0"""
        dom = f_dom_en[:, 0]
        inter_1 = self.interact(f_aux1_en[:, 0], dom)
        inter_2 = self.interact(f_aux2_en[:, 0], dom)
        if aux_present is not None:
            inter_1 = inter_1 * aux_present[:, 0:1].to(dom.dtype)
            inter_2 = inter_2 * aux_present[:, 1:2].to(dom.dtype)
        return torch.cat([inter_1, inter_2, dom], dim=-1)

    def forward(
        self,
        f_dom_en: torch.Tensor,
        f_aux1_en: torch.Tensor,
        f_aux2_en: torch.Tensor,
        aux_present: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        return self.projection(self.aggregate(f_dom_en, f_aux1_en, f_aux2_en, aux_present))


def gfm_fuse(
    fusion: GuidanceFusion,
    f_dom_en: torch.Tensor,
    f_aux1_en: torch.Tensor,
    f_aux2_en: torch.Tensor,
) -> torch.Tensor:
    return fusion(f_dom_en, f_aux1_en, f_aux2_en)


class GuidanceFusionModule(nn.Module):
    """主导模态选择 + 差异放大 + 辅助模态引导 + 聚合"""

    def __init__(self, embed_dim: int, grid: Tuple[int, int], config: FusionConfig):
        super().__init__()
        self.rule = config.dominant_rule
        self.estimator = MCDropoutEstimator(config.mc_passes, config.mc_dropout, config.mc_seed)
        self.discrepancy = DiscrepancyProcessor(embed_dim, grid)
        self.amplification = AmplificationFactors(embed_dim)
        self.fusion = GuidanceFusion(embed_dim)

    def uncertainties(self, features: Sequence[TokenFeatures], path: DynamicConfidenceWeighting) -> torch.Tensor:
        """(B, 3) 各模态的认知不确定性"""
        return torch.stack([self.estimator(path, f) for f in features], dim=-1)

    def select(
        self,
        features: Sequence[TokenFeatures],
        bundle: ConfidenceBundle,
        path: DynamicConfidenceWeighting,
    ) -> List[DominantSelection]:
        uncertainty = self.uncertainties(features, path).cpu().tolist()
        weights = bundle.weights.detach().cpu().tolist()
        present = bundle.present.cpu().tolist()
        return [select_dominant(u, w, self.rule, p) for u, w, p in zip(uncertainty, weights, present)]

    def forward(
        self,
        features: Sequence[TokenFeatures],
        bundle: ConfidenceBundle,
        path: DynamicConfidenceWeighting,
    ) -> Tuple[torch.Tensor, List[DominantSelection]]:
        """
        Args:
            features: 路由到 GFM 的样本，R, N, T 顺序的 TokenFeatures
            bundle: 这些样本的置信度
            path: 置信度模块，MC dropout 在其上采样

        Returns:
            (融合特征 (B, D), 逐样本 DominantSelection)
        """
        selections = self.select(features, bundle, path)
        stacked = torch.stack([f.tokens for f in features], dim=1)
        device = stacked.device

        dom_idx, aux_idx, aux_flags = [], [], []
        for s in selections:
            others = [m for m in MODALITIES if m != s.dominant]
            dom_idx.append(s.dominant.index)
            aux_idx.append([m.index for m in others])
            aux_flags.append([m in s.auxiliaries for m in others])

        rows = torch.arange(stacked.shape[0], device=device)
        aux_idx_t = torch.tensor(aux_idx, device=device)
        aux_present = torch.tensor(aux_flags, device=device)
        dom = stacked[rows, torch.tensor(dom_idx, device=device)]
        aux_1 = stacked[rows, aux_idx_t[:, 0]]
        aux_2 = stacked[rows, aux_idx_t[:, 1]]

        d_1 = self.discrepancy(dom, aux_1)
        d_2 = self.discrepancy(dom, aux_2)
        scale = aux_present.to(dom.dtype)[:, :, None, None]
        d_1 = Discrepancy(d_1.raw, d_1.processed * scale[:, 0])
        d_2 = Discrepancy(d_2.raw, d_2.processed * scale[:, 1])

        dom_en = self.amplification(dom, d_1, d_2)
        aux_1_en = guide_auxiliary(dom_en, aux_1, d_1.processed)
        aux_2_en = guide_auxiliary(dom_en, aux_2, d_2.processed)
        fused = self.fusion(dom_en, aux_1_en, aux_2_en, aux_present)
        return fused, selections
