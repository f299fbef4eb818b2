"""
端到端模型：共享编码器、置信度加权、路由门控与两条融合分支，外加 BN neck 分类头
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from config.settings import RunConfig
from core.backbone import TokenEncoder, TokenFeatures
from core.cfm import CollaborationFusionModule, RetentionDecision
from core.dcdw import ConfidenceBundle, DynamicConfidenceWeighting
from core.errors import ConsistencyError, InputError
from core.gfm import DominantSelection, GuidanceFusionModule
from core.types import MODALITIES, AblationVariant, Branch, ModalHead

logger = logging.getLogger(__name__)


def route(weights: Union[Sequence[float], torch.Tensor], beta: float) -> Branch:
    """max(weights) > beta（严格大于）时进入 GFM，否则 CFM"""
    values = weights.tolist() if isinstance(weights, torch.Tensor) else list(weights)
    return Branch.GFM if max(values) > float(beta) else Branch.CFM


def two_means_threshold(values: torch.Tensor) -> Optional[torch.Tensor]:
    """
    一维二均值划分：取组间方差最大的切分点，返回两组均值的中点

    Returns:
        Optional[torch.Tensor]: 标量；少于两个不同取值时为 None
    """
    ordered = values.detach().flatten().sort().values
    n = ordered.numel()
    if n < 2 or float(ordered[-1] - ordered[0]) <= 1e-8:
        return None
    prefix = ordered.cumsum(dim=0)
    k = torch.arange(1, n, dtype=ordered.dtype, device=ordered.device)
    low = prefix[:-1] / k
    high = (prefix[-1] - prefix[:-1]) / (n - k)
    between = k * (n - k) * (high - low) ** 2
    best = int(between.argmax())
    return 0.5 * (low[best] + high[best])


class RoutingGate(nn.Module):
    """
    可学习的 beta，每次更新后截断到 [beta_min, beta_max]

    硬路由规则没有梯度；surrogate_loss 把 beta 拉向本批次多模态样本最大权重的两组分界：
    已知退化标记时取平衡组与退化组均值的中点，否则取一维二均值划分的中点。
    """

    def __init__(self, beta_init: float = 0.35, beta_min: float = 0.05, beta_max: float = 0.95):
        super().__init__()
        self.beta = nn.Parameter(torch.tensor(float(beta_init)))
        self.beta_min = beta_min
        self.beta_max = beta_max

    def clamp_(self) -> None:
        with torch.no_grad():
            self.beta.clamp_(self.beta_min, self.beta_max)

    @property
    def value(self) -> float:
        return float(self.beta.detach())

    def forward(self, weights: torch.Tensor) -> torch.Tensor:
        """(B,) 布尔掩码，True 表示路由到 GFM"""
        return weights.max(dim=-1).values > self.beta.detach()

    def split_target(
        self,
        weights: torch.Tensor,
        present: Optional[torch.Tensor] = None,
        degraded: Optional[torch.Tensor] = None,
        graded: Optional[torch.Tensor] = None,
    ) -> Optional[torch.Tensor]:
        """
        beta 的回归目标

        Args:
            weights: (B, 3) 模态权重
            present: (B, 3) 存在掩码；单模态样本不参与
            degraded: (B,) 样本是否有退化模态
            graded: (B,) degraded 是否可信

        Returns:
            Optional[torch.Tensor]: 标量目标；无法划分时为 None
        """
        peak = weights.detach().max(dim=-1).values
        rows = torch.ones_like(peak, dtype=torch.bool)
        if present is not None:
            rows = present.sum(dim=-1) >= 2
        if degraded is not None:
            known = rows if graded is None else rows & graded
            high, low = peak[known & degraded], peak[known & ~degraded]
            if high.numel() and low.numel():
                return 0.5 * (high.mean() + low.mean())
        return two_means_threshold(peak[rows])

    def surrogate_loss(
        self,
        weights: torch.Tensor,
        present: Optional[torch.Tensor] = None,
        degraded: Optional[torch.Tensor] = None,
        graded: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        target = self.split_target(weights, present, degraded, graded)
        if target is None:
            return self.beta * 0.0
        return (self.beta - target.to(self.beta.dtype)) ** 2


@dataclass
class FusionOutcome:
    branch: Branch
    fused: torch.Tensor
    confidence: Dict[str, List[float]]
    retention: Optional[RetentionDecision] = None
    dominance: Optional[DominantSelection] = None

    def __post_init__(self) -> None:
        if self.branch == Branch.CFM and (self.retention is None or self.dominance is not None):
            raise ConsistencyError("CFM outcome must carry a retention decision and no dominance")
        if self.branch == Branch.GFM and (self.dominance is None or self.retention is not None):
            raise ConsistencyError("GFM outcome must carry a dominance selection and no retention")

    def to_dict(self) -> Dict[str, object]:
        return {
            "branch": self.branch.value,
            **self.confidence,
            "retention": self.retention.to_dict() if self.retention else None,
            "dominance": self.dominance.to_dict() if self.dominance else None,
        }


@dataclass
class EmbeddingBundle:
    fused: torch.Tensor
    per_modality: torch.Tensor
    logits_fused: torch.Tensor
    logits_modal: torch.Tensor
    confidence: ConfidenceBundle
    gfm_mask: torch.Tensor
    tcp_logits: Optional[torch.Tensor] = None
    branches: List[Branch] = field(default_factory=list)

    @property
    def modal_concat(self) -> torch.Tensor:
        return self.per_modality.flatten(1)


class ClassifierHead(nn.Module):
    """BN neck + 无偏置线性分类器"""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.bottleneck = nn.BatchNorm1d(in_dim)
        self.bottleneck.bias.requires_grad_(False)
        self.classifier = nn.Linear(in_dim, n_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.bottleneck(features))


def _subset_features(features: Sequence[TokenFeatures], index: torch.Tensor) -> List[TokenFeatures]:
    return [TokenFeatures(f.cls.index_select(0, index), f.patches.index_select(0, index), f.modality) for f in features]


def _subset_bundle(bundle: ConfidenceBundle, index: torch.Tensor) -> ConfidenceBundle:
    return ConfidenceBundle(
        mono=bundle.mono.index_select(0, index),
        holo=bundle.holo.index_select(0, index),
        co_belief=bundle.co_belief.index_select(0, index),
        weights=bundle.weights.index_select(0, index),
        present=bundle.present.index_select(0, index),
    )


class DCGModel(nn.Module):
    """
    解耦的多模态 ReID 模型

    输入为 R, N, T 顺序的图像堆叠 (B, 3, C, H, W) 与 (B, 3) 存在掩码。
    缺失模态照常编码，但在任何下游计算之前置零，其像素不影响输出。
    """

    def __init__(self, config: RunConfig, n_classes: int, variant: Optional[AblationVariant] = None):
        super().__init__()
        self.config = config
        self.n_classes = n_classes
        self.variant = variant or config.variant
        enc = config.encoder
        dim = enc.embed_dim

        self.encoder = TokenEncoder(enc)
        self.dcdw = DynamicConfidenceWeighting(dim, enc.heads)
        self.cfm = CollaborationFusionModule(dim, enc.heads, enc.grid, config.fusion)
        self.gfm = GuidanceFusionModule(dim, enc.grid, config.fusion)
        self.gate = RoutingGate(config.fusion.beta_init, config.fusion.beta_min, config.fusion.beta_max)

        self.head_fused = ClassifierHead(dim, n_classes)
        if config.loss.modal_head == ModalHead.CONCAT:
            self.head_modal = nn.ModuleList([ClassifierHead(3 * dim, n_classes)])
        else:
            self.head_modal = nn.ModuleList([ClassifierHead(dim, n_classes) for _ in MODALITIES])
        # 逐模态分类头，给出置信度回归的真实类别概率
        self.tcp_head = nn.Linear(dim, n_classes)

        self._route_seed = config.seed
        self._route_generator = torch.Generator().manual_seed(config.seed)

        if self.variant == AblationVariant.NO_GFM_AMPLIFY:
            self.gfm.amplification.freeze_at_zero()

    def encode_all(self, images: torch.Tensor, present: torch.Tensor) -> List[TokenFeatures]:
        batch = images.shape[0]
        tokens = self.encoder(images.flatten(0, 1)).unflatten(0, (batch, len(MODALITIES)))
        tokens = torch.where(present[:, :, None, None], tokens, torch.zeros_like(tokens))
        return [TokenFeatures.from_tokens(tokens[:, m.index], m) for m in MODALITIES]

    def _random_routes(self, batch: int) -> torch.Tensor:
        if self.training:
            generator = self._route_generator
        else:
            generator = torch.Generator().manual_seed(self._route_seed)
        return torch.rand(batch, generator=generator) < 0.5

    def branch_masks(self, bundle: ConfidenceBundle) -> Tuple[torch.Tensor, torch.Tensor]:
        """按变体给出 (cfm_rows, gfm_rows)，尚未排除单模态样本"""
        batch = bundle.weights.shape[0]
        device = bundle.weights.device
        all_rows = torch.ones(batch, dtype=torch.bool, device=device)
        none = torch.zeros_like(all_rows)
        if self.variant == AblationVariant.FEED_ALL:
            return all_rows, all_rows
        if self.variant == AblationVariant.CFM_ONLY:
            return all_rows, none
        if self.variant == AblationVariant.GFM_ONLY:
            return none, all_rows
        if self.variant == AblationVariant.BASELINE:
            return none, none
        if self.variant == AblationVariant.NO_DCDW_RANDOM:
            gfm = self._random_routes(batch).to(device)
        else:
            gfm = self.gate(bundle.weights)
        return ~gfm, gfm

    def forward(self, images: torch.Tensor, present: torch.Tensor) -> Tuple[EmbeddingBundle, List[FusionOutcome]]:
        """
        Args:
            images: (B, 3, C, H, W)
            present: (B, 3) 布尔存在掩码

        Returns:
            (EmbeddingBundle, 逐样本 FusionOutcome)

        Raises:
            InputError: 某个样本没有任何存在模态
        """
        present = present.to(torch.bool)
        if not present.any(dim=-1).all():
            raise InputError("every sample needs at least one present modality")

        features = self.encode_all(images, present)
        per_modality = torch.stack([f.cls for f in features], dim=1)
        bundle = self.dcdw(features, present)

        batch, _, dim = per_modality.shape
        single = present.sum(dim=-1) == 1
        cfm_rows, gfm_rows = self.branch_masks(bundle)
        cfm_rows = cfm_rows & ~single
        gfm_rows = gfm_rows & ~single

        retention: Dict[int, RetentionDecision] = {}
        dominance: Dict[int, DominantSelection] = {}
        fused_cfm = per_modality.new_zeros(batch, dim)
        fused_gfm = per_modality.new_zeros(batch, dim)

        if cfm_rows.any():
            index = cfm_rows.nonzero().squeeze(-1)
            drop = self.variant != AblationVariant.NO_CFM_DROP
            out, decisions = self.cfm(_subset_features(features, index), _subset_bundle(bundle, index), drop=drop)
            fused_cfm = fused_cfm.index_copy(0, index, out)
            retention = dict(zip(index.tolist(), decisions))
        if gfm_rows.any():
            index = gfm_rows.nonzero().squeeze(-1)
            out, selections = self.gfm(_subset_features(features, index), _subset_bundle(bundle, index), self.dcdw)
            fused_gfm = fused_gfm.index_copy(0, index, out)
            dominance = dict(zip(index.tolist(), selections))

        present_f = present.to(per_modality.dtype).unsqueeze(-1)
        pooled = (per_modality * present_f).sum(dim=1)
        if self.variant == AblationVariant.FEED_ALL:
            fused = torch.where((cfm_rows & gfm_rows).unsqueeze(-1), 0.5 * (fused_cfm + fused_gfm), pooled)
        elif self.variant == AblationVariant.BASELINE:
            fused = pooled / present_f.sum(dim=1)
        else:
            fused = torch.where(cfm_rows.unsqueeze(-1), fused_cfm, torch.where(gfm_rows.unsqueeze(-1), fused_gfm, pooled))

        outcomes, branches = self._outcomes(fused, bundle, cfm_rows, gfm_rows, retention, dominance)
        logits_modal = self._modal_logits(per_modality)
        embedding = EmbeddingBundle(
            fused=fused,
            per_modality=per_modality,
            logits_fused=self.head_fused(fused),
            logits_modal=logits_modal,
            confidence=bundle,
            gfm_mask=gfm_rows,
            tcp_logits=self.tcp_head(per_modality),
            branches=branches,
        )
        return embedding, outcomes

    def _modal_logits(self, per_modality: torch.Tensor) -> torch.Tensor:
        if self.config.loss.modal_head == ModalHead.CONCAT:
            return self.head_modal[0](per_modality.flatten(1))
        return torch.stack([head(per_modality[:, i]) for i, head in enumerate(self.head_modal)], dim=1)

    def _outcomes(
        self,
        fused: torch.Tensor,
        bundle: ConfidenceBundle,
        cfm_rows: torch.Tensor,
        gfm_rows: torch.Tensor,
        retention: Dict[int, RetentionDecision],
        dominance: Dict[int, DominantSelection],
    ) -> Tuple[List[FusionOutcome], List[Branch]]:
        outcomes: List[FusionOutcome] = []
        cfm_list, gfm_list = cfm_rows.tolist(), gfm_rows.tolist()
        detached = fused.detach()
        for i in range(fused.shape[0]):
            if cfm_list[i] and gfm_list[i]:
                branch = Branch.BOTH
            elif cfm_list[i]:
                branch = Branch.CFM
            elif gfm_list[i]:
                branch = Branch.GFM
            else:
                branch = Branch.BYPASS
            outcomes.append(FusionOutcome(
                branch=branch,
                fused=detached[i],
                confidence=bundle.row(i),
                retention=retention.get(i),
                dominance=dominance.get(i),
            ))
        return outcomes, [o.branch for o in outcomes]

    def after_step(self) -> None:
        """优化器更新后截断 beta"""
        self.gate.clamp_()

    def route_rng_state(self) -> torch.Tensor:
        """随机路由生成器的状态，续训时恢复"""
        return self._route_generator.get_state()

    def set_route_rng_state(self, state: torch.Tensor) -> None:
        self._route_generator.set_state(state)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """
        按学习率分组的可训练参数

        Returns:
            dict: "heads" 为分类头与置信度头，"gate" 为 beta，"body" 为其余参数
        """
        heads = [self.head_fused, self.head_modal, self.tcp_head, self.dcdw.heads]
        head_ids = {id(p) for module in heads for p in module.parameters()}
        groups: Dict[str, List[nn.Parameter]] = {"body": [], "heads": [], "gate": []}
        for param in self.parameters():
            if not param.requires_grad:
                continue
            if param is self.gate.beta:
                groups["gate"].append(param)
            elif id(param) in head_ids:
                groups["heads"].append(param)
            else:
                groups["body"].append(param)
        return groups

    def trainable_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_model(config: RunConfig, n_classes: int, variant: Optional[AblationVariant] = None) -> DCGModel:
    """
    创建模型实例

    Args:
        config: 运行配置
        n_classes: 训练集身份数
        variant: 消融变体，默认取 config.variant

    Returns:
        DCGModel: 模型实例
    """
    model = DCGModel(config, n_classes, variant)
    logger.info(
        f"模型已创建: variant={model.variant.value}, classes={n_classes}, "
        f"trainable_params={model.trainable_parameters()}"
    )
    return model
