"""
推理服务：逐批嵌入样本并记录逐样本路由审计
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from config.settings import RunConfig
from core.model import DCGModel
from core.types import MODALITIES, Branch
from datakit.records import SampleRecord
from datakit.torch_data import MultiModalDataset

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingResult:
    """一组样本的融合嵌入与逐样本路由记录"""
    records: List[SampleRecord]
    embeddings: np.ndarray
    audit: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def identities(self) -> np.ndarray:
        return np.asarray([r.identity for r in self.records], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.asarray([r.camera for r in self.records], dtype=np.int64)

    @property
    def branches(self) -> List[str]:
        return [row["branch"] for row in self.audit]

    @property
    def max_weights(self) -> np.ndarray:
        return np.asarray([max(row["weights"]) for row in self.audit], dtype=np.float64)

    def branch_fraction(self, branch: Branch) -> float:
        if not self.audit:
            return 0.0
        return sum(b == branch.value for b in self.branches) / len(self.audit)


class Embedder:
    """
    推理服务

    以 eval 模式运行模型，收集 BN 之前的融合嵌入，每个样本一行审计记录
    """

    def __init__(self, model: DCGModel, config: RunConfig):
        self.model = model
        self.config = config
        self.device = torch.device(config.device)

    def _loader(self, records: Sequence[SampleRecord]) -> DataLoader:
        enc = self.config.encoder
        dataset = MultiModalDataset(records, enc.image_height, enc.image_width)
        return DataLoader(dataset, batch_size=self.config.evaluation.batch_size, shuffle=False, num_workers=0)

    @torch.no_grad()
    def embed(self, records: Sequence[SampleRecord], desc: str = "embed") -> EmbeddingResult:
        """
        Args:
            records: 待嵌入的样本
            desc: 进度条标题

        Returns:
            EmbeddingResult: 嵌入矩阵 (N, D) 与审计行，顺序与 records 一致
        """
        records = list(records)
        self.model.eval()
        self.model.to(self.device)

        chunks: List[np.ndarray] = []
        audit: List[Dict[str, Any]] = []
        progress = tqdm(self._loader(records), desc=desc, disable=not logger.isEnabledFor(logging.INFO), leave=False)
        for batch in progress:
            bundle, outcomes = self.model(batch["images"].to(self.device), batch["present"].to(self.device))
            chunks.append(bundle.fused.cpu().numpy().astype(np.float64))
            for position, outcome in zip(batch["position"].tolist(), outcomes):
                record = records[position]
                audit.append({
                    "sample_id": record.sample_id,
                    "identity": record.identity,
                    "camera": record.camera,
                    "mask": list(record.mask),
                    "degradation": {m.value: d.to_dict() for m, d in record.degradation.items()},
                    **outcome.to_dict(),
                })

        dim = self.config.encoder.embed_dim
        embeddings = np.concatenate(chunks) if chunks else np.zeros((0, dim))
        logger.debug(f"{desc}: {len(records)} samples embedded")
        return EmbeddingResult(records=records, embeddings=embeddings, audit=audit)


def routing_fidelity(result: EmbeddingResult) -> Dict[str, Any]:
    """
    用合成数据的退化真值检查路由

    Returns:
        dict: degraded_to_gfm 为退化样本进入 GFM 的比例；degraded_min_weight 为其中
        退化模态权重最小的比例；balanced_to_cfm 为平衡样本进入 CFM 的比例
    """
    degraded = gfm_hits = min_hits = balanced = cfm_hits = 0
    for record, row in zip(result.records, result.audit):
        if record.is_degraded:
            degraded += 1
            if row["branch"] != Branch.GFM.value:
                continue
            gfm_hits += 1
            weights = [w if record.mask[i] else float("inf") for i, w in enumerate(row["weights"])]
            if int(np.argmin(weights)) == MODALITIES.index(record.degraded_modality):
                min_hits += 1
        else:
            balanced += 1
            cfm_hits += row["branch"] == Branch.CFM.value
    return {
        "degraded_samples": degraded,
        "balanced_samples": balanced,
        "degraded_to_gfm": gfm_hits / degraded if degraded else 0.0,
        "degraded_min_weight": min_hits / gfm_hits if gfm_hits else 0.0,
        "balanced_to_cfm": cfm_hits / balanced if balanced else 0.0,
    }
