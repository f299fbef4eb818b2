"""
评估协议：嵌入并评估、退化/平衡查询子集、缺失模态扫描
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InputError
from core.services.embedder import Embedder, EmbeddingResult
from core.types import Exclusion, Modality, pattern_label
from datakit.records import SampleRecord, mask_dataset
from evalkit.retrieval import TABLE_COLUMNS, EvalReport, Protocol, RetrievalInstance, evaluate

logger = logging.getLogger(__name__)

# 缺失模态扫描的 6 种模式
MISSING_PATTERNS: Tuple[Tuple[Modality, ...], ...] = (
    (Modality.R,),
    (Modality.N,),
    (Modality.T,),
    (Modality.R, Modality.N),
    (Modality.R, Modality.T),
    (Modality.N, Modality.T),
)

AVERAGE_LABEL = "Average"


def build_instance(query: EmbeddingResult, gallery: EmbeddingResult) -> RetrievalInstance:
    return RetrievalInstance(
        query_embeddings=query.embeddings,
        query_ids=query.identities,
        query_cameras=query.cameras,
        gallery_embeddings=gallery.embeddings,
        gallery_ids=gallery.identities,
        gallery_cameras=gallery.cameras,
    )


@dataclass
class Evaluation:
    report: EvalReport
    query: EmbeddingResult
    gallery: EmbeddingResult
    subsets: Dict[str, EvalReport] = field(default_factory=dict)


def subset_reports(
    instance: RetrievalInstance,
    queries: Sequence[SampleRecord],
    exclusion: Exclusion,
    ks: Sequence[int],
    protocol: Protocol,
) -> Dict[str, EvalReport]:
    """
    退化查询子集与平衡查询子集的报告，没有退化元数据时为空
    """
    degraded = [i for i, r in enumerate(queries) if r.is_degraded]
    balanced = [i for i, r in enumerate(queries) if not r.is_degraded]
    if not degraded:
        return {}
    reports = {"degraded": evaluate(instance.subset_queries(degraded), exclusion, ks,
                                    protocol.model_copy(update={"subset": "degraded"}))}
    if balanced:
        reports["balanced"] = evaluate(instance.subset_queries(balanced), exclusion, ks,
                                       protocol.model_copy(update={"subset": "balanced"}))
    return reports


def embed_and_evaluate(
    embedder: Embedder,
    query: Sequence[SampleRecord],
    gallery: Sequence[SampleRecord],
    exclusion: Exclusion,
    ks: Sequence[int] = (1, 5, 10),
    protocol: Optional[Protocol] = None,
) -> Evaluation:
    """
    嵌入查询与图库并评估

    Args:
        embedder: 推理服务
        query: 查询样本
        gallery: 图库样本
        exclusion: 图库排除规则
        ks: CMC 名次
        protocol: 协议描述（缺失模式、配置哈希）

    Returns:
        Evaluation: 总报告、嵌入结果，以及退化/平衡子集报告
    """
    protocol = protocol or Protocol(exclusion=exclusion)
    query_result = embedder.embed(query, desc="query")
    gallery_result = embedder.embed(gallery, desc="gallery")
    instance = build_instance(query_result, gallery_result)
    report = evaluate(instance, exclusion, ks, protocol)
    return Evaluation(
        report=report,
        query=query_result,
        gallery=gallery_result,
        subsets=subset_reports(instance, query_result.records, exclusion, ks, protocol),
    )


@dataclass
class SweepRow:
    label: str
    report: Optional[EvalReport] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.report is None

    def values(self) -> Dict[str, object]:
        row: Dict[str, object] = {"setting": self.label}
        if self.report is None:
            row.update({c: "FAILED" for c in TABLE_COLUMNS})
        else:
            row.update(self.report.row())
        return row


@dataclass
class SweepTable:
    rows: List[SweepRow]
    average: Dict[str, float]
    partial: bool = False

    def table(self) -> List[Dict[str, object]]:
        average: Dict[str, object] = {"setting": AVERAGE_LABEL + (" (partial)" if self.partial else "")}
        average.update(self.average)
        return [row.values() for row in self.rows] + [average]


def average_row(reports: Sequence[EvalReport]) -> Dict[str, float]:
    """各模式 mAP / R-k 的算术平均"""
    if not reports:
        return {c: 0.0 for c in TABLE_COLUMNS}
    rows = [r.row() for r in reports]
    return {c: float(np.mean([row[c] for row in rows])) for c in TABLE_COLUMNS}


def missing_modality_sweep(
    embedder: Embedder,
    query: Sequence[SampleRecord],
    gallery: Sequence[SampleRecord],
    exclusion: Exclusion,
    ks: Sequence[int] = (1, 5, 10),
    patterns: Sequence[Tuple[Modality, ...]] = MISSING_PATTERNS,
    config_hash: Optional[str] = None,
) -> SweepTable:
    """
    对每种缺失模式同时掩码查询与图库，重新嵌入并评估，最后追加平均行

    单个模式失败时记录失败标记并继续，平均行只对成功的模式求平均并标记 partial
    """
    rows: List[SweepRow] = []
    for pattern in patterns:
        label = pattern_label(pattern)
        try:
            protocol = Protocol(exclusion=exclusion, missing=label, config_hash=config_hash)
            evaluation = embed_and_evaluate(
                embedder, mask_dataset(query, pattern), mask_dataset(gallery, pattern), exclusion, ks, protocol
            )
            rows.append(SweepRow(label, evaluation.report))
            logger.info(f"{label}: mAP={evaluation.report.mAP:.4f}, R-1={evaluation.report.rank(1):.4f}")
        except (InputError, RuntimeError, ValueError) as exc:
            logger.warning(f"{label} 评估失败: {exc}")
            rows.append(SweepRow(label, error=str(exc)))

    succeeded = [row.report for row in rows if row.report is not None]
    return SweepTable(rows=rows, average=average_row(succeeded), partial=len(succeeded) < len(rows))
