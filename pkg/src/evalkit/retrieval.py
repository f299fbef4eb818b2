"""
ReID 检索评估

对每个查询计算到图库的欧氏距离，按排除规则去掉图库项后升序排序（同距离按图库下标稳定排序），
再计算 AP 与 CMC。没有有效正样本的查询跳过并计数。
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from core.errors import InputError
from core.types import Exclusion
from evalkit.metrics import average_precision, cmc_curve, first_hit_rank

logger = logging.getLogger(__name__)

# 表格列顺序：mAP, R-1, R-5, R-10
TABLE_COLUMNS = ["mAP", "R-1", "R-5", "R-10"]


@dataclass
class RetrievalInstance:
    query_embeddings: np.ndarray
    query_ids: np.ndarray
    query_cameras: np.ndarray
    gallery_embeddings: np.ndarray
    gallery_ids: np.ndarray
    gallery_cameras: np.ndarray

    def __post_init__(self) -> None:
        self.query_embeddings = np.atleast_2d(np.asarray(self.query_embeddings, dtype=np.float64))
        self.gallery_embeddings = np.atleast_2d(np.asarray(self.gallery_embeddings, dtype=np.float64))
        self.query_ids = np.asarray(self.query_ids)
        self.query_cameras = np.asarray(self.query_cameras)
        self.gallery_ids = np.asarray(self.gallery_ids)
        self.gallery_cameras = np.asarray(self.gallery_cameras)
        if self.gallery_embeddings.shape[0] == 0:
            raise InputError("gallery must not be empty")
        if self.query_embeddings.shape[1] != self.gallery_embeddings.shape[1]:
            raise InputError(
                f"embedding dims differ: query {self.query_embeddings.shape[1]}, "
                f"gallery {self.gallery_embeddings.shape[1]}"
            )
        if not (len(self.query_ids) == len(self.query_cameras) == self.query_embeddings.shape[0]):
            raise InputError("query ids / cameras do not match query embeddings")
        if not (len(self.gallery_ids) == len(self.gallery_cameras) == self.gallery_embeddings.shape[0]):
            raise InputError("gallery ids / cameras do not match gallery embeddings")

    @property
    def n_queries(self) -> int:
        return self.query_embeddings.shape[0]

    def subset_queries(self, rows: Sequence[int]) -> "RetrievalInstance":
        rows = np.asarray(rows, dtype=np.int64)
        return RetrievalInstance(
            self.query_embeddings[rows], self.query_ids[rows], self.query_cameras[rows],
            self.gallery_embeddings, self.gallery_ids, self.gallery_cameras,
        )


class Protocol(BaseModel):
    """评估协议描述"""
    exclusion: Exclusion = Exclusion.SAME_CAMERA_SAME_ID
    missing: str = "full"
    subset: str = "all"
    config_hash: Optional[str] = None


class EvalReport(BaseModel):
    mAP: float = 0.0
    cmc: Dict[int, float] = Field(default_factory=dict)
    per_query_ap: List[float] = Field(default_factory=list)
    # 与 per_query_ap 对齐的查询下标和首中名次
    scored_queries: List[int] = Field(default_factory=list)
    first_hit: List[int] = Field(default_factory=list)
    skipped: int = 0
    n_queries: int = 0
    protocol: Protocol = Field(default_factory=Protocol)

    def rank(self, k: int) -> float:
        return self.cmc.get(k, 0.0)

    def row(self) -> Dict[str, float]:
        return {"mAP": self.mAP, "R-1": self.rank(1), "R-5": self.rank(5), "R-10": self.rank(10)}

    def to_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["protocol", *TABLE_COLUMNS, "skipped", "config_hash"])
            row = self.row()
            writer.writerow([
                self.protocol.missing,
                *[f"{row[c]:.6f}" for c in TABLE_COLUMNS],
                self.skipped,
                self.protocol.config_hash or "",
            ])
        return path


def _distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((gallery - query[None, :]) ** 2, axis=1))


def evaluate(
    instance: RetrievalInstance,
    exclusion: Union[Exclusion, str] = Exclusion.SAME_CAMERA_SAME_ID,
    ks: Sequence[int] = (1, 5, 10),
    protocol: Optional[Protocol] = None,
) -> EvalReport:
    """
    评估一个检索实例

    Args:
        instance: 查询与图库嵌入及其身份、相机
        exclusion: same_camera_same_id 去掉与查询同身份同相机的图库项；none 不排除
        ks: CMC 名次

    Returns:
        EvalReport: mAP 为已评分查询 AP 的平均
    """
    exclusion = Exclusion(exclusion)
    protocol = (protocol or Protocol()).model_copy(update={"exclusion": exclusion})

    per_query_ap: List[float] = []
    scored: List[int] = []
    first_hit: List[int] = []
    rankings: List[np.ndarray] = []
    skipped = 0
    for q in range(instance.n_queries):
        qid, qcam = instance.query_ids[q], instance.query_cameras[q]
        keep = np.ones(len(instance.gallery_ids), dtype=bool)
        if exclusion == Exclusion.SAME_CAMERA_SAME_ID:
            keep &= ~((instance.gallery_ids == qid) & (instance.gallery_cameras == qcam))
        kept = np.flatnonzero(keep)
        if kept.size == 0:
            skipped += 1
            continue
        dist = _distances(instance.query_embeddings[q], instance.gallery_embeddings[kept])
        order = kept[np.argsort(dist, kind="stable")]
        relevance = instance.gallery_ids[order] == qid
        ap = average_precision(relevance)
        if ap is None:
            skipped += 1
            continue
        per_query_ap.append(ap)
        scored.append(q)
        first_hit.append(first_hit_rank(relevance))
        rankings.append(relevance)

    if skipped:
        logger.debug(f"{skipped} 个查询没有有效正样本，已跳过")
    return EvalReport(
        mAP=float(np.mean(per_query_ap)) if per_query_ap else 0.0,
        cmc=cmc_curve(rankings, ks),
        per_query_ap=per_query_ap,
        scored_queries=scored,
        first_hit=first_hit,
        skipped=skipped,
        n_queries=instance.n_queries,
        protocol=protocol,
    )


def compare_per_query(
    report_a: EvalReport,
    report_b: EvalReport,
    labels: Sequence[str] = ("a", "b"),
) -> List[Dict[str, object]]:
    """
    两份报告的逐查询对比（只含两边都评分的查询）

    Returns:
        List[dict]: query, ap_<a>, ap_<b>, rank1_<a>, rank1_<b>, delta_ap
    """
    name_a, name_b = labels
    by_query_b = {q: (ap, hit) for q, ap, hit in zip(report_b.scored_queries, report_b.per_query_ap, report_b.first_hit)}
    rows: List[Dict[str, object]] = []
    for q, ap_a, hit_a in zip(report_a.scored_queries, report_a.per_query_ap, report_a.first_hit):
        if q not in by_query_b:
            continue
        ap_b, hit_b = by_query_b[q]
        rows.append({
            "query": q,
            f"ap_{name_a}": ap_a,
            f"ap_{name_b}": ap_b,
            f"rank1_{name_a}": int(hit_a == 1),
            f"rank1_{name_b}": int(hit_b == 1),
            "delta_ap": ap_a - ap_b,
        })
    return rows
