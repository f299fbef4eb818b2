"""
排序检索指标：AP 与 CMC@K
"""

from typing import Dict, Iterable, Optional, Sequence

import numpy as np


def average_precision(ranked_relevance: Sequence[bool]) -> Optional[float]:
    """
    AP = 各相关位置 k 上 (前 k 个中相关数)/k 的平均

    Args:
        ranked_relevance: 按距离升序（已排除）的图库相关性

    Returns:
        Optional[float]: 没有相关项时返回 None，由调用方计入跳过数
    """
    relevance = np.asarray(ranked_relevance, dtype=bool)
    positions = np.flatnonzero(relevance)
    if positions.size == 0:
        return None
    hits = np.arange(1, positions.size + 1, dtype=np.float64)
    return float(np.mean(hits / (positions + 1.0)))


def first_hit_rank(ranked_relevance: Sequence[bool]) -> Optional[int]:
    """第一个正确匹配的名次（从 1 开始）"""
    positions = np.flatnonzero(np.asarray(ranked_relevance, dtype=bool))
    return int(positions[0]) + 1 if positions.size else None


def cmc_curve(rankings: Iterable[Sequence[bool]], ks: Sequence[int] = (1, 5, 10)) -> Dict[int, float]:
    """
    CMC@K = 前 K 名中至少有一个正确匹配的查询比例

    没有相关项的查询与 AP 一样被跳过
    """
    first_hits = [rank for rank in (first_hit_rank(r) for r in rankings) if rank is not None]
    if not first_hits:
        return {int(k): 0.0 for k in ks}
    hits = np.asarray(first_hits)
    return {int(k): float(np.mean(hits <= k)) for k in ks}
