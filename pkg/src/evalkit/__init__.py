"""
__init__.py

检索评估模块初始化
"""

from .metrics import average_precision, cmc_curve, first_hit_rank
from .retrieval import EvalReport, Protocol, RetrievalInstance, compare_per_query, evaluate

__all__ = [
    'average_precision',
    'cmc_curve',
    'first_hit_rank',
    'EvalReport',
    'Protocol',
    'RetrievalInstance',
    'compare_per_query',
    'evaluate',
]
