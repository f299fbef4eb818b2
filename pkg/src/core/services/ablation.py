"""
消融服务：同一种子下逐个训练并评估变体
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

from config.settings import RunConfig, config_hash
from core.services.embedder import Embedder
from core.services.trainer import Trainer
from core.types import AblationVariant
from datakit.splits import DatasetSplits
from evalkit.protocol import Evaluation, embed_and_evaluate
from evalkit.retrieval import Protocol, compare_per_query
from infrastructure.artifacts import write_csv

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = [
    "variant", "description", "params", "mAP", "R-1", "R-5", "R-10", "degraded_mAP", "degraded_R-1",
]
PER_QUERY_FILE = "per_query_full_vs_feed_all.csv"


class AblationRunner:
    """
    消融实验

    按请求顺序逐个训练并评估变体，写出 ablation.csv（每个变体一行）；
    同时含 full 与 feed_all 时另写逐查询对比表
    """

    def __init__(self, config: RunConfig, output_dir: Union[str, Path]):
        self.config = config
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash(config)
        self.evaluations: Dict[AblationVariant, Evaluation] = {}

    def run_variant(self, variant: AblationVariant, splits: DatasetSplits) -> Dict[str, object]:
        """
        训练并评估单个变体，评估结果记入 self.evaluations

        Returns:
            dict: ablation.csv 的一行
        """
        logger.info(f"消融变体: {variant.value} ({variant.description})")
        result = Trainer(self.config, self.output_dir / variant.value, variant).fit(splits)
        evaluation = embed_and_evaluate(
            Embedder(result.model, self.config),
            splits.query,
            splits.gallery,
            self.config.evaluation.exclusion,
            self.config.evaluation.ks,
            Protocol(exclusion=self.config.evaluation.exclusion, config_hash=self.config_hash),
        )
        self.evaluations[variant] = evaluation
        degraded = evaluation.subsets.get("degraded")
        return {
            "variant": variant.value,
            "description": variant.description,
            "params": result.model.trainable_parameters(),
            **evaluation.report.row(),
            "degraded_mAP": degraded.mAP if degraded else "",
            "degraded_R-1": degraded.rank(1) if degraded else "",
        }

    def run(self, variants: Sequence[AblationVariant], splits: DatasetSplits) -> List[Dict[str, object]]:
        """
        Args:
            variants: 变体列表
            splits: 数据划分，所有变体共用

        Returns:
            List[Dict[str, object]]: 每个变体一行
        """
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.evaluations.clear()
        rows = [self.run_variant(variant, splits) for variant in variants]
        write_csv(self.output_dir / "ablation.csv", rows, self.config_hash, ABLATION_COLUMNS)

        full = self.evaluations.get(AblationVariant.FULL)
        feed_all = self.evaluations.get(AblationVariant.FEED_ALL)
        if full is not None and feed_all is not None:
            comparison = compare_per_query(full.report, feed_all.report, labels=("full", "feed_all"))
            write_csv(self.output_dir / PER_QUERY_FILE, comparison, self.config_hash)
        logger.info(f"消融结果已写入: {self.output_dir / 'ablation.csv'} ({len(rows)} variants)")
        return rows
