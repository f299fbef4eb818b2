"""
训练 / 查询 / 图库划分
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

from config.settings import DataConfig
from core.errors import ConfigurationError
from core.types import DataSource, SplitBy
from datakit.layout import load_dataset
from datakit.records import SampleRecord, identity_labels
from datakit.synthetic import generate_synthetic

logger = logging.getLogger(__name__)


@dataclass
class DatasetSplits:
    train: List[SampleRecord]
    query: List[SampleRecord]
    gallery: List[SampleRecord]

    @property
    def label_map(self) -> Dict[int, int]:
        return identity_labels(self.train)

    @property
    def n_classes(self) -> int:
        return len(self.label_map)


def _by_identity(records: Sequence[SampleRecord]) -> Dict[int, List[SampleRecord]]:
    groups: Dict[int, List[SampleRecord]] = {}
    for record in sorted(records, key=lambda r: (r.identity, r.index, r.camera)):
        groups.setdefault(record.identity, []).append(record)
    return groups


def _query_gallery(samples: List[SampleRecord], per_identity: int, query: list, gallery: list) -> None:
    n_query = min(per_identity, max(len(samples) - 1, 0))
    query.extend(samples[:n_query])
    gallery.extend(samples[n_query:])


def split_records(records: Sequence[SampleRecord], config: DataConfig) -> DatasetSplits:
    """
    把单个样本集合划分为训练、查询与图库

    sample 模式下每个身份按 train_fraction 切分（至少留两张用于测试）；
    identity 模式下训练与测试身份不重叠
    """
    groups = _by_identity(records)
    train: List[SampleRecord] = []
    query: List[SampleRecord] = []
    gallery: List[SampleRecord] = []

    if config.split_by == SplitBy.SAMPLE:
        for samples in groups.values():
            if len(samples) < 3:
                train.extend(samples)
                continue
            n_train = min(max(1, round(len(samples) * config.train_fraction)), len(samples) - 2)
            train.extend(samples[:n_train])
            _query_gallery(samples[n_train:], config.query_per_identity, query, gallery)
    else:
        identities = sorted(groups)
        n_train = min(max(1, round(len(identities) * config.train_fraction)), len(identities) - 1)
        for identity in identities[:n_train]:
            train.extend(groups[identity])
        for identity in identities[n_train:]:
            _query_gallery(groups[identity], config.query_per_identity, query, gallery)

    if not train or not query or not gallery:
        raise ConfigurationError(
            f"split produced empty partitions (train={len(train)}, query={len(query)}, gallery={len(gallery)})"
        )
    return DatasetSplits(train=train, query=query, gallery=gallery)


def build_splits(config: DataConfig, image_size=None) -> DatasetSplits:
    """
    按数据源构建划分：合成数据在内存中生成，目录数据读取三个划分目录
    """
    if config.source == DataSource.SYNTHETIC:
        return split_records(generate_synthetic(config.synth), config)
    if not config.root:
        raise ConfigurationError("data.root is required for directory datasets")
    train, _ = load_dataset(config.root, config.train_split, image_size=image_size)
    query, _ = load_dataset(config.root, config.query_split, image_size=image_size)
    gallery, _ = load_dataset(config.root, config.gallery_split, image_size=image_size)
    logger.info(f"目录数据集: train={len(train)}, query={len(query)}, gallery={len(gallery)}")
    return DatasetSplits(train=train, query=query, gallery=gallery)
