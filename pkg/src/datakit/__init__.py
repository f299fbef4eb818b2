"""
__init__.py

数据模块初始化
"""

from .degradation import apply_degradation
from .layout import LayoutSpec, LoadReport, export_dataset, load_dataset
from .records import Degradation, SampleRecord, mask_dataset, mask_modalities
from .splits import DatasetSplits, build_splits, split_records
from .synthetic import generate_synthetic

__all__ = [
    'apply_degradation',
    'LayoutSpec',
    'LoadReport',
    'export_dataset',
    'load_dataset',
    'Degradation',
    'SampleRecord',
    'mask_dataset',
    'mask_modalities',
    'DatasetSplits',
    'build_splits',
    'split_records',
    'generate_synthetic',
]
