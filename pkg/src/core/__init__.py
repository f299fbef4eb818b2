"""
__init__.py

核心模块初始化：类型与异常
"""

from .errors import (
    CheckpointError,
    ConfigurationError,
    ConsistencyError,
    DCGError,
    DegenerateInputError,
    InputError,
    RunLockError,
    SamplerError,
)
from .types import MODALITIES, AblationVariant, Branch, Exclusion, Modality

__all__ = [
    'CheckpointError',
    'ConfigurationError',
    'ConsistencyError',
    'DCGError',
    'DegenerateInputError',
    'InputError',
    'RunLockError',
    'SamplerError',
    'MODALITIES',
    'AblationVariant',
    'Branch',
    'Exclusion',
    'Modality',
]
