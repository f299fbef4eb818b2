"""
__init__.py

配置模块初始化
"""

from .settings import (
    AugmentConfig,
    DataConfig,
    EncoderConfig,
    EvalConfig,
    FusionConfig,
    LossConfig,
    OptimConfig,
    RunConfig,
    SynthConfig,
    apply_overrides,
    config_hash,
    get_settings,
    load_settings,
    model_hash,
    reload_settings,
)

__all__ = [
    'AugmentConfig',
    'DataConfig',
    'EncoderConfig',
    'EvalConfig',
    'FusionConfig',
    'LossConfig',
    'OptimConfig',
    'RunConfig',
    'SynthConfig',
    'apply_overrides',
    'config_hash',
    'get_settings',
    'load_settings',
    'model_hash',
    'reload_settings',
]
